import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from imnd.nn_core import (DILATIONS, DTYPE, KERNEL, AdamState, FormatError, NonFiniteError, ShapeError, adam_step,
                          backward, conv1d_layer, dilated_conv_forward, dump_params, init_dilated_cnn, init_mlp,
                          load_params, mlp_forward, receptive_field, sgd_step)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def naive_mlp(params, x):
    h = list(x)
    n_layers = len(params) // 2
    for k in range(n_layers):
        w, b = params[f"l{k}.w"].numpy(), params[f"l{k}.b"].numpy()
        out = []
        for i in range(w.shape[0]):
            s = b[i]
            for j in range(w.shape[1]):
                s += w[i, j] * h[j]
            if k < n_layers - 1:
                s = 0.5 * s * (1 + torch.erf(torch.tensor(s / np.sqrt(2), dtype=DTYPE)).item())
            out.append(s)
        h = out
    return np.array(h)


def naive_conv(x, w, b, d):
    """Causal dilated convolution by explicit loops, first sample replicated into the past."""
    c_out, c_in, K = w.shape
    T = x.shape[1]
    y = np.zeros((c_out, T))
    for o in range(c_out):
        for t in range(T):
            s = b[o]
            for i in range(c_in):
                for k in range(K):
                    s += w[o, i, k] * x[i, max(t - (K - 1 - k) * d, 0)]
            y[o, t] = s
    return y


def test_mlp_identity_and_arithmetic():
    p = {"l0.w": torch.eye(3, dtype=DTYPE), "l0.b": torch.zeros(3, dtype=DTYPE)}
    x = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)
    assert torch.equal(mlp_forward(p, x, activation=None), x)
    p = {"l0.w": torch.tensor([[2.0]], dtype=DTYPE), "l0.b": torch.tensor([1.0], dtype=DTYPE)}
    assert mlp_forward(p, torch.tensor([3.0], dtype=DTYPE)).item() == 7.0


def test_mlp_matches_loop_oracle():
    p = init_mlp([6, 64, 64, 32], gen(1))
    for k in p:
        p[k] = p[k] + 0.1 * torch.randn(p[k].shape, generator=gen(2), dtype=DTYPE)
    x = torch.randn(6, generator=gen(3), dtype=DTYPE)
    np.testing.assert_allclose(mlp_forward(p, x).numpy(), naive_mlp(p, x.numpy()), atol=1e-12, rtol=0)


def test_mlp_shape_error_names_layer():
    p = init_mlp([6, 4, 2], gen())
    with pytest.raises(ShapeError, match="l0.w"):
        mlp_forward(p, torch.zeros(5, dtype=DTYPE))


def test_receptive_field():
    assert receptive_field() == 517 == 1 + 6 * (1 + 4 + 16 + 64 + 1)


@pytest.mark.parametrize("d", [1, 4, 16])
def test_conv_layer_matches_loop_oracle(d):
    x = torch.randn(1, 3, 60, generator=gen(4), dtype=DTYPE)
    w = torch.randn(2, 3, KERNEL, generator=gen(5), dtype=DTYPE)
    b = torch.randn(2, generator=gen(6), dtype=DTYPE)
    got = conv1d_layer(x, w, b, d)[0].numpy()
    np.testing.assert_allclose(got, naive_conv(x[0].numpy(), w.numpy(), b.numpy(), d), atol=1e-12)


def test_conv_is_causal_and_aligned():
    x = torch.randn(1, 2, 600, generator=gen(7), dtype=DTYPE)
    p = init_dilated_cnn([2, 4, 4, 4, 4, 3], gen(8))
    y = dilated_conv_forward(p, x)
    assert y.shape == (1, 3, 600)
    x2 = x.clone()
    x2[..., 400:] += 1.0
    y2 = dilated_conv_forward(p, x2)
    assert torch.equal(y[..., :400], y2[..., :400])
    assert not torch.equal(y[..., 400], y2[..., 400])


def test_zero_kernels_give_zero_output():
    p = {k: torch.zeros_like(v) for k, v in init_dilated_cnn([3, 4, 4, 4, 4, 2], gen()).items()}
    assert torch.count_nonzero(dilated_conv_forward(p, torch.randn(1, 3, 600, dtype=DTYPE))) == 0


def test_delta_kernels():
    x = torch.randn(1, 1, 50, generator=gen(9), dtype=DTYPE)
    w = torch.zeros(1, 1, KERNEL, dtype=DTYPE)
    w[..., -1] = 1.0  # lag-0 tap
    assert torch.equal(conv1d_layer(x, w, torch.zeros(1, dtype=DTYPE), 4), x)
    w = torch.zeros(1, 1, KERNEL, dtype=DTYPE)
    w[..., KERNEL // 2] = 1.0  # centre tap of a causal kernel is a pure delay
    y = conv1d_layer(x, w, torch.zeros(1, dtype=DTYPE), 1)
    assert torch.equal(y[..., 3:], x[..., :-3])
    assert torch.equal(y[..., :3], x[..., :1].expand(1, 1, 3))


def test_too_short_input_names_length():
    p = init_dilated_cnn([3, 4, 4, 4, 4, 2], gen())
    with pytest.raises(ShapeError, match="517"):
        dilated_conv_forward(p, torch.zeros(1, 3, 516, dtype=DTYPE))


def test_conv_linear_in_weights():
    x = torch.randn(1, 3, 530, generator=gen(10), dtype=DTYPE)
    p1 = {k: v for k, v in init_dilated_cnn([3, 4, 4, 4, 4, 2], gen(11)).items()}
    p2 = {k: v for k, v in init_dilated_cnn([3, 4, 4, 4, 4, 2], gen(12)).items()}
    a, b = 0.7, -1.3
    mix = {k: a * p1[k] + b * p2[k] for k in p1}
    # linear only layer by layer: check the first layer alone
    y = lambda p: conv1d_layer(x, p["c0.w"], torch.zeros(4, dtype=DTYPE), 1)  # noqa: E731
    torch.testing.assert_close(y(mix), a * y(p1) + b * y(p2), atol=1e-12, rtol=0)
    f = lambda p: dilated_conv_forward(p, x, activation=None)  # noqa: E731
    z1 = {k: (v if k.endswith("w") else torch.zeros_like(v)) for k, v in p1.items()}
    assert torch.allclose(f({k: 2 * v if k == "c0.w" else v for k, v in z1.items()}), 2 * f(z1), atol=1e-12)


def test_forward_deterministic():
    p = init_dilated_cnn([3, 4, 4, 4, 4, 2], gen(3))
    x = torch.randn(2, 3, 520, generator=gen(4), dtype=DTYPE)
    assert torch.equal(dilated_conv_forward(p, x), dilated_conv_forward(p, x))


def test_backward_linear_case_and_unused():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE)
    p = {"W": torch.ones(2, 3, dtype=DTYPE, requires_grad=True), "b": torch.zeros(2, dtype=DTYPE, requires_grad=True)}
    g = backward((p["W"] @ x).sum(), p)
    assert torch.equal(g["W"], x.expand(2, 3))
    assert torch.equal(g["b"], torch.zeros(2, dtype=DTYPE))


def test_backward_nan_raises():
    p = {"a": torch.tensor([1.0], dtype=DTYPE, requires_grad=True)}
    with pytest.raises(NonFiniteError):
        backward((p["a"] * float("nan")).sum(), p)


def test_backward_matches_finite_differences():
    g = gen(13)
    p = {**init_mlp([3, 5, 3], g, "m/"), **init_dilated_cnn([3, 4, 4, 4, 4, 2], g, "c/", out_scale=1.0)}
    p = {k: (v + 0.05 * torch.randn(v.shape, generator=g, dtype=DTYPE)).requires_grad_(True) for k, v in p.items()}
    x = torch.randn(1, 530, 3, generator=g, dtype=DTYPE)

    def loss(q):
        z = mlp_forward(q, x, "m/").transpose(1, 2)
        return (dilated_conv_forward(q, z, "c/") ** 2).mean()

    grads = backward(loss(p), p)
    rng = np.random.default_rng(0)
    h = 1e-5
    worst = 0.0
    with torch.no_grad():
        for name in p:
            flat = p[name].view(-1)
            for i in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = loss(p).item()
                flat[i] = old - h
                down = loss(p).item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = grads[name].view(-1)[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert worst < 1e-4


def test_sgd_examples():
    p = {"p": torch.tensor([1.0], dtype=DTYPE)}
    assert sgd_step(p, {"p": torch.tensor([2.0], dtype=DTYPE)}, 0.1)["p"].item() == pytest.approx(0.8, abs=1e-15)
    assert torch.equal(sgd_step(p, {"p": torch.zeros(1, dtype=DTYPE)}, 0.1)["p"], p["p"])
    with pytest.raises(ShapeError):
        sgd_step(p, {"p": torch.zeros(2, dtype=DTYPE)}, 0.1)


def test_adam_first_step_closed_form():
    p = {"p": torch.tensor([1.0], dtype=DTYPE)}
    state, new = adam_step(AdamState(), p, {"p": torch.tensor([1.0], dtype=DTYPE)}, 1e-3)
    # m_hat = v_hat = 1 after bias correction: step = lr / (1 + eps)
    assert 1.0 - new["p"].item() == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)
    assert state.t == 1
    state, same = adam_step(AdamState(), p, {"p": torch.zeros(1, dtype=DTYPE)}, 1e-3)
    assert torch.equal(same["p"], p["p"])


def test_adam_matches_torch_optimizer():
    w = torch.tensor([0.5, -1.0, 2.0], dtype=DTYPE)
    ref = w.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    state, p = AdamState(), {"w": w}
    for k in range(5):
        g = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE) * (k + 1)
        ref.grad = g.clone()
        opt.step()
        state, p = adam_step(state, p, {"w": g}, 1e-2)
    torch.testing.assert_close(p["w"], ref.detach(), atol=1e-15, rtol=0)


def sample_params():
    p = {**init_mlp([6, 4, 2], gen(1), "e/"), **init_dilated_cnn([2, 3, 1], gen(2), "g/")}
    p["c_hat"] = torch.eye(3, dtype=DTYPE)
    p["scalar"] = torch.tensor(3.5, dtype=DTYPE)
    return p


def test_params_round_trip():
    p = sample_params()
    data = dump_params(p, {"mode": "fsda_f"})
    back, meta = load_params(data)
    assert meta == {"mode": "fsda_f"}
    assert list(back) == list(p)
    for k in p:
        assert torch.equal(back[k], p[k]) and back[k].dtype == DTYPE


def test_params_binary_layout():
    data = dump_params({"ab": torch.tensor([[1.5, -2.0]], dtype=DTYPE)}, {})
    expected = (b"IMND" + struct.pack("<II", 1, 2) + b"{}" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab"
                + struct.pack("<I", 2) + struct.pack("<II", 1, 2) + struct.pack("<2d", 1.5, -2.0))
    assert data == expected


def test_corrupt_files_rejected():
    data = dump_params(sample_params())
    with pytest.raises(FormatError, match="magic"):
        load_params(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        load_params(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        load_params(data[:-3])
    with pytest.raises(FormatError, match="trailing"):
        load_params(data + b"\0")


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       st.lists(st.floats(allow_nan=False, width=64), min_size=1, max_size=6), max_size=4))
def test_round_trip_property(d):
    p = {k: torch.tensor(v, dtype=DTYPE) for k, v in d.items()}
    back, _ = load_params(dump_params(p))
    assert list(back) == list(p) and all(torch.equal(back[k], p[k]) for k in p)
