"""Small differentiable building blocks on float64 torch tensors.

A parameter set is a plain ``dict[str, torch.Tensor]``; insertion order is the
canonical order for serialization and gradient lists.  Every function here is
functional (parameters in, tensors out) so that inner-loop updates can be
differentiated through.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
KERNEL = 7
DILATIONS = (1, 4, 16, 64, 1)

MAGIC = b"IMND"
FORMAT_VERSION = 1

ParamSet = dict  # dict[str, torch.Tensor]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class FormatError(ValueError):
    pass


def receptive_field(kernel=KERNEL, dilations=DILATIONS):
    return 1 + (kernel - 1) * sum(dilations)


def _glorot(gen, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


def init_mlp(sizes, gen, prefix="", out_scale=1.0):
    """Layers ``{prefix}l{k}.w`` of shape (out, in) and ``{prefix}l{k}.b``."""
    params = {}
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = _glorot(gen, n_in, n_out, (n_out, n_in))
        if k == len(sizes) - 2:
            w = w * out_scale
        params[f"{prefix}l{k}.w"] = w
        params[f"{prefix}l{k}.b"] = torch.zeros(n_out, dtype=DTYPE)
    return params


def init_dilated_cnn(channels, gen, prefix="", kernel=KERNEL, out_scale=1.0):
    """Conv layers ``{prefix}c{k}.w`` of shape (out, in, kernel) and biases.

    ``channels`` lists in/hidden/out widths, one more entry than layers.
    """
    params = {}
    n_layers = len(channels) - 1
    for k in range(n_layers):
        c_in, c_out = channels[k], channels[k + 1]
        w = _glorot(gen, c_in * kernel, c_out * kernel, (c_out, c_in, kernel))
        if k == n_layers - 1:
            w = w * out_scale
        params[f"{prefix}c{k}.w"] = w
        params[f"{prefix}c{k}.b"] = torch.zeros(c_out, dtype=DTYPE)
    return params


def _layer_names(params, prefix, tag):
    k = 0
    names = []
    while f"{prefix}{tag}{k}.w" in params:
        names.append((f"{prefix}{tag}{k}.w", f"{prefix}{tag}{k}.b"))
        k += 1
    if not names:
        raise ShapeError(f"no layers with prefix {prefix!r}")
    return names


def mlp_forward(params, x, prefix="", activation=F.gelu):
    """Apply a dense stack along the last axis of ``x``.

    Hidden layers use ``activation``; the output layer is linear.
    """
    names = _layer_names(params, prefix, "l")
    h = x
    for k, (wn, bn) in enumerate(names):
        w, b = params[wn], params[bn]
        if h.shape[-1] != w.shape[1]:
            raise ShapeError(f"layer {wn}: expects {w.shape[1]} inputs, got {h.shape[-1]}")
        h = h @ w.T + b
        if k < len(names) - 1 and activation is not None:
            h = activation(h)
    return h


def conv1d_layer(x, w, b, dilation):
    """Causal dilated convolution with replicate-first-sample left padding.

    ``x`` is (batch, channels, time).  Tap ``k`` of the kernel reads the input
    ``(K - 1 - k) * dilation`` samples in the past, so the last tap is lag 0
    and the output stays aligned with the input timeline.
    """
    pad = (w.shape[-1] - 1) * dilation
    if pad:
        x = torch.cat([x[..., :1].expand(*x.shape[:-1], pad), x], dim=-1)
    return F.conv1d(x, w, b, dilation=dilation)


def dilated_conv_forward(params, x, prefix="", dilations=DILATIONS, activation=F.gelu):
    """Stacked dilated convolutions over (batch, channels, time) input."""
    names = _layer_names(params, prefix, "c")
    if len(names) != len(dilations):
        raise ShapeError(f"{len(names)} conv layers but {len(dilations)} dilations")
    need = receptive_field(params[names[0][0]].shape[-1], dilations)
    if x.shape[-1] < need:
        raise ShapeError(f"sequence of length {x.shape[-1]} is shorter than the receptive field ({need})")
    h = x
    for k, ((wn, bn), d) in enumerate(zip(names, dilations)):
        w = params[wn]
        if h.shape[-2] != w.shape[1]:
            raise ShapeError(f"layer {wn}: expects {w.shape[1]} channels, got {h.shape[-2]}")
        h = conv1d_layer(h, w, params[bn], d)
        if k < len(names) - 1 and activation is not None:
            h = activation(h)
    return h


def backward(loss, params, create_graph=False):
    """Gradients of a scalar ``loss`` w.r.t. every tensor of ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise ShapeError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is not finite ({loss.item()})")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, create_graph=create_graph)
    out = {}
    for n, t, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        elif not torch.all(torch.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {n}")
        out[n] = g
    return out


def _check_same(params, grads):
    for n, p in params.items():
        if n not in grads or grads[n].shape != p.shape:
            got = None if n not in grads else tuple(grads[n].shape)
            raise ShapeError(f"gradient for {n}: expected {tuple(p.shape)}, got {got}")


def sgd_step(params, grads, lr):
    _check_same(params, grads)
    return {n: p - lr * grads[n] for n, p in params.items()}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update; returns ``(state, params)`` without mutating inputs."""
    _check_same(params, grads)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m, v, new = {}, {}, {}
    for n, p in params.items():
        g = grads[n].detach()
        m[n] = b1 * state.m.get(n, torch.zeros_like(g)) + (1 - b1) * g
        v[n] = b2 * state.v.get(n, torch.zeros_like(g)) + (1 - b2) * g * g
        m_hat = m[n] / (1 - b1**t)
        v_hat = v[n] / (1 - b2**t)
        new[n] = (p.detach() - lr * m_hat / (torch.sqrt(v_hat) + state.eps))
    return AdamState(m, v, t, b1, b2, state.eps), new


def clone(params, requires_grad=False):
    return {n: p.detach().clone().requires_grad_(requires_grad) for n, p in params.items()}


def flatten(params):
    return torch.cat([p.reshape(-1) for p in params.values()]) if params else torch.zeros(0, dtype=DTYPE)


# ---------------------------------------------------------------------------
# binary format
#
#   magic  b"IMND"
#   u32    format version
#   u32    metadata length L, then L bytes of UTF-8 JSON (may be "{}")
#   u32    record count
#   per record:
#     u32 name length, name bytes (UTF-8)
#     u32 ndim, ndim x u32 dims
#     prod(dims) x f64 data, row-major
#   all integers and floats little-endian


def dump_params(params, metadata=None):
    buf = io.BytesIO()
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode()
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8", order="C")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_params(data):
    """Inverse of :func:`dump_params`; returns ``(params, metadata)``."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated parameter file")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic bytes; not an IMND parameter file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        metadata = json.loads(bytes(take(meta_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape)
        params[name] = torch.from_numpy(arr.astype(np.float64))
    if pos != len(view):
        raise FormatError("trailing bytes after last record")
    return params, metadata
