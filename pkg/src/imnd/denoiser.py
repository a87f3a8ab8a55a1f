"""Embedding / Restructor / Generator denoiser and its training losses.

Data flow for one window of raw measurements ``u = [w_imu, a_imu]``::

    u --normalize--> MLP (per sample) --> embedding (d x T)
        embedding + noise --> Restructor CNN --> reconstructed u      (L^R)
        embedding --------> Generator CNN ---> w'  ;  w_hat = C_hat w_imu + w'   (L^D)

The ``digdl`` baseline drops the embedding and restructor and feeds the
normalized measurements straight into the generator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import nn_core
from .nn_core import DTYPE, ShapeError

MODES = ("fsda_f", "fsda", "digdl")


@dataclass
class LossConfig:
    gamma: float = 0.1
    j_set: tuple = (16, 32)
    huber_delta: float = 0.005
    recon_noise_std: float = 0.1

    def __post_init__(self):
        self.j_set = tuple(int(j) for j in self.j_set)
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not self.j_set or min(self.j_set) < 1:
            raise ValueError("j_set needs strides >= 1")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.recon_noise_std < 0:
            raise ValueError("recon_noise_std must be non-negative")


@dataclass
class Architecture:
    d_embed: int = 32
    embed_hidden: tuple = (64, 64)
    conv_hidden: int = 16
    bias_scale: float = 0.01  # rad/s per unit of generator output

    def __post_init__(self):
        self.embed_hidden = tuple(int(h) for h in self.embed_hidden)


@dataclass
class DenoiserParams:
    theta_e: dict
    theta_r: dict
    theta_g: dict
    c_hat: torch.Tensor
    norm_mean: torch.Tensor
    norm_std: torch.Tensor
    arch: Architecture = field(default_factory=Architecture)
    mode: str = "fsda_f"

    @property
    def uses_embedding(self):
        return self.mode != "digdl"

    def groups(self):
        """Trainable tensors keyed ``e/...``, ``r/...``, ``g/...``, ``c_hat``."""
        out = {f"e/{k}": v for k, v in self.theta_e.items()}
        out.update({f"r/{k}": v for k, v in self.theta_r.items()})
        out.update({f"g/{k}": v for k, v in self.theta_g.items()})
        out["c_hat"] = self.c_hat
        return out

    def with_groups(self, flat):
        pick = lambda p: {k[2:]: v for k, v in flat.items() if k.startswith(p)}
        return DenoiserParams(pick("e/"), pick("r/"), pick("g/"), flat["c_hat"],
                              self.norm_mean, self.norm_std, self.arch, self.mode)

    def with_theta_e(self, theta_e):
        return DenoiserParams(theta_e, self.theta_r, self.theta_g, self.c_hat,
                              self.norm_mean, self.norm_std, self.arch, self.mode)

    def detached(self):
        return self.with_groups(nn_core.clone(self.groups()))


def init_params(norm_mean, norm_std, seed=0, arch=None, mode="fsda_f"):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    arch = arch or Architecture()
    gen = torch.Generator().manual_seed(int(seed))
    h = arch.conv_hidden
    if mode == "digdl":
        theta_e, theta_r = {}, {}
        g_in = 6
    else:
        theta_e = nn_core.init_mlp((6, *arch.embed_hidden, arch.d_embed), gen)
        theta_r = nn_core.init_dilated_cnn((arch.d_embed, h, h, h, h, 6), gen)
        g_in = arch.d_embed
    theta_g = nn_core.init_dilated_cnn((g_in, h, h, h, h, 3), gen, out_scale=0.1)
    return DenoiserParams(theta_e, theta_r, theta_g, torch.eye(3, dtype=DTYPE),
                          torch.as_tensor(np.asarray(norm_mean), dtype=DTYPE),
                          torch.as_tensor(np.asarray(norm_std), dtype=DTYPE), arch, mode)


def normalization_stats(sequences):
    """Per-channel mean and std of [gyro, accel] over a list of sequences."""
    u = np.concatenate([s.u for s in sequences], axis=0)
    std = u.std(axis=0)
    return u.mean(axis=0), np.where(std > 1e-12, std, 1.0)


# ---------------------------------------------------------------------------
# batches


@dataclass
class WindowBatch:
    """Equal-length windows stacked as tensors: ``u`` (B, T, 6), ``gt`` (B, T, 3, 3)."""

    u: torch.Tensor
    gt: torch.Tensor | None
    dt: float

    @classmethod
    def from_sequences(cls, seqs):
        if not seqs:
            raise ValueError("empty window batch")
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise ValueError("windows in a batch must share one length")
        u = torch.as_tensor(np.stack([s.u for s in seqs]), dtype=DTYPE)
        gt = None
        if all(s.has_gt for s in seqs):
            gt = torch.as_tensor(np.stack([s.gt_poses for s in seqs]), dtype=DTYPE)
        return cls(u, gt, seqs[0].dt)

    def __len__(self):
        return self.u.shape[0]

    def subset(self, idx):
        return WindowBatch(self.u[idx], None if self.gt is None else self.gt[idx], self.dt)


def _as_batch(u):
    u = torch.as_tensor(u, dtype=DTYPE)
    return u if u.dim() == 3 else u.unsqueeze(0)


# ---------------------------------------------------------------------------
# forward paths


def normalize(params, u):
    return (_as_batch(u) - params.norm_mean) / params.norm_std


def embed(theta_e, u_norm):
    """Per-sample MLP; (B, T, 6) normalized input to (B, d_embed, T)."""
    u_norm = _as_batch(u_norm)
    if u_norm.shape[1] == 0:
        raise ShapeError("empty window")
    return nn_core.mlp_forward(theta_e, u_norm).transpose(1, 2)


def _features(params, u_norm, theta_e=None):
    if not params.uses_embedding:
        return u_norm.transpose(1, 2)
    return embed(params.theta_e if theta_e is None else theta_e, u_norm)


def reconstruct_normalized(params, u_norm, noise_std, gen=None, theta_e=None):
    """Restructor output in normalized units, (B, T, 6)."""
    z = _features(params, u_norm, theta_e)
    if noise_std > 0:
        z = z + noise_std * torch.randn(z.shape, generator=gen, dtype=DTYPE)
    return nn_core.dilated_conv_forward(params.theta_r, z).transpose(1, 2)


def reconstruct(params, u, noise_std, seed=0):
    """Denormalized reconstruction ``(w_rec, a_rec)`` of raw measurements."""
    gen = torch.Generator().manual_seed(int(seed))
    rec = reconstruct_normalized(params, normalize(params, u), noise_std, gen)
    rec = rec * params.norm_std + params.norm_mean
    return rec[..., :3], rec[..., 3:]


def gyro_bias(params, u_norm, theta_e=None):
    """Generator output w' in rad/s, (B, T, 3)."""
    z = _features(params, u_norm, theta_e)
    return params.arch.bias_scale * nn_core.dilated_conv_forward(params.theta_g, z).transpose(1, 2)


def denoise(params, u, theta_e=None):
    """Corrected angular velocity c_hat @ w_imu + w' for (B, T, 6) or (T, 6) raw input."""
    u = _as_batch(u)
    w_imu = u[..., :3]
    return w_imu @ params.c_hat.T + gyro_bias(params, normalize(params, u), theta_e)


# ---------------------------------------------------------------------------
# losses


def recon_loss(rec, src):
    rec = torch.as_tensor(rec, dtype=DTYPE)
    src = torch.as_tensor(src, dtype=DTYPE)
    if rec.shape != src.shape:
        raise ShapeError(f"reconstruction shape {tuple(rec.shape)} != source shape {tuple(src.shape)}")
    return torch.mean((rec - src) ** 2)


def _hat(v):
    z = torch.zeros_like(v[..., 0])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([z, -w, y], -1),
        torch.stack([w, z, -x], -1),
        torch.stack([-y, x, z], -1),
    ], -2)


def exp_so3_t(v):
    """Differentiable batched exponential map; Taylor terms below 1e-3 rad."""
    theta2 = (v * v).sum(-1)
    small = theta2 < 1e-6
    t2 = torch.where(small, torch.ones_like(theta2), theta2)
    t = torch.sqrt(t2)
    a = torch.where(small, 1 - theta2 / 6 + theta2**2 / 120, torch.sin(t) / t)
    b = torch.where(small, 0.5 - theta2 / 24 + theta2**2 / 720, (1 - torch.cos(t)) / t2)
    K = _hat(v)
    eye = torch.eye(3, dtype=v.dtype).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3_t(R):
    """Differentiable batched logarithm, accurate for angles well below pi."""
    w = 0.5 * torch.stack([R[..., 2, 1] - R[..., 1, 2],
                           R[..., 0, 2] - R[..., 2, 0],
                           R[..., 1, 0] - R[..., 0, 1]], -1)
    s2 = (w * w).sum(-1)
    c = 0.5 * (R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1)
    small = s2 < 1e-6
    s2_safe = torch.where(small, torch.ones_like(s2), s2)
    s = torch.sqrt(s2_safe)
    factor = torch.where(small, 1 + s2 / 6 + 3 * s2**2 / 40, torch.atan2(s, c) / s)
    return w * factor[..., None]


def sliding_products(P, j):
    """Ordered products P[i] P[i+1] ... P[i+j-1] for every start i, by doubling.

    ``P`` is (B, T, 3, 3); the result is (B, T - j + 1, 3, 3).
    """
    T = P.shape[1]
    if j > T:
        raise ShapeError(f"stride {j} exceeds sequence length {T}")
    powers = [P]
    while 2 ** len(powers) <= j:
        prev = powers[-1]
        half = 2 ** (len(powers) - 1)
        powers.append(prev[:, :-half] @ prev[:, half:])
    n_out = T - j + 1
    acc, offset = None, 0
    for k in reversed(range(len(powers))):
        if j & (1 << k):
            block = powers[k][:, offset: offset + n_out]
            acc = block if acc is None else acc @ block
            offset += 1 << k
    return acc


def huber(r, delta):
    a = r.abs()
    return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def orientation_loss(omega_hat, gt_poses, dt, cfg, reduce=True):
    """Huber loss on log(dR_gt dR_hat^T) over every stride in ``cfg.j_set``, summed.

    ``omega_hat`` is (B, T, 3) rad/s and ``gt_poses`` (B, T, 3, 3).  With
    ``reduce=False`` the per-stride residual tensors are returned instead.
    """
    omega_hat = _as_batch(omega_hat)
    gt = torch.as_tensor(gt_poses, dtype=DTYPE)
    if gt.dim() == 3:
        gt = gt.unsqueeze(0)
    T = omega_hat.shape[1]
    if gt.shape[:2] != omega_hat.shape[:2]:
        raise ShapeError("estimated rates and ground truth are not aligned")
    if T <= max(cfg.j_set):
        raise ShapeError(f"need more than {max(cfg.j_set)} samples, got {T}")
    P = exp_so3_t(omega_hat * dt)
    residuals = []
    for j in cfg.j_set:
        d_hat = sliding_products(P[:, : T - 1], j)  # uses rates i..i+j-1 for i+j <= T-1
        d_gt = gt[:, : T - j].transpose(-1, -2) @ gt[:, j:]
        residuals.append(log_so3_t(d_gt @ d_hat.transpose(-1, -2)))
    if not reduce:
        return residuals
    return sum(huber(r, cfg.huber_delta).mean() for r in residuals)


def task_loss(params, batch, cfg, theta_e=None, gen=None):
    """L^R + gamma L^D averaged over the batch; returns ``(total, L^R, L^D)``.

    The digdl mode has no reconstruction branch, so its total is gamma L^D.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.gt is None:
        raise ValueError("task loss needs ground-truth poses")
    u_norm = normalize(params, batch.u)
    omega_hat = batch.u[..., :3] @ params.c_hat.T + gyro_bias(params, u_norm, theta_e)
    l_d = orientation_loss(omega_hat, batch.gt, batch.dt, cfg)
    if params.uses_embedding:
        rec = reconstruct_normalized(params, u_norm, cfg.recon_noise_std, gen, theta_e)
        l_r = recon_loss(rec, u_norm)
    else:
        l_r = torch.zeros((), dtype=DTYPE)
    return l_r + cfg.gamma * l_d, l_r, l_d


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path, loss_cfg=None, extra=None):
    meta = {
        "kind": "denoiser",
        "mode": params.mode,
        "arch": asdict(params.arch),
        "loss": asdict(loss_cfg or LossConfig()),
    }
    meta.update(extra or {})
    tensors = params.groups()
    tensors["norm_mean"] = params.norm_mean
    tensors["norm_std"] = params.norm_std
    data = nn_core.dump_params(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    """Returns ``(params, loss_cfg, metadata)``."""
    with open(path, "rb") as fh:
        tensors, meta = nn_core.load_params(fh.read())
    if meta.get("kind") != "denoiser":
        raise nn_core.FormatError("file is not a denoiser checkpoint")
    for key in ("c_hat", "norm_mean", "norm_std"):
        if key not in tensors:
            raise nn_core.FormatError(f"checkpoint lacks {key}")
    base = DenoiserParams({}, {}, {}, tensors["c_hat"], tensors["norm_mean"], tensors["norm_std"],
                          Architecture(**meta["arch"]), meta["mode"])
    params = base.with_groups({k: v for k, v in tensors.items() if k not in ("norm_mean", "norm_std")})
    return params, LossConfig(**meta["loss"]), meta
