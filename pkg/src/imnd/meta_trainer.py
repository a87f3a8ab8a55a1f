"""Few-shot meta-training of the denoiser and its two baselines.

``fsda_f``  inner SGD on the embedding per task (support), outer Adam on every
           parameter group against the adapted query loss.
``fsda``   same network, plain joint descent on the task loss, no inner loop.
``digdl``  generator-only network trained on the orientation loss alone.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn_core
from .dataset import ImuSequence, window
from .denoiser import (MODES, Architecture, LossConfig, WindowBatch, init_params,
                       normalization_stats, task_loss)

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "mode", "task", "loss_R", "loss_D", "loss_total"]


@dataclass
class TrainConfig:
    mode: str = "fsda_f"
    alpha: float = 1e-3
    beta: float = 1e-4
    inner_steps: int = 3
    task_batch: int = 4
    outer_iters: int = 200
    window: int = 1024
    stride: int = 512
    windows_per_step: int = 64
    seed: int = 0
    first_order: bool = False
    outer_includes_support: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r} (choose from {', '.join(MODES)})")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.task_batch < 1 or self.outer_iters < 0:
            raise ValueError("task_batch must be >= 1 and outer_iters >= 0")
        if self.window < 1 or self.stride < 1 or self.windows_per_step < 1:
            raise ValueError("window, stride and windows_per_step must be positive")


def windows_of(seq, cfg):
    return WindowBatch.from_sequences(list(window(seq, cfg.window, cfg.stride)))


def subsample(batch, k, rng):
    if len(batch) <= k:
        return batch
    idx = np.sort(rng.choice(len(batch), size=k, replace=False))
    return batch.subset(torch.as_tensor(idx))


def _leaves(params):
    return {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# generic MAML machinery over parameter dicts


def inner_loop(params, adapt_keys, loss_fn, alpha, steps, first_order=False):
    """Run ``steps`` SGD steps on the ``adapt_keys`` subset; returns the full adapted dict.

    With ``first_order=False`` the updates stay on the autograd tape so an outer
    gradient can flow through them.
    """
    fast = {k: params[k] for k in adapt_keys}
    for _ in range(steps):
        merged = {**params, **fast}
        grads = nn_core.backward(loss_fn(merged), fast, create_graph=not first_order)
        fast = nn_core.sgd_step(fast, grads, alpha)
    return {**params, **fast}


def maml_gradient(params, adapt_keys, tasks, support_loss, query_loss, alpha, steps, first_order=False):
    """Gradient of sum_i query_loss(i, adapt_i(params)) w.r.t. every entry of ``params``.

    ``support_loss(i, p)`` and ``query_loss(i, p)`` return scalar tensors for
    task ``i``.  Returns ``(grads, per-task query losses)``.
    """
    leaves = _leaves(params)
    total = None
    losses = []
    for i in tasks:
        adapted = inner_loop(leaves, adapt_keys, lambda p, i=i: support_loss(i, p), alpha, steps, first_order)
        lq = query_loss(i, adapted)
        losses.append(lq)
        total = lq if total is None else total + lq
    if total is None:
        raise ValueError("empty task batch")
    return nn_core.backward(total, leaves), losses


# ---------------------------------------------------------------------------
# denoiser-specific steps


def _embedding_keys(params):
    return [k for k in params.groups() if k.startswith("e/")]


def _flat_loss(params, batch, loss_cfg, gen):
    def fn(flat):
        return task_loss(params.with_groups(flat), batch, loss_cfg, gen=gen)[0]
    return fn


def inner_adapt(params, support, loss_cfg, alpha, steps, first_order=True, gen=None):
    """Adapted embedding weights after ``steps`` SGD steps on the support windows.

    Only the embedding moves; the restructor, generator and intrinsic matrix
    are returned untouched.
    """
    flat = params.groups()
    keys = _embedding_keys(params)
    if not keys or steps == 0:
        return dict(params.theta_e)
    if not all(flat[k].requires_grad for k in keys):
        flat = {**flat, **{k: flat[k].detach().clone().requires_grad_(True) for k in keys}}
    adapted = inner_loop(flat, keys, _flat_loss(params, support, loss_cfg, gen), alpha, steps, first_order)
    return {k[2:]: adapted[k] for k in keys}


def meta_gradient(params, tasks, loss_cfg, cfg, noise_seed=0):
    """Outer gradient for a batch of ``(support_batch, query_batch)`` pairs.

    Returns ``(grads, rows)`` with one ``(loss_R, loss_D, total)`` row per task,
    evaluated on the query windows after adaptation.
    """
    keys = _embedding_keys(params)
    rows = []

    def support_loss(i, flat):
        gen = torch.Generator().manual_seed(noise_seed * 7919 + 2 * i)
        return task_loss(params.with_groups(flat), tasks[i][0], loss_cfg, gen=gen)[0]

    def query_loss(i, flat):
        gen = torch.Generator().manual_seed(noise_seed * 7919 + 2 * i + 1)
        p = params.with_groups(flat)
        total, l_r, l_d = task_loss(p, tasks[i][1], loss_cfg, gen=gen)
        if cfg.outer_includes_support:
            total = total + task_loss(p, tasks[i][0], loss_cfg, gen=gen)[0]
        rows.append((l_r.item(), l_d.item(), total.item()))
        return total

    steps = cfg.inner_steps if keys else 0
    grads, _ = maml_gradient(params.groups(), keys, range(len(tasks)), support_loss, query_loss,
                             cfg.alpha, steps, cfg.first_order)
    return grads, rows


def meta_step(params, tasks, loss_cfg, cfg, adam_state=None, noise_seed=0):
    """One outer update; returns ``(params, adam_state, rows)``."""
    if not tasks:
        raise ValueError("empty task batch")
    grads, rows = meta_gradient(params, tasks, loss_cfg, cfg, noise_seed)
    state, flat = nn_core.adam_step(adam_state or nn_core.AdamState(), params.groups(), grads, cfg.beta)
    return params.with_groups(flat), state, rows


def joint_step(params, batches, loss_cfg, cfg, adam_state=None, noise_seed=0):
    """Plain descent on the summed task loss (no inner loop)."""
    leaves = _leaves(params.groups())
    p = params.with_groups(leaves)
    total = None
    rows = []
    for i, batch in enumerate(batches):
        gen = torch.Generator().manual_seed(noise_seed * 7919 + i)
        t, l_r, l_d = task_loss(p, batch, loss_cfg, gen=gen)
        rows.append((l_r.item(), l_d.item(), t.item()))
        total = t if total is None else total + t
    grads = nn_core.backward(total, leaves)
    state, flat = nn_core.adam_step(adam_state or nn_core.AdamState(), params.groups(), grads, cfg.beta)
    return params.with_groups(flat), state, rows


# ---------------------------------------------------------------------------
# training entry points


@dataclass
class TrainResult:
    params: object
    log_rows: list = field(default_factory=list)

    def log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in self.log_rows:
            it, mode, task, l_r, l_d, tot = row
            w.writerow([it, mode, task, repr(l_r), repr(l_d), repr(tot)])
        return buf.getvalue()


def train(cfg, train_tasks, loss_cfg=None, arch=None, progress=None):
    """Train one of the three modes on a list of meta tasks."""
    loss_cfg = loss_cfg or LossConfig()
    if not train_tasks:
        raise ValueError("no training tasks")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    seqs = [s for t in train_tasks for s in (t.support, t.query)]
    mean, std = normalization_stats(seqs)
    params = init_params(mean, std, seed=cfg.seed, arch=arch or Architecture(), mode=cfg.mode)

    sup = [windows_of(t.support, cfg) for t in train_tasks]
    qry = [windows_of(t.query, cfg) for t in train_tasks]
    full = [WindowBatch(torch.cat([s.u, q.u]), torch.cat([s.gt, q.gt]), s.dt) for s, q in zip(sup, qry)]

    result = TrainResult(params)
    state = None
    n_batch = min(cfg.task_batch, len(train_tasks))
    for it in range(cfg.outer_iters):
        chosen = np.sort(rng.choice(len(train_tasks), size=n_batch, replace=False))
        if cfg.mode == "fsda_f":
            batch = [(subsample(sup[i], cfg.windows_per_step, rng), subsample(qry[i], cfg.windows_per_step, rng))
                     for i in chosen]
            params, state, rows = meta_step(params, batch, loss_cfg, cfg, state, noise_seed=cfg.seed * 100003 + it)
        else:
            batch = [subsample(full[i], cfg.windows_per_step, rng) for i in chosen]
            params, state, rows = joint_step(params, batch, loss_cfg, cfg, state, noise_seed=cfg.seed * 100003 + it)
        for i, (l_r, l_d, tot) in zip(chosen, rows):
            result.log_rows.append((it, cfg.mode, train_tasks[i].domain_tag, l_r, l_d, tot))
        if progress is not None:
            progress(it, rows)
    result.params = params
    return result


def few_shot_adapt(params, support, loss_cfg, cfg, seed=0, steps=None):
    """Adapt the embedding to a new domain from a labelled support sequence.

    ``steps`` overrides ``cfg.inner_steps``; zero returns ``params`` unchanged.
    """
    if not isinstance(support, ImuSequence) or not support.has_gt:
        raise ValueError("few-shot adaptation needs a support sequence with ground truth")
    if len(support) < cfg.window:
        raise ValueError(f"support has {len(support)} samples; needs at least {cfg.window}")
    steps = cfg.inner_steps if steps is None else int(steps)
    if not params.uses_embedding or steps == 0:
        return params
    batch = subsample(windows_of(support, cfg), cfg.windows_per_step, np.random.default_rng(seed))
    gen = torch.Generator().manual_seed(int(seed))
    theta = inner_adapt(params, batch, loss_cfg, cfg.alpha, steps, first_order=True, gen=gen)
    return params.with_theta_e({k: v.detach() for k, v in theta.items()})
