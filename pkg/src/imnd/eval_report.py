"""Orientation RMSE evaluation, report tables and embedding export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import so3
from .dataset import EUROC_NAMES, TUMVI_NAMES
from .denoiser import denoise, embed, normalize
from .meta_trainer import few_shot_adapt

SERIES_HEADER = ["t", "est_roll", "est_pitch", "est_yaw", "gt_roll", "gt_pitch", "gt_yaw",
                 "err_roll", "err_pitch", "err_yaw"]
REPORT_HEADER = ["dataset", "sequence", "mode", "rmse_roll", "rmse_pitch", "rmse_yaw", "duration_s"]
AXES = ("roll", "pitch", "yaw")
MODE_LABELS = {"raw": "RAW", "digdl": "DIGDL", "fsda": "FSDA", "fsda_f": "FSDA-F"}


def dataset_of(tag):
    if tag in EUROC_NAMES:
        return "EuRoC"
    if tag in TUMVI_NAMES:
        return "TUM-VI"
    return "synthetic"


@dataclass
class EvalRow:
    domain_tag: str
    mode: str
    rmse_roll: float
    rmse_pitch: float
    rmse_yaw: float
    duration: float
    dataset: str = ""

    def __post_init__(self):
        if not self.dataset:
            self.dataset = dataset_of(self.domain_tag)

    @property
    def rmse(self):
        return np.array([self.rmse_roll, self.rmse_pitch, self.rmse_yaw])


def wrap_deg(x):
    """Wrap angles to (-180, 180]."""
    y = np.mod(np.asarray(x, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(y == -180.0, 180.0, y)


def rmse_euler(est, gt):
    """Per-axis RMSE in degrees between two pose tracks, angle differences wrapped."""
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"pose tracks differ in shape: {est.shape} vs {gt.shape}")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    err = wrap_deg(so3.rotation_to_euler(est) - so3.rotation_to_euler(gt))
    return np.sqrt(np.mean(err**2, axis=0))


def integrate_from_gt(omegas, gt_poses, dt):
    """Pose track aligned with ``gt_poses`` starting at the first ground-truth pose."""
    r0 = gt_poses[0]
    return np.concatenate([r0[None], so3.integrate_orientation(r0, omegas[:-1], dt)])


def _series(seq, est):
    e = so3.rotation_to_euler(est)
    g = so3.rotation_to_euler(seq.gt_poses)
    t = (seq.t - seq.t[0]) * 1e-9
    return np.column_stack([t, e, g, wrap_deg(e - g)])


def evaluate_rates(seq, omegas, mode):
    """RMSE row and per-sample series for an externally supplied rate sequence."""
    if not seq.has_gt:
        raise ValueError(f"sequence {seq.domain_tag!r} has no ground truth")
    est = integrate_from_gt(np.asarray(omegas), seq.gt_poses, seq.dt)
    r = rmse_euler(est, seq.gt_poses)
    return EvalRow(seq.domain_tag, mode, *map(float, r), seq.duration), _series(seq, est)


def evaluate_raw(task):
    return evaluate_rates(task.query, task.query.gyro, "raw")


def denoise_sequence(params, seq):
    with torch.no_grad():
        return denoise(params, seq.u)[0].numpy()


def evaluate(params, task, adapt=False, loss_cfg=None, train_cfg=None, seed=0):
    """Denoise and integrate the query part of a task; optionally adapt on the support first."""
    if not task.query.has_gt:
        raise ValueError(f"task {task.domain_tag!r}: query has no ground truth")
    label = params.mode
    if adapt:
        if loss_cfg is None or train_cfg is None:
            raise ValueError("adaptation needs loss and training configs")
        params = few_shot_adapt(params, task.support, loss_cfg, train_cfg, seed=seed)
        label = "fsda_f"
    elif params.mode == "fsda_f":
        label = "fsda_f_noadapt"
    return evaluate_rates(task.query, denoise_sequence(params, task.query), label)


def mean_rmse(rows):
    return float(np.mean([r.rmse for r in rows]))


# ---------------------------------------------------------------------------
# tables


def _fmt(x):
    return f"{x:.4f}"


def _validate(rows):
    if not rows:
        raise ValueError("report needs at least one row")
    for r in rows:
        for ax in AXES:
            v = getattr(r, f"rmse_{ax}")
            if v is None or not np.isfinite(v) or v < 0:
                raise ValueError(f"row {r.domain_tag}/{r.mode}: invalid {ax} RMSE {v!r}")


def report_csv(rows):
    _validate(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r.dataset, r.domain_tag, r.mode, _fmt(r.rmse_roll), _fmt(r.rmse_pitch),
                    _fmt(r.rmse_yaw), f"{r.duration:.3f}"])
    return buf.getvalue()


def dataset_means(rows):
    """Arithmetic mean RMSE per (dataset, mode) as {(dataset, mode): array of 3}."""
    groups = {}
    for r in rows:
        groups.setdefault((r.dataset, r.mode), []).append(r.rmse)
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


def report_table(rows):
    """Text table (dataset x sequence rows, axis x mode columns) and the CSV form.

    Each dataset block ends with a ``mean`` row over its sequences.
    """
    _validate(rows)
    modes = list(dict.fromkeys(r.mode for r in rows))
    keys = list(dict.fromkeys((r.dataset, r.domain_tag) for r in rows))
    cell = {(r.dataset, r.domain_tag, r.mode): r.rmse for r in rows}
    means = dataset_means(rows)
    labels = [MODE_LABELS.get(m, m) for m in modes]
    head1 = ["Dataset", "Sequence"] + [ax.capitalize() for ax in AXES for _ in modes]
    head2 = ["", ""] + labels * len(AXES)
    body = []
    datasets = list(dict.fromkeys(ds for ds, _ in keys))
    for ds in datasets:
        block = [(ds, seq, lambda m, ds=ds, seq=seq: cell.get((ds, seq, m))) for d, seq in keys if d == ds]
        block.append((ds, "mean", lambda m, ds=ds: means.get((ds, m))))
        for name, seq, lookup in block:
            line = [name, seq]
            for k in range(len(AXES)):
                for m in modes:
                    v = lookup(m)
                    line.append("-" if v is None else _fmt(v[k]))
            body.append(line)
    table = [head1, head2] + body
    widths = [max(len(row[k]) for row in table) for k in range(len(head1))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)
    return text + "\n", report_csv(rows)


def series_csv(series):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_HEADER)
    for row in series:
        w.writerow([f"{x:.6f}" for x in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# embeddings


TSNE_NOTE = "# per-timestep embeddings for an external t-SNE projection (perplexity=10, steps=1000)"


def embedding_points(params, sequences, max_points=2000, seed=0, raw=False):
    """Sampled ``(tags, t_ns, features)``; ``raw=True`` returns normalized measurements instead."""
    tags = [s.domain_tag for s in sequences]
    if len(set(tags)) < 2:
        raise ValueError("embedding export needs sequences from at least two domains")
    if not raw and not params.uses_embedding:
        raise ValueError(f"mode {params.mode!r} has no embedding module")
    rng = np.random.default_rng(seed)
    out_tags, out_t, feats = [], [], []
    for seq in sequences:
        idx = np.arange(len(seq))
        if len(idx) > max_points:
            idx = np.sort(rng.choice(len(idx), size=max_points, replace=False))
        with torch.no_grad():
            z = normalize(params, seq.u)
            if not raw:
                z = embed(params.theta_e, z).transpose(1, 2)
        feats.append(z[0].numpy()[idx])
        out_t.append(seq.t[idx])
        out_tags += [seq.domain_tag] * len(idx)
    return out_tags, np.concatenate(out_t), np.concatenate(feats)


def export_embeddings(params, sequences, path, max_points=2000, seed=0):
    tags, t, z = embedding_points(params, sequences, max_points, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(TSNE_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain_tag", "t_ns"] + [f"e_{k + 1}" for k in range(z.shape[1])])
        for tag, ts, row in zip(tags, t, z):
            w.writerow([tag, int(ts)] + [repr(float(x)) for x in row])
    return path


def read_embeddings(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    next(reader)
    tags, feats = [], []
    for row in reader:
        tags.append(row[0])
        feats.append([float(x) for x in row[2:]])
    return tags, np.array(feats)


def linear_probe_accuracy(tags, feats, seed=0, test_fraction=0.3):
    """Held-out accuracy of a multinomial logistic-regression domain classifier."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.preprocessing import StandardScaler

    X_tr, X_te, y_tr, y_te = train_test_split(np.asarray(feats), np.asarray(tags), test_size=test_fraction,
                                              random_state=seed, stratify=np.asarray(tags))
    scaler = StandardScaler().fit(X_tr)
    clf = LogisticRegression(max_iter=2000).fit(scaler.transform(X_tr), y_tr)
    return float(clf.score(scaler.transform(X_te), y_te))
