"""IMU sequences, on-disk formats and meta-task construction.

Supported layouts:

* EuRoC MAV: ``mav0/imu0/data.csv`` + ``mav0/state_groundtruth_estimate0/data.csv``
* TUM-VI:    ``mav0/imu0/data.csv`` + ``mav0/mocap0/data.csv``
* canonical: one CSV with header ``t_ns,wx,wy,wz,ax,ay,az,qw,qx,qy,qz``
  (quaternion columns empty when a sample has no ground truth)
"""

from __future__ import annotations

import csv
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import so3

log = logging.getLogger(__name__)

CANONICAL_HEADER = ["t_ns", "wx", "wy", "wz", "ax", "ay", "az", "qw", "qx", "qy", "qz"]
GT_GAP_S = 0.5
MIN_OVERLAP_S = 1.0
JITTER_FRACTION = 0.1

EUROC_NAMES = {
    "MH01": "MH_01_easy",
    "MH02": "MH_02_easy",
    "MH03": "MH_03_medium",
    "MH04": "MH_04_difficult",
    "MH05": "MH_05_difficult",
    "V101": "V1_01_easy",
    "V102": "V1_02_medium",
    "V103": "V1_03_difficult",
    "V201": "V2_01_easy",
    "V202": "V2_02_medium",
    "V203": "V2_03_difficult",
}
TUMVI_NAMES = {f"room{k}": f"dataset-room{k}_512_16" for k in range(1, 7)}

DEFAULT_TRAIN = ["MH01", "MH02", "MH03", "MH05", "V102", "V201", "V203", "room1", "room3", "room5"]
DEFAULT_TEST = ["MH04", "V101", "V103", "V202", "room2", "room4", "room6"]


class ParseError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ImuSequence:
    domain_tag: str
    dt: float
    t: np.ndarray  # (N,) int64 ns
    gyro: np.ndarray  # (N, 3) rad/s
    accel: np.ndarray  # (N, 3) m/s^2
    gt_poses: np.ndarray | None = None  # (N, 3, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        n = len(self.t)
        if len(self.gyro) != n or len(self.accel) != n:
            raise ValueError("timestamp, gyro and accel lengths differ")
        if self.gt_poses is not None:
            self.gt_poses = np.asarray(self.gt_poses, dtype=float).reshape(-1, 3, 3)
            if len(self.gt_poses) != n:
                raise ValueError("ground truth is not aligned 1:1 with samples")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    @property
    def duration(self):
        return len(self) * self.dt

    @property
    def has_gt(self):
        return self.gt_poses is not None

    @property
    def u(self):
        """Stacked (N, 6) measurement vector [gyro, accel]."""
        return np.concatenate([self.gyro, self.accel], axis=1)

    def slice(self, start, stop):
        gt = None if self.gt_poses is None else self.gt_poses[start:stop]
        return ImuSequence(self.domain_tag, self.dt, self.t[start:stop], self.gyro[start:stop],
                           self.accel[start:stop], gt)


@dataclass(frozen=True)
class MetaTask:
    domain_tag: str
    support: ImuSequence
    query: ImuSequence

    def __post_init__(self):
        if len(self.support) == 0 or len(self.query) == 0:
            raise ValueError("support and query must be non-empty")
        if not (self.support.has_gt and self.query.has_gt):
            raise ValueError("meta tasks need ground truth on both parts")
        if self.support.t[-1] >= self.query.t[0]:
            raise ValueError("support must precede query")


# ---------------------------------------------------------------------------
# raw CSV readers


def _read_numeric_csv(path, min_cols):
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"missing file: {path}")
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#") or not "".join(row).strip():
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue  # header without comment marker
            if len(row) < min_cols:
                raise ParseError(f"{path}:{lineno}: expected at least {min_cols} columns, got {len(row)}")
            try:
                rows.append([int(row[0])] + [float(x) for x in row[1:min_cols]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: malformed value ({exc})") from exc
    if not rows:
        raise ParseError(f"{path}: no data rows")
    t = np.array([r[0] for r in rows], dtype=np.int64)
    vals = np.array([r[1:] for r in rows], dtype=float)
    return t, vals


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def infer_dt(t_ns):
    if len(t_ns) < 2:
        raise ParseError("need at least two samples to infer the sample period")
    return float(np.median(np.diff(t_ns))) * 1e-9


def regularize(seq):
    """Enforce a uniform grid: keep jitter below 10% of dt, else resample by nearest neighbour."""
    if len(seq) < 2:
        return seq
    step = np.diff(seq.t) * 1e-9
    if np.all(np.abs(step - seq.dt) < JITTER_FRACTION * seq.dt):
        return seq
    dt_ns = int(round(seq.dt * 1e9))
    grid = np.arange(seq.t[0], seq.t[-1] + 1, dt_ns, dtype=np.int64)
    idx = np.searchsorted(seq.t, grid)
    idx = np.clip(idx, 1, len(seq.t) - 1)
    left = seq.t[idx - 1]
    right = seq.t[idx]
    idx = np.where(grid - left <= right - grid, idx - 1, idx)
    gt = None if seq.gt_poses is None else seq.gt_poses[idx]
    return ImuSequence(seq.domain_tag, seq.dt, grid, seq.gyro[idx], seq.accel[idx], gt)


def _truncate_at_gap(t, poses, source):
    gaps = np.nonzero(np.diff(t) * 1e-9 > GT_GAP_S)[0]
    if len(gaps):
        cut = gaps[0] + 1
        warnings.warn(f"{source}: ground-truth gap of {(t[cut] - t[cut - 1]) * 1e-9:.3f} s; "
                      f"truncating at t={t[cut - 1]}", stacklevel=3)
        return t[:cut], poses[:cut]
    return t, poses


def _parse_layout(directory, gt_rel, tag):
    directory = Path(directory)
    t_imu, imu = _read_numeric_csv(directory / "mav0" / "imu0" / "data.csv", 7)
    t_gt, gt = _read_numeric_csv(directory / "mav0" / gt_rel / "data.csv", 8)
    poses = so3.quat_to_matrix(gt[:, 3:7])
    t_gt, poses = _truncate_at_gap(t_gt, poses, directory / "mav0" / gt_rel)
    seq = ImuSequence(tag or directory.name, infer_dt(t_imu), t_imu, imu[:, 0:3], imu[:, 3:6])
    return align_ground_truth(regularize(seq), t_gt, poses)


def parse_euroc(directory, tag=None):
    return _parse_layout(directory, "state_groundtruth_estimate0", tag)


def parse_tumvi(directory, tag=None):
    return _parse_layout(directory, "mocap0", tag)


def align_ground_truth(imu, gt_t, gt_poses):
    """Interpolate a pose track onto the IMU timestamps by slerp.

    Samples outside the ground-truth span are dropped; fewer than 1 s of
    overlap is an error.
    """
    gt_t = np.asarray(gt_t, dtype=np.int64)
    gt_poses = np.asarray(gt_poses, dtype=float)
    lo = max(imu.t[0], gt_t[0])
    hi = min(imu.t[-1], gt_t[-1])
    if (hi - lo) * 1e-9 < MIN_OVERLAP_S:
        raise AlignmentError(f"IMU and ground truth overlap by {(hi - lo) * 1e-9:.3f} s (< {MIN_OVERLAP_S} s)")
    keep = (imu.t >= gt_t[0]) & (imu.t <= gt_t[-1])
    t = imu.t[keep]
    idx = np.clip(np.searchsorted(gt_t, t, side="right") - 1, 0, len(gt_t) - 2)
    t0, t1 = gt_t[idx], gt_t[idx + 1]
    frac = ((t - t0) / (t1 - t0).astype(float))[:, None]
    Ra, Rb = gt_poses[idx], gt_poses[idx + 1]
    rel = so3.log_so3(np.swapaxes(Ra, -1, -2) @ Rb)
    poses = Ra @ so3.exp_so3(frac * rel)
    poses[frac[:, 0] == 0.0] = Ra[frac[:, 0] == 0.0]
    poses[frac[:, 0] == 1.0] = Rb[frac[:, 0] == 1.0]
    return ImuSequence(imu.domain_tag, imu.dt, t, imu.gyro[keep], imu.accel[keep], poses)


# ---------------------------------------------------------------------------
# canonical format


def write_canonical(seq, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quats = None if seq.gt_poses is None else so3.matrix_to_quat(seq.gt_poses)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_HEADER)
        for k in range(len(seq)):
            row = [str(int(seq.t[k]))] + [repr(float(x)) for x in seq.gyro[k]] + [repr(float(x)) for x in seq.accel[k]]
            row += [""] * 4 if quats is None else [repr(float(x)) for x in quats[k]]
            w.writerow(row)


def read_canonical(path, tag=None):
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CANONICAL_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(CANONICAL_HEADER)}")
        t, vals, quats = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CANONICAL_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(CANONICAL_HEADER)} columns, got {len(row)}")
            try:
                t.append(int(row[0]))
                vals.append([float(x) for x in row[1:7]])
                quats.append([float(x) for x in row[7:]] if row[7] else None)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: malformed value ({exc})") from exc
    if not t:
        raise ParseError(f"{path}: no data rows")
    vals = np.array(vals)
    has = [q is not None for q in quats]
    if any(has) and not all(has):
        raise ParseError(f"{path}: ground truth present on some rows only")
    gt = so3.quat_to_matrix(np.array(quats)) if all(has) else None
    t = np.array(t, dtype=np.int64)
    return ImuSequence(tag or path.stem, infer_dt(t), t, vals[:, :3], vals[:, 3:], gt)


# ---------------------------------------------------------------------------
# tasks and windows


def split_meta_task(seq, support_seconds=60.0):
    """Support = first ``support_seconds``, query = the rest."""
    need = support_seconds + 10.0
    if seq.duration <= need:
        raise ValueError(f"sequence {seq.domain_tag!r} lasts {seq.duration:.1f} s; "
                         f"needs more than {need:.1f} s for a {support_seconds:g} s support split")
    n_sup = int(round(support_seconds / seq.dt))
    return MetaTask(seq.domain_tag, seq.slice(0, n_sup), seq.slice(n_sup, len(seq)))


def resolve_sequence(name, data_dir):
    """Locate and load a sequence by short name (``MH01``, ``room4``) or canonical CSV stem."""
    data_dir = Path(data_dir)
    if name in EUROC_NAMES:
        return parse_euroc(data_dir / EUROC_NAMES[name], tag=name)
    if name in TUMVI_NAMES:
        return parse_tumvi(data_dir / TUMVI_NAMES[name], tag=name)
    csv_path = data_dir / f"{name}.csv"
    if csv_path.is_file():
        return read_canonical(csv_path, tag=name)
    raise ConfigError(f"unknown sequence {name!r}: not a EuRoC/TUM-VI name and no {csv_path}")


def make_meta_splits(train_names=None, test_names=None, data_dir=None, support_seconds=60.0,
                     loader=resolve_sequence):
    """Build (train tasks, test tasks); defaults to the EuRoC/TUM-VI split."""
    train_names = list(DEFAULT_TRAIN if train_names is None else train_names)
    test_names = list(DEFAULT_TEST if test_names is None else test_names)
    overlap = sorted(set(train_names) & set(test_names))
    if overlap:
        raise ConfigError(f"sequences in both train and test splits: {', '.join(overlap)}")
    for names in (train_names, test_names):
        if len(set(names)) != len(names):
            raise ConfigError("duplicate sequence names in a split")
    if data_dir is None:
        data_dir = os.environ.get("IMND_DATA_DIR")
    if data_dir is None:
        raise ConfigError("no data directory configured (set data_dir or IMND_DATA_DIR)")

    def build(names):
        return [split_meta_task(loader(n, data_dir), support_seconds) for n in names]

    return build(train_names), build(test_names)


def window(seq, n, stride=None):
    """Yield consecutive length-``n`` slices, ``floor((len - n) / stride) + 1`` of them."""
    stride = n if stride is None else stride
    if n > len(seq):
        raise ValueError(f"window length {n} exceeds sequence length {len(seq)}")
    if n < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    for start in range(0, len(seq) - n + 1, stride):
        yield seq.slice(start, start + n)
