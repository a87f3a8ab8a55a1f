"""Rotation-group primitives on 3x3 matrices.

All functions accept a single rotation vector of shape ``(3,)`` / matrix of
shape ``(3, 3)`` or a stack of them (leading batch dimensions).  Angular
velocities are paired with a sample period ``dt``; sample ``k`` of a velocity
sequence drives pose ``k`` to pose ``k + 1``.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-6
REORTHO_EVERY = 512


class InvalidRotation(ValueError):
    pass


def hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(v):
    """Rotation vector(s) to rotation matrix (Rodrigues with a Taylor branch)."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise InvalidRotation(f"expected trailing dimension 3, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidRotation("rotation vector has non-finite components")
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _check_rotation(R, tol):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise InvalidRotation(f"expected (..., 3, 3) matrices, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidRotation("rotation matrix has non-finite entries")
    resid = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(3), axis=(-2, -1))
    det = np.linalg.det(R)
    if np.any(resid > tol) or np.any(np.abs(det - 1.0) > tol):
        raise InvalidRotation(
            f"matrix is not a rotation (orthonormality residual {np.max(resid):.3g}, "
            f"det {np.min(det):.6f})"
        )
    return R


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = np.trace(R, axis1=1, axis2=2)
    # pick the largest diagonal term of 4 q q^T for conditioning
    cand = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    idx = np.argmax(cand, axis=1)
    for k in range(R.shape[0]):
        m = R[k]
        i = idx[k]
        if i == 0:
            s = 2.0 * np.sqrt(max(1.0 + tr[k], 0.0))
            q[k] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif i == 1:
            s = 2.0 * np.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
            q[k] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif i == 2:
            s = 2.0 * np.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 0.0))
            q[k] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 0.0))
            q[k] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(batch + (4,))


def quat_to_matrix(q):
    """Quaternion(s) (w, x, y, z) to rotation matrix; input need not be unit norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(q)):
        raise InvalidRotation("degenerate quaternion")
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def _log_from_quat(q):
    w = q[..., 0]
    xyz = q[..., 1:]
    s = np.linalg.norm(xyz, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    safe = np.where(s > 0, s, 1.0)
    return xyz * np.where(s > 0, angle / safe, 2.0)[..., None]


def log_so3(R, tol=ORTHO_TOL):
    """Rotation matrix to rotation vector with norm in [0, pi].

    The trace formula is used away from pi; near pi the axis is taken from a
    quaternion extraction, which stays well conditioned there.
    """
    R = _check_rotation(R, tol)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    w = vee(R - np.swapaxes(R, -1, -2)) / 2.0  # sin(theta) * axis
    sin = np.linalg.norm(w, axis=-1)
    theta = np.arctan2(sin, cos)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, sin)
    factor = np.where(small, 1.0 + theta * theta / 6.0, theta / safe)
    out = w * factor[..., None]
    near_pi = cos < -0.99
    if np.any(near_pi):
        out = np.array(out)
        out[near_pi] = _log_from_quat(matrix_to_quat(R[near_pi]))
    return out


def project_to_so3(R):
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(np.shape(R)[:-2] + (3,))
    D[..., 2] = d
    return (U * D[..., None, :]) @ Vt


def integrate_orientation(r0, omegas, dt):
    """Chain per-sample increments: out[n] = out[n - 1] @ exp(omegas[n] * dt), out[-1] = r0.

    Returns an array shaped like ``(len(omegas), 3, 3)``.  The running product is
    re-projected onto SO(3) every ``REORTHO_EVERY`` steps to bound drift.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    omegas = np.asarray(omegas, dtype=float).reshape(-1, 3)
    r0 = np.asarray(r0, dtype=float)
    out = np.empty((len(omegas), 3, 3))
    if len(omegas) == 0:
        return out
    incs = exp_so3(omegas * dt)
    R = r0
    for n in range(len(omegas)):
        R = R @ incs[n]
        if (n + 1) % REORTHO_EVERY == 0:
            R = project_to_so3(R)
        out[n] = R
    return out


def relative_rotation(seq, i, j):
    """Increment R_i^T R_{i+j} between two samples of a pose sequence."""
    n = len(seq)
    if j < 1 or i < 0 or i + j >= n:
        raise IndexError(f"relative_rotation({i}, {j}) out of range for {n} poses")
    return np.asarray(seq[i]).T @ np.asarray(seq[i + j])


def euler_to_rotation(roll, pitch, yaw):
    """Compose R = Rz(yaw) Ry(pitch) Rx(roll); angles in radians."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(np.shape(roll) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def rotation_to_euler(R, return_flag=False):
    """Intrinsic ZYX angles (roll, pitch, yaw) in degrees.

    Within 1e-6 rad of |pitch| = 90 deg the decomposition is degenerate: yaw is
    pinned to zero and roll absorbs the remaining rotation.  With
    ``return_flag=True`` a boolean gimbal-lock mask is returned as well.
    """
    R = np.asarray(R, dtype=float)
    sp = np.clip(-R[..., 2, 0], -1.0, 1.0)
    pitch = np.arcsin(sp)
    locked = np.abs(np.abs(pitch) - np.pi / 2) < 1e-6
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    if np.any(locked):
        # R = Rz(0) Ry(+-90) Rx(roll'):  R[0,1] = sp*sin(roll'), R[1,1] = cos(roll')
        lock_roll = np.arctan2(sp * R[..., 0, 1], R[..., 1, 1])
        roll = np.where(locked, lock_roll, roll)
        yaw = np.where(locked, 0.0, yaw)
        pitch = np.where(locked, np.sign(sp) * np.pi / 2, pitch)
    angles = np.degrees(np.stack([roll, pitch, yaw], axis=-1))
    if return_flag:
        return angles, locked
    return angles


def gt_angular_velocity(gts, dt):
    """Body-frame angular velocity between consecutive poses, log(R_k^T R_{k+1}) / dt."""
    gts = np.asarray(gts, dtype=float)
    if len(gts) < 2:
        raise ValueError("need at least two poses")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    rel = np.swapaxes(gts[:-1], -1, -2) @ gts[1:]
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    if np.any(cos <= -1.0 + 1e-12):
        raise ValueError("consecutive poses differ by a half turn or more; rate is aliased")
    return log_so3(rel) / dt
