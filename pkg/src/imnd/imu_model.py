"""IMU corruption model and a seeded multi-domain motion simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .dataset import ConfigError, ImuSequence

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class CalibrationParams:
    S_w: np.ndarray = field(default_factory=lambda: np.eye(3))
    M_w: np.ndarray = field(default_factory=lambda: np.eye(3))
    S_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    M_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    A: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(6))
    eta_std: np.ndarray = field(default_factory=lambda: np.zeros(6))
    bias_walk_std: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        for name in ("S_w", "M_w", "S_a", "M_a", "A"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3, 3))
        for name in ("b", "eta_std", "bias_walk_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(6))
        for name in ("S_w", "S_a"):
            S = getattr(self, name)
            if np.any(S != np.diag(np.diag(S))) or np.any(np.diag(S) <= 0):
                raise ValueError(f"{name} must be diagonal with positive entries")
        for name in ("M_w", "M_a"):
            M = getattr(self, name)
            if np.any(np.diag(M) != 1.0) or np.any(np.triu(M, 1) != 0):
                raise ValueError(f"{name} must be lower unitriangular")
        if np.any(self.eta_std < 0) or np.any(self.bias_walk_std < 0):
            raise ValueError("noise standard deviations must be non-negative")

    @property
    def C(self):
        C = np.zeros((6, 6))
        C[:3, :3] = self.S_w @ self.M_w
        C[:3, 3:] = self.A
        C[3:, 3:] = self.S_a @ self.M_a
        return C


@dataclass
class SynthTrajectory:
    """Clean motion; ``poses`` and ``velocities`` have one more entry than the rates.

    Sample ``n`` (rate ``omegas[n]``, specific force ``accels[n]``) covers the
    interval from pose ``n`` to pose ``n + 1``.
    """

    dt: float
    poses: np.ndarray  # (N + 1, 3, 3)
    omegas: np.ndarray  # (N, 3) body rad/s
    velocities: np.ndarray  # (N + 1, 3) world m/s
    accels: np.ndarray  # (N, 3) body m/s^2
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    calibration: CalibrationParams | None = None  # set by the simulator
    envelope: np.ndarray | None = None  # per-axis bound on |omega|, set by the simulator

    def __len__(self):
        return len(self.omegas)


def body_accels(poses, velocities, dt, gravity=GRAVITY):
    """a_n = R_{n-1}^T ((v_n - v_{n-1}) / dt - g) for n = 1..N."""
    dv = (velocities[1:] - velocities[:-1]) / dt - gravity
    return np.einsum("nji,nj->ni", poses[:-1], dv)


def corrupt(traj, cal, seed, domain_tag="synthetic", t0_ns=0):
    """Apply u_n = C [w_n; a_n] + b_n + eta_n; b_n is the static bias plus a random walk."""
    rng = np.random.default_rng(seed)
    n = len(traj)
    clean = np.concatenate([traj.omegas, traj.accels], axis=1)
    walk = np.cumsum(rng.standard_normal((n, 6)) * cal.bias_walk_std, axis=0)
    noise = rng.standard_normal((n, 6)) * cal.eta_std
    u = clean @ cal.C.T + cal.b + walk + noise
    dt_ns = int(round(traj.dt * 1e9))
    t = t0_ns + dt_ns * np.arange(n, dtype=np.int64)
    return ImuSequence(domain_tag, traj.dt, t, u[:, :3], u[:, 3:], traj.poses[:n].copy())


def apply_intrinsics(c_hat, omega_imu, bias_est):
    """Corrected rate c_hat @ w_imu + w' for one sample or a stack of samples."""
    omega_imu = np.asarray(omega_imu, dtype=float)
    return omega_imu @ np.asarray(c_hat, dtype=float).T + np.asarray(bias_est, dtype=float)


# ---------------------------------------------------------------------------
# simulator

PROFILES = {
    # per-axis (roll, pitch, yaw) amplitude ranges in rad/s and frequency range in Hz
    "handheld": dict(amp=((0.2, 0.6), (0.2, 0.6), (0.3, 0.9)), freq=(0.05, 1.2),
                     pos_amp=(0.2, 1.0), pos_freq=(0.05, 0.4)),
    "wheeled": dict(amp=((0.0, 0.04), (0.0, 0.04), (0.2, 0.6)), freq=(0.02, 0.3),
                    pos_amp=(1.0, 4.0), pos_freq=(0.01, 0.1), tilt_ratio=0.2),
    "legged": dict(amp=((0.1, 0.3), (0.1, 0.3), (0.1, 0.4)), freq=(0.05, 0.5),
                   gait_amp=(0.1, 0.3), gait_freq=(1.5, 2.5),
                   pos_amp=(0.5, 2.0), pos_freq=(0.02, 0.2)),
}
N_SINES = 4

DEFAULT_RANGES = {
    "gyro_scale": (0.99, 1.01),
    "gyro_misalign": (-0.005, 0.005),
    "accel_scale": (0.98, 1.02),
    "accel_misalign": (-0.01, 0.01),
    "g_sensitivity": (0.0, 0.0),
    "gyro_bias": (-0.005, 0.005),
    "accel_bias": (-0.1, 0.1),
    "gyro_noise": (0.001, 0.003),
    "accel_noise": (0.01, 0.03),
    "gyro_walk": (0.0, 1e-5),
    "accel_walk": (0.0, 1e-4),
}


@dataclass
class DomainSpec:
    name: str
    profile: str = "handheld"
    duration: float = 90.0
    rate: float = 200.0
    seed: int = 0
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"domain {self.name!r}: unknown motion profile {self.profile!r} "
                              f"(choose from {', '.join(PROFILES)})")
        if self.rate < 50:
            raise ConfigError(f"domain {self.name!r}: rate {self.rate} Hz is below 50 Hz")
        if self.duration < 10:
            raise ConfigError(f"domain {self.name!r}: duration {self.duration} s is below 10 s")
        unknown = set(self.ranges) - set(DEFAULT_RANGES)
        if unknown:
            raise ConfigError(f"domain {self.name!r}: unknown calibration ranges {sorted(unknown)}")
        for key, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise ConfigError(f"domain {self.name!r}: range {key} has low > high")

    def range(self, key):
        return tuple(self.ranges.get(key, DEFAULT_RANGES[key]))


def _sines(rng, n_axes, amp_ranges, freq_range, n_sines=N_SINES):
    """Random sum-of-sinusoid coefficients; amplitude per axis is split across terms."""
    amps = np.empty((n_axes, n_sines))
    for k in range(n_axes):
        total = rng.uniform(*amp_ranges[k])
        w = rng.dirichlet(np.ones(n_sines))
        amps[k] = total * w
    freqs = rng.uniform(*freq_range, size=(n_axes, n_sines))
    phases = rng.uniform(0, 2 * np.pi, size=(n_axes, n_sines))
    return amps, freqs, phases


def _eval_sines(t, amps, freqs, phases):
    arg = 2 * np.pi * freqs[None] * t[:, None, None] + phases[None]
    return np.sum(amps[None] * np.sin(arg), axis=-1)


def _eval_sines_dt(t, amps, freqs, phases):
    arg = 2 * np.pi * freqs[None] * t[:, None, None] + phases[None]
    return np.sum(amps[None] * 2 * np.pi * freqs[None] * np.cos(arg), axis=-1)


def motion(profile, n, dt, rng):
    """Body rates (n, 3), world velocities (n + 1, 3) and the per-axis rate envelope."""
    p = PROFILES[profile]
    t = np.arange(n) * dt
    amps, freqs, phases = _sines(rng, 3, p["amp"], p["freq"])
    if profile == "wheeled":
        # keep the summed tilt-rate amplitude inside ratio * yaw amplitude
        yaw_amp = amps[2].sum()
        tilt = amps[:2].sum(axis=1)
        cap = p["tilt_ratio"] * yaw_amp / np.sqrt(2)
        scale = np.where(tilt > cap, cap / np.maximum(tilt, 1e-300), 1.0)
        amps[:2] *= scale[:, None]
    omegas = _eval_sines(t, amps, freqs, phases)
    envelope = amps.sum(axis=1)
    if profile == "legged":
        gait_f = rng.uniform(*p["gait_freq"])
        for k in range(2):
            a = rng.uniform(*p["gait_amp"])
            omegas[:, k] += a * np.sin(2 * np.pi * gait_f * t + rng.uniform(0, 2 * np.pi))
            envelope[k] += a
    pamps, pfreqs, pphases = _sines(rng, 3, [p["pos_amp"]] * 3, p["pos_freq"])
    tv = np.arange(n + 1) * dt
    velocities = _eval_sines_dt(tv, pamps, pfreqs, pphases)
    return omegas, velocities, envelope


def draw_calibration(spec, rng):
    def u(key, size=None):
        return rng.uniform(*spec.range(key), size=size)

    S_w = np.diag(u("gyro_scale", 3))
    M_w = np.eye(3) + np.tril(u("gyro_misalign", (3, 3)), -1)
    S_a = np.diag(u("accel_scale", 3))
    M_a = np.eye(3) + np.tril(u("accel_misalign", (3, 3)), -1)
    A = u("g_sensitivity", (3, 3))
    b = np.concatenate([u("gyro_bias", 3), u("accel_bias", 3)])
    eta = np.concatenate([np.full(3, u("gyro_noise")), np.full(3, u("accel_noise"))])
    walk = np.concatenate([np.full(3, u("gyro_walk")), np.full(3, u("accel_walk"))])
    return CalibrationParams(S_w, M_w, S_a, M_a, A, b, eta, walk)


def synth_domain(spec, seed=None, r0=None):
    """Generate clean motion and its corrupted IMU stream for one domain.

    Returns ``(trajectory, sequence)``; the drawn calibration is kept on
    ``trajectory.calibration``.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dt = 1.0 / spec.rate
    n = int(round(spec.duration * spec.rate))
    omegas, velocities, envelope = motion(spec.profile, n, dt, rng)
    if r0 is None:
        r0 = so3.exp_so3(rng.normal(scale=0.1, size=3) * np.array([1.0, 1.0, 10.0]))
    poses = np.concatenate([r0[None], so3.integrate_orientation(r0, omegas, dt)])
    accels = body_accels(poses, velocities, dt)
    cal = draw_calibration(spec, rng)
    traj = SynthTrajectory(dt, poses, omegas, velocities, accels, calibration=cal,
                          envelope=envelope)
    seq = corrupt(traj, cal, seed=int(rng.integers(2**31)), domain_tag=spec.name)
    return traj, seq
