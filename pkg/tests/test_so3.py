import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from imnd import so3
from conftest import random_rotvecs


def rodrigues(v):
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    k = v / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * np.outer(k, k)


def test_exp_identity_and_half_turn():
    assert np.array_equal(so3.exp_so3(np.zeros(3)), np.eye(3))
    np.testing.assert_allclose(so3.exp_so3([0, 0, np.pi]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_exp_matches_rodrigues(rng):
    for v in random_rotvecs(rng, 200, 3.0):
        np.testing.assert_allclose(so3.exp_so3(v), rodrigues(v), atol=1e-12)


def test_exp_batched_matches_single(rng):
    vs = random_rotvecs(rng, 20, 3.0)
    batch = so3.exp_so3(vs)
    for v, R in zip(vs, batch):
        np.testing.assert_array_equal(R, so3.exp_so3(v))


def test_exp_small_angle_branch_is_orthonormal():
    R = so3.exp_so3([3e-9, -1e-9, 2e-9])
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-15
    np.testing.assert_allclose(so3.vee(R - R.T) / 2, [3e-9, -1e-9, 2e-9], rtol=1e-12)


def test_exp_rejects_non_finite():
    with pytest.raises(so3.InvalidRotation):
        so3.exp_so3([np.nan, 0, 0])


def test_log_identity():
    assert np.array_equal(so3.log_so3(np.eye(3)), np.zeros(3))


def test_log_unit_angle_round_trip(rng):
    for v in random_rotvecs(rng, 50, 1.0):
        v = v / np.linalg.norm(v)
        np.testing.assert_allclose(so3.log_so3(so3.exp_so3(v)), v, atol=1e-12)


def test_log_near_pi_against_quaternion_oracle():
    angle = np.pi - 1e-4
    q = np.array([np.sin(angle / 2), 0, 0, np.cos(angle / 2)])  # scipy order x, y, z, w
    R = Rotation.from_quat(q).as_matrix()
    np.testing.assert_allclose(so3.log_so3(R), [angle, 0, 0], atol=1e-6)


def test_log_near_pi_random_axes(rng):
    for v in random_rotvecs(rng, 50, 1.0):
        axis = v / np.linalg.norm(v)
        angle = np.pi - rng.uniform(1e-6, 1e-2)
        R = Rotation.from_rotvec(axis * angle).as_matrix()
        np.testing.assert_allclose(so3.log_so3(R), axis * angle, atol=1e-6)


def test_log_rejects_non_rotation():
    with pytest.raises(so3.InvalidRotation):
        so3.log_so3(np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(so3.InvalidRotation):
        so3.log_so3(np.diag([1.0, 1.0, -1.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.8, 1.8), min_size=3, max_size=3))
def test_exp_log_round_trip_property(v):
    v = np.array(v)
    if np.linalg.norm(v) > np.pi - 1e-3:
        v = v / np.linalg.norm(v) * (np.pi - 1e-3)
    assert np.linalg.norm(so3.log_so3(so3.exp_so3(v)) - v) < 1e-9


def test_integrate_constant_yaw_closed_form():
    out = so3.integrate_orientation(np.eye(3), np.tile([0, 0, 0.1], (1000, 1)), 0.01)
    assert out.shape == (1000, 3, 3)
    yaw = np.arctan2(out[-1, 1, 0], out[-1, 0, 0])
    assert abs(yaw - 1.0) < 1e-12
    np.testing.assert_allclose(out[-1], Rotation.from_euler("z", 1.0).as_matrix(), atol=1e-12)


def test_integrate_zero_rates_stays_at_r0(rng):
    r0 = so3.exp_so3(rng.normal(size=3))
    out = so3.integrate_orientation(r0, np.zeros((50, 3)), 0.005)
    for R in out:
        np.testing.assert_allclose(R, r0, atol=1e-15)


def test_integrate_empty_and_bad_dt():
    assert so3.integrate_orientation(np.eye(3), np.zeros((0, 3)), 0.01).shape == (0, 3, 3)
    with pytest.raises(ValueError):
        so3.integrate_orientation(np.eye(3), np.zeros((3, 3)), 0.0)


def test_integrate_left_equivariance(rng):
    omegas = rng.normal(size=(300, 3))
    Q = so3.exp_so3(rng.normal(size=3))
    r0 = so3.exp_so3(rng.normal(size=3))
    a = so3.integrate_orientation(Q @ r0, omegas, 0.01)
    b = Q @ so3.integrate_orientation(r0, omegas, 0.01)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_integrate_long_run_stays_orthonormal(rng):
    omegas = rng.normal(scale=2.0, size=(100_000, 3))
    out = so3.integrate_orientation(np.eye(3), omegas, 0.005)
    resid = np.linalg.norm(np.swapaxes(out, 1, 2) @ out - np.eye(3), axis=(1, 2))
    assert resid.max() < 1e-6


def test_relative_rotation_cases(rng):
    R = so3.exp_so3(rng.normal(size=3))
    assert np.allclose(so3.relative_rotation([R, R], 0, 1), np.eye(3), atol=1e-15)
    R1 = so3.exp_so3(rng.normal(size=3))
    np.testing.assert_array_equal(so3.relative_rotation([R, R1], 0, 1), R.T @ R1)
    with pytest.raises(IndexError):
        so3.relative_rotation([R, R1], 1, 1)
    with pytest.raises(IndexError):
        so3.relative_rotation([R, R1], 0, 0)


def test_relative_rotation_equals_increment_product(rng):
    incs = rng.normal(scale=0.05, size=(40, 3))
    seq = np.concatenate([np.eye(3)[None], so3.integrate_orientation(np.eye(3), incs, 1.0)])
    i, j = 5, 17
    direct = np.eye(3)
    for k in range(i, i + j):
        direct = direct @ rodrigues(incs[k])
    np.testing.assert_allclose(so3.relative_rotation(seq, i, j), direct, atol=1e-12)
    chained = np.eye(3)
    for k in range(i, i + j):
        chained = chained @ so3.relative_rotation(seq, k, 1)
    np.testing.assert_allclose(so3.relative_rotation(seq, i, j), chained, atol=1e-10)


def test_euler_cases(rng):
    np.testing.assert_array_equal(so3.rotation_to_euler(np.eye(3)), [0, 0, 0])
    np.testing.assert_allclose(so3.rotation_to_euler(so3.exp_so3([0, 0, np.pi / 2])), [0, 0, 90], atol=1e-12)
    for _ in range(200):
        R = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        roll, pitch, yaw = np.radians(so3.rotation_to_euler(R))
        assert -np.pi / 2 <= pitch <= np.pi / 2
        np.testing.assert_allclose(so3.euler_to_rotation(roll, pitch, yaw), R, atol=1e-9)


def test_euler_matches_scipy_intrinsic_zyx(rng):
    R = Rotation.random(5, random_state=3)
    ypr = R.as_euler("ZYX", degrees=True)
    np.testing.assert_allclose(so3.rotation_to_euler(R.as_matrix()), ypr[:, ::-1], atol=1e-9)


def test_euler_gimbal_lock_flag():
    R = so3.euler_to_rotation(0.3, np.pi / 2, 0.1)
    angles, locked = so3.rotation_to_euler(R, return_flag=True)
    assert locked
    assert angles[2] == 0.0
    np.testing.assert_allclose(so3.euler_to_rotation(*np.radians(angles)), R, atol=1e-9)


def test_gt_angular_velocity_cases():
    assert np.all(so3.gt_angular_velocity(np.tile(np.eye(3), (5, 1, 1)), 0.01) == 0)
    w = np.array([0.3, -0.2, 0.5])
    track = np.concatenate([np.eye(3)[None], so3.integrate_orientation(np.eye(3), np.tile(w, (100, 1)), 0.01)])
    np.testing.assert_allclose(so3.gt_angular_velocity(track, 0.01), np.tile(w, (100, 1)), atol=1e-10)
    yaw = np.arange(201) / 200.0
    track = Rotation.from_euler("z", yaw).as_matrix()
    np.testing.assert_allclose(so3.gt_angular_velocity(track, 1 / 200), np.tile([0, 0, 1.0], (200, 1)), atol=1e-9)


def test_gt_angular_velocity_inverse_of_integration(rng):
    r0 = so3.exp_so3(rng.normal(size=3))
    omegas = rng.normal(size=(2000, 3))
    track = np.concatenate([r0[None], so3.integrate_orientation(r0, omegas, 0.005)])
    rec = so3.gt_angular_velocity(track, 0.005)
    back = so3.integrate_orientation(r0, rec, 0.005)
    assert np.abs(back - track[1:]).max() < 1e-9


def test_gt_angular_velocity_errors():
    with pytest.raises(ValueError):
        so3.gt_angular_velocity(np.eye(3)[None], 0.01)
    with pytest.raises(ValueError):
        so3.gt_angular_velocity([np.eye(3), np.diag([1.0, -1.0, -1.0])], 0.01)
