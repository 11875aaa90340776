# Copyright 2025 Semantiva authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Tests for rigid transforms, trilinear warping and GP trajectories."""

import numpy as np
import pytest

from motiondps.motion import (
    SEVERITY_LEVELS,
    MotionState,
    MotionTrajectory,
    load_trajectory_csv,
    rotation_matrix,
    save_trajectory_csv,
    se3_matrix,
    second_difference,
    severity_level,
    simulate_gp_trajectory,
    warp,
    warp_adjoint,
    warp_jvp,
    warp_vjp,
)

from .conftest import random_complex, smooth_volume


def test_motion_state_array_round_trip_and_validation():
    """Six parameters in (t_z, t_y, t_x, r_z, r_y, r_x) order."""
    s = MotionState((1.0, 2.0, 3.0), (4.0, 5.0, 6.0))
    np.testing.assert_array_equal(s.as_array(), [1, 2, 3, 4, 5, 6])
    assert MotionState.from_array(s.as_array()) == s
    with pytest.raises(ValueError):
        MotionState.from_array([1.0, 2.0])


def test_trajectory_relative_to_first():
    v = MotionTrajectory(np.arange(18, dtype=float).reshape(3, 6))
    rel = v.relative_to_first()
    np.testing.assert_array_equal(rel.params[0], np.zeros(6))
    np.testing.assert_array_equal(rel.params[2], np.full(6, 12.0))
    assert v.num_states == 3
    assert len(v.states) == 3


def test_rotation_matrix_is_orthonormal_with_exact_partials():
    """R is a proper rotation; its partials match finite differences."""
    angles = np.array([7.0, -11.0, 23.0])
    rot, partials = rotation_matrix(angles)
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0)
    h = 1e-6
    for j in range(3):
        step = np.zeros(3)
        step[j] = h
        fd = (rotation_matrix(angles + step)[0] - rotation_matrix(angles - step)[0]) / (2 * h)
        np.testing.assert_allclose(partials[j], fd, atol=1e-8)


def test_se3_matrix_fixes_the_centre_without_translation():
    """Rotation is about the volume centre (n - 1) / 2."""
    matrix = se3_matrix(MotionState((0, 0, 0), (10, 20, 30)), (9, 9, 9))
    np.testing.assert_allclose(matrix @ np.array([4.0, 4.0, 4.0, 1.0]), [4, 4, 4, 1], atol=1e-12)


def test_half_turn_about_z_reproduces_a_point_symmetric_volume():
    """Odd in-plane extents put the centre on the grid, so a 180° r_z turn maps voxels onto voxels."""
    a = random_complex((4, 7, 9), seed=8)
    x = a + a[:, ::-1, ::-1]
    out = warp(x, MotionState((0.0, 0.0, 0.0), (180.0, 0.0, 0.0)))
    np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)
    turned = warp(a, MotionState((0.0, 0.0, 0.0), (180.0, 0.0, 0.0)))
    np.testing.assert_allclose(turned, a[:, ::-1, ::-1], rtol=0, atol=1e-12)


def test_zero_motion_warp_is_identity():
    x = random_complex((5, 6, 7))
    np.testing.assert_allclose(warp(x, np.zeros(6)), x, rtol=0, atol=1e-14)


def test_integer_translation_shifts_with_zero_fill():
    """+1 mm along z at 1 mm spacing moves content one voxel up the z axis."""
    x = random_complex((5, 4, 4), seed=1)
    out = warp(x, MotionState((1.0, 0.0, 0.0), (0.0, 0.0, 0.0)))
    np.testing.assert_allclose(out[1:], x[:-1], atol=1e-14)
    np.testing.assert_array_equal(out[0], 0.0)


def test_translation_honours_spacing():
    """2 mm at 2 mm spacing is a one-voxel shift along x."""
    x = random_complex((4, 4, 6), seed=2)
    out = warp(x, MotionState((0.0, 0.0, 2.0), (0.0, 0.0, 0.0)), spacing=(1.0, 1.0, 2.0))
    np.testing.assert_allclose(out[:, :, 1:], x[:, :, :-1], atol=1e-14)


def test_warp_adjoint_passes_the_dot_test():
    """<W x, u> = <x, Wᵀ u> for a generic rotation and translation."""
    state = np.array([0.7, -1.3, 0.4, 6.0, -4.0, 9.0])
    x = random_complex((9, 8, 7), seed=3)
    u = random_complex((9, 8, 7), seed=4)
    lhs = np.vdot(u, warp(x, state))
    rhs = np.vdot(warp_adjoint(u, state), x)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_warp_vjp_matches_finite_differences():
    """Gradient of Re<W(x, s), u> with respect to the six parameters."""
    x = smooth_volume((14, 14, 14), seed=5)
    u = random_complex((14, 14, 14), seed=6)
    state = np.array([0.31, -0.52, 0.17, 2.3, -1.7, 3.1])
    _, grad_s = warp_vjp(x, state, u)
    h = 1e-6
    for j in range(6):
        step = np.zeros(6)
        step[j] = h
        fd = (np.vdot(u, warp(x, state + step)).real - np.vdot(u, warp(x, state - step)).real) / (2 * h)
        assert grad_s[j] == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_warp_vjp_at_identity_matches_central_differences():
    """On-grid samples use averaged one-sided slopes."""
    x = smooth_volume((10, 10, 10), seed=7)
    u = random_complex((10, 10, 10), seed=8)
    _, grad_s = warp_vjp(x, np.zeros(6), u)
    h = 1e-6
    for j in range(6):
        step = np.zeros(6)
        step[j] = h
        fd = (np.vdot(u, warp(x, step)).real - np.vdot(u, warp(x, -step)).real) / (2 * h)
        assert grad_s[j] == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_warp_jvp_and_vjp_are_adjoint():
    """<J(dx, ds), u> = <dx, grad_x> + <ds, grad_s>."""
    x = smooth_volume((9, 9, 9), seed=9)
    u = random_complex((9, 9, 9), seed=10)
    dx = random_complex((9, 9, 9), seed=11)
    ds = np.random.default_rng(12).standard_normal(6)
    state = np.array([0.2, 0.4, -0.6, 1.5, 2.5, -3.5])
    grad_x, grad_s = warp_vjp(x, state, u)
    lhs = np.vdot(u, warp_jvp(x, state, dx, ds)).real
    rhs = np.vdot(grad_x, dx).real + float(ds @ grad_s)
    assert lhs == pytest.approx(rhs, rel=1e-9)


def test_second_difference_vanishes_on_affine_trajectories():
    t = np.arange(6, dtype=float)[:, None]
    affine = 2.0 + 0.5 * t * np.ones((1, 6))
    np.testing.assert_allclose(second_difference(affine), 0.0, atol=1e-12)
    assert second_difference(np.zeros((2, 6))).shape == (0, 6)


@pytest.mark.parametrize("name", sorted(SEVERITY_LEVELS))
def test_gp_trajectory_hits_severity_bounds_exactly(name):
    """Max-abs per component equals the bound and the first state is zero."""
    level = severity_level(name)
    v = simulate_gp_trajectory(32, level, seed=3)
    peaks = np.max(np.abs(v.params), axis=0)
    np.testing.assert_array_equal(peaks[:3], level.max_translation_mm)
    np.testing.assert_array_equal(peaks[3:], level.max_rotation_deg)
    np.testing.assert_array_equal(v.params[0], 0.0)


def test_gp_trajectory_is_seeded():
    """Same seed, same bits; different seed, different path."""
    level = severity_level("mild").scaled(0.5)
    a = simulate_gp_trajectory(16, level, seed=11)
    b = simulate_gp_trajectory(16, level, seed=11)
    c = simulate_gp_trajectory(16, level, seed=12)
    np.testing.assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)
    assert np.max(np.abs(a.params[:, :3])) == 1.5


def test_gp_trajectories_are_smoother_than_white_noise():
    """Mean squared curvature of RBF draws sits far below bounded white noise."""
    level = severity_level("moderate")
    gp_curvature, noise_curvature = [], []
    for seed in range(5):
        v = simulate_gp_trajectory(52, level, seed=seed).params
        noise = np.random.default_rng(100 + seed).standard_normal((52, 6))
        noise *= np.max(np.abs(v), axis=0) / np.max(np.abs(noise), axis=0)
        gp_curvature.append(np.mean(second_difference(v) ** 2))
        noise_curvature.append(np.mean(second_difference(noise) ** 2))
    assert np.mean(gp_curvature) < 0.05 * np.mean(noise_curvature)


def test_gp_random_amplitude_stays_within_bounds():
    level = severity_level("moderate")
    v = simulate_gp_trajectory(20, level, seed=4, random_amplitude=True)
    peaks = np.max(np.abs(v.params), axis=0)
    assert np.all(peaks[:3] <= 6.0) and np.all(peaks[:3] >= 3.0)
    assert np.all(peaks[3:] <= 10.0) and np.all(peaks[3:] >= 5.0)


def test_gp_trajectory_rejects_bad_arguments():
    with pytest.raises(ValueError, match="at least 2"):
        simulate_gp_trajectory(1, severity_level("mild"))
    with pytest.raises(ValueError, match="lengthscale"):
        simulate_gp_trajectory(8, severity_level("mild"), lengthscale=0.0)
    with pytest.raises(ValueError, match="severity"):
        severity_level("extreme")


def test_trajectory_csv_round_trip_is_exact(tmp_path):
    """repr-formatted floats reload bit for bit with a 1-based time index."""
    v = simulate_gp_trajectory(7, severity_level("severe"), seed=1)
    path = tmp_path / "motion.csv"
    save_trajectory_csv(v, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_index,t_z_mm,t_y_mm,t_x_mm,r_z_deg,r_y_deg,r_x_deg"
    assert lines[1].startswith("1,")
    np.testing.assert_array_equal(load_trajectory_csv(path).params, v.params)
