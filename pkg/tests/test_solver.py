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

"""Tests for schedules, the individual solver steps and the reconstruction driver."""

import logging
from fractions import Fraction

import numpy as np
import pytest

from motiondps.acquisition import (
    evaluate_fidelity,
    forward_full,
    grad_data_fidelity,
    make_full_mask,
    make_ordering,
    state_data_consistency,
)
from motiondps.motion import severity_level, simulate_gp_trajectory
from motiondps.phantom import make_synthetic_coils
from motiondps.priors import IdentityScorePrior, QuadraticScorePrior, coil_normalize, coil_prox, coil_reg_value
from motiondps.solver import (
    NoiseSchedule,
    PreconditionerState,
    SolverAbort,
    SolverConfig,
    ZetaSchedule,
    _backtrack,
    coil_step,
    dc_reject,
    dps_image_step,
    initialize,
    karras_sigma,
    momentum_beta,
    motion_step,
    run,
    zeta,
)
from motiondps.volume import KSpaceSet

from .conftest import random_complex, smooth_volume


class NaNPrior:
    def denoise(self, x, sigma):
        return np.full(np.shape(x), np.nan + 0j)

    def vjp(self, x, sigma, u):
        return u


@pytest.fixture
def static_problem(full_plan_8):
    """Fully sampled 8³ data of a smooth image, no motion, two normalized coils."""
    x = smooth_volume(full_plan_8.shape, seed=1)
    coils = make_synthetic_coils(full_plan_8.shape, 2, seed=0).maps
    z = forward_full(x, coils, np.zeros((full_plan_8.num_times, 6)), full_plan_8)
    return x, coils, z


# --- schedules ---------------------------------------------------------------


def test_noise_schedule_endpoints_are_exact():
    schedule = NoiseSchedule()
    assert karras_sigma(0, schedule) == 0.002
    assert karras_sigma(199, schedule) == 80.0
    expected = (80.0 ** (1 / 7) + (99 / 199) * (0.002 ** (1 / 7) - 80.0 ** (1 / 7))) ** 7
    assert karras_sigma(100, schedule) == pytest.approx(expected, rel=1e-12)
    values = [karras_sigma(i, schedule) for i in range(200)]
    assert np.all(np.diff(values) > 0)


def test_schedules_reject_bad_arguments():
    with pytest.raises(ValueError, match="at least 2"):
        NoiseSchedule(num_steps=1)
    with pytest.raises(ValueError, match="sigma_min"):
        NoiseSchedule(sigma_min=1.0, sigma_max=1.0)
    with pytest.raises(ValueError, match="outside"):
        karras_sigma(200, NoiseSchedule())
    with pytest.raises(ValueError, match="> 0"):
        ZetaSchedule(zeta_start=0.0)


def test_zeta_is_geometric_between_exact_endpoints():
    schedule = ZetaSchedule(1.0, 0.1, 201)
    assert zeta(200, schedule) == 1.0
    assert zeta(0, schedule) == 0.1
    assert zeta(100, schedule) == pytest.approx(np.sqrt(0.1))
    values = [zeta(i, schedule) for i in range(201)]
    assert np.all(np.diff(values) > 0)


def test_momentum_beta_is_an_exact_fraction():
    assert momentum_beta(199, 200) == Fraction(1, 4)
    assert momentum_beta(0, 200) == Fraction(200, 203)
    assert isinstance(momentum_beta(5, 200), Fraction)
    with pytest.raises(ValueError):
        momentum_beta(-1, 200)


# --- configuration -----------------------------------------------------------


def test_solver_config_validation():
    config = SolverConfig()
    assert config.to_dict()["num_steps"] == 200
    assert "dc_threshold" in SolverConfig.field_names()
    for bad in ({"gamma": -1.0}, {"beta1": 1.0}, {"fixed_coils": "oracle"}, {"prior": "diffusion"}, {"num_steps": 1}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_preconditioner_first_update():
    """After one gradient the bias-corrected belief is |g - 0.5 g|."""
    state = PreconditionerState.zeros(2)
    grad = np.arange(12, dtype=float).reshape(2, 6) - 5.0
    diag = state.update(grad)
    np.testing.assert_allclose(diag, 0.5 * np.abs(grad) + 1e-8)
    assert state.k == 1


# --- steps -------------------------------------------------------------------


def test_initialize_draws_noise_at_sigma_max():
    plan = make_ordering(make_full_mask((32, 32)), "linear_circular", shots=4, volume_shape=(32, 32, 32))
    z = KSpaceSet(random_complex((2, int(plan.offsets[-1])), seed=3), plan.offsets, plan.plan_id)
    state = initialize(z, plan, NoiseSchedule(sigma_max=5.0), seed=4)
    assert np.mean(np.abs(state.x) ** 2) == pytest.approx(25.0, rel=0.05)
    np.testing.assert_array_equal(state.motion, 0.0)
    np.testing.assert_allclose(np.sum(np.abs(state.coils) ** 2, axis=0), 1.0)
    again = initialize(z, plan, NoiseSchedule(sigma_max=5.0), seed=4)
    np.testing.assert_array_equal(state.x, again.x)


def test_image_step_without_weight_keeps_identity_prior_input(full_plan_8, static_problem):
    _, coils, z = static_problem
    x = random_complex(full_plan_8.shape, seed=5)
    updated, denoised = dps_image_step(
        x, coils, np.zeros((4, 6)), z, full_plan_8, 2.0, 1.0, 0.0, IdentityScorePrior()
    )
    np.testing.assert_array_equal(updated, x)
    np.testing.assert_array_equal(denoised, x)


def test_image_step_at_consistent_data_has_no_correction(full_plan_8, static_problem):
    x, coils, z = static_problem
    updated, _ = dps_image_step(x, coils, np.zeros((4, 6)), z, full_plan_8, 2.0, 1.0, 0.7, IdentityScorePrior())
    np.testing.assert_allclose(updated, x, atol=1e-12)


def test_image_step_without_weight_ignores_the_measurements(full_plan_8, static_problem):
    """With ζ = 0 the update is the prior's flow alone, whatever the data."""
    _, coils, z = static_problem
    other = z.with_data(random_complex(z.data.shape, seed=12))
    prior = QuadraticScorePrior(0.5)
    x = random_complex(full_plan_8.shape, seed=13)
    motion = np.full((4, 6), 0.2)
    first, _ = dps_image_step(x, coils, motion, z, full_plan_8, 3.0, 2.0, 0.0, prior)
    second, _ = dps_image_step(x, coils, motion, other, full_plan_8, 3.0, 2.0, 0.0, prior)
    np.testing.assert_array_equal(first, second)
    weighted, _ = dps_image_step(x, coils, motion, other, full_plan_8, 3.0, 2.0, 0.5, prior)
    assert not np.allclose(weighted, first)


def test_image_step_matches_hand_assembled_update(full_plan_8, static_problem):
    _, coils, z = static_problem
    prior = QuadraticScorePrior(0.5)
    x = random_complex(full_plan_8.shape, seed=6)
    motion = np.zeros((4, 6))
    sigma, sigma_next, weight = 3.0, 2.0, 0.4
    denoised = prior.denoise(x, sigma)
    grad = grad_data_fidelity("x", denoised, coils, motion, z, full_plan_8, sigma=0.5)
    expected = x + ((sigma_next - sigma) / sigma) * (x - denoised) - weight * prior.vjp(x, sigma, grad)
    updated, _ = dps_image_step(x, coils, motion, z, full_plan_8, sigma, sigma_next, weight, prior, noise_sigma=0.5)
    np.testing.assert_allclose(updated, expected, atol=1e-12)
    with pytest.raises(ValueError, match="sigma_next"):
        dps_image_step(x, coils, motion, z, full_plan_8, 1.0, 1.0, weight, prior)


def test_image_step_aborts_on_non_finite_denoiser(full_plan_8, static_problem):
    x, coils, z = static_problem
    with pytest.raises(SolverAbort) as excinfo:
        dps_image_step(x, coils, np.zeros((4, 6)), z, full_plan_8, 2.0, 1.0, 0.5, NaNPrior(), iteration=7)
    assert excinfo.value.iteration == 7
    assert excinfo.value.quantity == "denoised image"
    assert "iteration 7" in str(excinfo.value)


def test_backtracking_finds_the_curvature():
    """For f = (3/2)|p|² the sufficient-decrease test first holds at L = 4."""

    def objective(p):
        return 1.5 * float(np.sum(p**2))

    point = np.array([1.0, -2.0])
    grad = 3.0 * point
    trial, lipschitz, exhausted = _backtrack(objective, objective(point), point, grad, np.ones(1), 1.0, 20, "Test")
    assert lipschitz == 4.0 and not exhausted
    np.testing.assert_allclose(trial, point - grad / 4.0)


def test_backtracking_reports_exhaustion(caplog):
    def objective(p):
        return 1.5 * float(np.sum(p**2))

    point = np.array([1.0])
    with caplog.at_level(logging.WARNING, logger="motiondps.solver"):
        _, lipschitz, exhausted = _backtrack(objective, 1.5, point, 3.0 * point, np.ones(1), 1.0, 1, "Test")
    assert exhausted and lipschitz == 1.0
    assert "backtracking exhausted" in caplog.text


def test_coil_step_returns_normalized_maps(full_plan_8, static_problem):
    x, _, z = static_problem
    state = initialize(z, full_plan_8, NoiseSchedule(), seed=0)
    coils, exhausted = coil_step(state, x, z, full_plan_8, 0.25, 200.0)
    power = np.sum(np.abs(coils) ** 2, axis=0)
    np.testing.assert_allclose(power[power > 0], 1.0)
    assert not exhausted
    assert state.lipschitz_coil > 0.0


def test_coil_step_decreases_its_proximal_surrogate(full_plan_8, static_problem):
    """The accepted L passes the sufficient-decrease test and the prox does not raise the surrogate."""
    x, _, z = static_problem
    motion = np.zeros((4, 6))
    gamma, beta = 2.0, 0.25
    state = initialize(z, full_plan_8, NoiseSchedule(), seed=0)
    state.coils_prev = 0.8 * state.coils
    extrapolated = state.coils + beta * (state.coils - state.coils_prev)
    coils, exhausted = coil_step(state, x, z, full_plan_8, beta, gamma)
    assert not exhausted

    start = evaluate_fidelity(x, extrapolated, motion, z, full_plan_8, wrt=("c",))
    grad, lipschitz = start.grad_c, state.lipschitz_coil
    trial = extrapolated - grad / lipschitz
    decrease = 0.5 * float(np.sum(np.abs(grad) ** 2)) / lipschitz
    assert evaluate_fidelity(x, trial, motion, z, full_plan_8).value <= (start.value - decrease) * (1 + 1e-12)

    def surrogate(c):
        d = c - extrapolated
        linear = float(np.real(np.vdot(grad, d)))
        return start.value + linear + 0.5 * lipschitz * float(np.sum(np.abs(d) ** 2)) + coil_reg_value(c, gamma)

    prox = coil_prox(trial, gamma, lipschitz)
    np.testing.assert_allclose(coils, coil_normalize(prox), atol=1e-12)
    assert surrogate(prox) <= surrogate(extrapolated) + 1e-10 * abs(surrogate(extrapolated))
    assert surrogate(prox) < surrogate(extrapolated)


def test_motion_step_fixed_point_at_the_truth(full_plan_8, static_problem):
    """Zero residual gives a zero gradient, so the zero trajectory stays put."""
    x, coils, z = static_problem
    state = initialize(z, full_plan_8, NoiseSchedule(), seed=0)
    result = motion_step(state, x, coils, z, full_plan_8, 0.25, SolverConfig())
    np.testing.assert_array_equal(result.motion, 0.0)
    assert result.cg_converged and not result.backtracking_exhausted
    assert state.lipschitz_motion == 5.0


def test_motion_step_matches_the_dense_preconditioned_prox(full_plan_8, static_problem):
    """Backtracked gradient step in the belief metric followed by ``(η LᵀL + P) v = P w``."""
    x, coils, z = static_problem
    rng = np.random.default_rng(21)
    state = initialize(z, full_plan_8, NoiseSchedule(), seed=0)
    state.motion = 0.3 * rng.standard_normal((4, 6))
    state.motion_prev = state.motion - 0.1 * rng.standard_normal((4, 6))
    beta = 0.25
    extrapolated = state.motion + beta * (state.motion - state.motion_prev)
    config = SolverConfig(eta_r=10.0, eta_t=5.0, cg_tol=1e-14, cg_max_iter=500)
    result = motion_step(state, x, coils, z, full_plan_8, beta, config)

    grad = grad_data_fidelity("v", x, coils, extrapolated, z, full_plan_8)
    belief = PreconditionerState.zeros(4)
    diag = belief.update(grad)
    np.testing.assert_allclose(state.precond.g1, 0.5 * grad, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(state.precond.g2, 0.1 * (0.5 * grad) ** 2, rtol=1e-9, atol=1e-12)
    trial = extrapolated - grad / (state.lipschitz_motion * diag)

    second = np.diff(np.eye(4), n=2, axis=0)
    metric = (state.lipschitz_motion * diag).reshape(-1)
    system = np.kron(second.T @ second, np.diag([5.0, 5.0, 5.0, 10.0, 10.0, 10.0])) + np.diag(metric)
    expected = np.linalg.solve(system, metric * trial.reshape(-1)).reshape(4, 6)
    np.testing.assert_allclose(result.motion, expected, rtol=1e-8, atol=1e-10)
    assert not result.backtracking_exhausted


def test_dc_reject_rules(caplog):
    dc = np.array([0.1, 0.9, 0.5])
    np.testing.assert_array_equal(dc_reject(dc, 40, 0.75, 40), [True, True, True])
    np.testing.assert_array_equal(dc_reject(dc, 10, 0.75, 40), [True, False, True])
    with caplog.at_level(logging.WARNING, logger="motiondps.solver"):
        kept = dc_reject(np.array([0.9, 0.8, 1.2]), 3, 0.75, 40)
    np.testing.assert_array_equal(kept, [False, True, False])
    assert "keeping state 1" in caplog.text


def _with_noisy_state(z, plan, t, seed=0):
    """Copy of ``z`` whose state ``t`` holds unrelated noise."""
    data = z.data.copy()
    lo, hi = int(plan.offsets[t]), int(plan.offsets[t + 1])
    data[:, lo:hi] = 2.0 * random_complex((data.shape[0], hi - lo), seed=seed)
    return z.with_data(data)


def test_dc_rejection_drops_exactly_the_corrupted_state(full_plan_8, static_problem):
    x, coils, z = static_problem
    corrupted = _with_noisy_state(z, full_plan_8, 2)
    dc = state_data_consistency(x, coils, np.zeros((4, 6)), corrupted, full_plan_8)
    assert np.all(dc[[0, 1, 3]] < 1e-10)
    assert dc[2] > 0.75
    np.testing.assert_array_equal(dc_reject(dc, 0, 0.75, 40), [True, True, False, True])
    np.testing.assert_array_equal(dc_reject(dc, 40, 0.75, 40), [True, True, True, True])


@pytest.mark.parametrize("window", [0, 2])
def test_run_masks_states_only_inside_the_final_window(full_plan_8, static_problem, window):
    _, coils, z = static_problem
    corrupted = _with_noisy_state(z, full_plan_8, 1, seed=4)
    config = SolverConfig(
        num_steps=6, sigma_max=5.0, prior="identity", estimate_coils=False, estimate_motion=False, dc_window=window
    )
    result = run(corrupted, full_plan_8, config, coils=coils)
    assert [d.iteration for d in result.diagnostics] == [5, 4, 3, 2, 1, 0]
    for d in result.diagnostics:
        if d.iteration >= window:
            assert d.active_states == 4
        assert d.active_states >= 1


# --- driver ------------------------------------------------------------------


def test_run_recovers_fully_sampled_static_image(full_plan_8, static_problem):
    """With a flat prior the first full-weight data step lands on the least-squares solution."""
    x, coils, z = static_problem
    config = SolverConfig(
        num_steps=2, prior="identity", estimate_coils=False, estimate_motion=False, dc_window=0
    )
    result = run(z, full_plan_8, config, coils=coils)
    np.testing.assert_allclose(result.image, x, atol=1e-10)
    assert len(result.diagnostics) == 2
    assert [d.iteration for d in result.diagnostics] == [1, 0]
    assert result.diagnostics[-1].active_states == 4
    np.testing.assert_array_equal(result.motion.params, 0.0)


def test_run_is_deterministic(tmp_path, full_plan_8):
    x = smooth_volume(full_plan_8.shape, seed=2)
    coils = make_synthetic_coils(full_plan_8.shape, 2, seed=1).maps
    motion = simulate_gp_trajectory(4, severity_level("mild").scaled(0.2), seed=1).params
    z = forward_full(x, coils, motion, full_plan_8)
    config = SolverConfig(num_steps=3, sigma_max=5.0, dc_window=2, cg_max_iter=50)
    first = run(z, full_plan_8, config)
    second = run(z, full_plan_8, config)
    first.write_diagnostics_csv(tmp_path / "a.csv")
    second.write_diagnostics_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    np.testing.assert_array_equal(first.image, second.image)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header.endswith("active_states,dc_0,dc_1,dc_2,dc_3")
    assert np.all(np.isfinite(first.motion.params))


def test_run_validates_inputs(full_plan_8, static_problem):
    _, _, z = static_problem
    with pytest.raises(ValueError, match="no coil maps"):
        run(z, full_plan_8, SolverConfig(num_steps=2, estimate_coils=False))
    other = make_ordering(make_full_mask((8, 8)), "centric", shots=4, volume_shape=(8, 8, 8))
    with pytest.raises(ValueError, match="acquired with plan"):
        run(z, other, SolverConfig(num_steps=2))
