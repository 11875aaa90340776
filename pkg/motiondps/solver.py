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

"""Joint image, coil and motion reconstruction by diffusion posterior sampling.

The outer loop walks the noise schedule from ``σ_max`` down to ``σ_min``.
Each iteration takes a probability-flow Euler step on the image with a
data-consistency correction chained through the denoiser, then one
inertial proximal step on the coil maps and one on the motion trajectory.
Late in the run, motion states whose data consistency is poor are dropped
from all three data terms.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .acquisition import SamplingPlan, consistency_ratios, evaluate_fidelity
from .motion import MotionTrajectory
from .priors import ScorePrior, build_prior, coil_normalize, coil_prox, motion_prox
from .volume import CoilSet, KSpaceSet, zero_filled_coil_images

logger = logging.getLogger(__name__)

FIXED_COIL_SOURCES = ("true", "zero_filled")


class SolverAbort(RuntimeError):
    """A non-finite quantity appeared during reconstruction."""

    def __init__(self, iteration: int, quantity: str, detail: str = ""):
        self.iteration = iteration
        self.quantity = quantity
        message = f"Reconstruction aborted at iteration {iteration}: non-finite {quantity}"
        super().__init__(f"{message} ({detail})" if detail else message)


# --- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int = 200
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def __post_init__(self) -> None:
        if self.num_steps < 2:
            raise ValueError(f"Noise schedule needs at least 2 steps, got {self.num_steps}")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"Need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if not self.rho > 0.0:
            raise ValueError(f"rho must be > 0, got {self.rho}")


@dataclass(frozen=True)
class ZetaSchedule:
    zeta_start: float = 1.0
    zeta_end: float = 0.1
    num_steps: int = 200

    def __post_init__(self) -> None:
        if not (self.zeta_start > 0.0 and self.zeta_end > 0.0):
            raise ValueError(f"Step weights must be > 0, got {self.zeta_start}, {self.zeta_end}")
        if self.num_steps < 2:
            raise ValueError(f"Step-weight schedule needs at least 2 steps, got {self.num_steps}")


def _check_index(i: int, num_steps: int) -> None:
    if not 0 <= i <= num_steps - 1:
        raise ValueError(f"Iteration index {i} outside [0, {num_steps - 1}]")


def karras_sigma(i: int, schedule: NoiseSchedule) -> float:
    """Noise level of iteration ``i``: ``σ_min`` at 0, ``σ_max`` at ``N − 1``, ``ρ``-warped in between."""
    n = schedule.num_steps
    _check_index(i, n)
    if i == n - 1:
        return float(schedule.sigma_max)
    if i == 0:
        return float(schedule.sigma_min)
    inv_rho = 1.0 / schedule.rho
    lo = schedule.sigma_min**inv_rho
    hi = schedule.sigma_max**inv_rho
    frac = (n - 1 - i) / (n - 1)
    return float((hi + frac * (lo - hi)) ** schedule.rho)


def zeta(i: int, schedule: ZetaSchedule) -> float:
    """Geometric interpolation from ``zeta_start`` at ``N − 1`` to ``zeta_end`` at 0."""
    n = schedule.num_steps
    _check_index(i, n)
    if i == n - 1:
        return float(schedule.zeta_start)
    if i == 0:
        return float(schedule.zeta_end)
    frac = (n - 1 - i) / (n - 1)
    return float(schedule.zeta_start * (schedule.zeta_end / schedule.zeta_start) ** frac)


def momentum_beta(i: int, num_steps: int) -> Fraction:
    """Inertial weight ``(N − i) / (N − i + 3)``."""
    _check_index(i, num_steps)
    return Fraction(num_steps - i, num_steps - i + 3)


# --- configuration and state -------------------------------------------------


@dataclass
class SolverConfig:
    num_steps: int = 200
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    zeta_start: float = 1.0
    zeta_end: float = 0.1
    gamma: float = 200.0
    eta_r: float = 1000.0
    eta_t: float = 50.0
    cg_tol: float = 1e-8
    cg_max_iter: int = 200
    lipschitz_coil_init: float = 1.0
    lipschitz_motion_init: float = 10.0
    max_doublings: int = 20
    beta1: float = 0.5
    beta2: float = 0.9
    precond_eps: float = 1e-8
    dc_threshold: float = 0.75
    dc_window: int = 40
    prior: str = "quadratic"
    prior_lambda: float = 1.0
    noise_sigma: float = 1.0
    estimate_coils: bool = True
    estimate_motion: bool = True
    use_motion_regularization: bool = True
    use_preconditioner: bool = True
    fixed_coils: str = "true"
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raise ``ValueError`` for any out-of-range field."""
        self.noise_schedule()
        self.zeta_schedule()
        build_prior(self.prior, self.prior_lambda)
        for name in ("gamma", "eta_r", "eta_t"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("cg_tol", "lipschitz_coil_init", "lipschitz_motion_init", "precond_eps", "noise_sigma"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.cg_max_iter < 1 or self.max_doublings < 0:
            raise ValueError(f"cg_max_iter must be >= 1 and max_doublings >= 0, got {self.cg_max_iter}, {self.max_doublings}")
        if not self.dc_threshold > 0.0 or self.dc_window < 0:
            raise ValueError(f"dc_threshold must be > 0 and dc_window >= 0, got {self.dc_threshold}, {self.dc_window}")
        if self.fixed_coils not in FIXED_COIL_SOURCES:
            raise ValueError(f"fixed_coils must be one of {FIXED_COIL_SOURCES}, got {self.fixed_coils!r}")

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.num_steps, self.sigma_min, self.sigma_max, self.rho)

    def zeta_schedule(self) -> ZetaSchedule:
        return ZetaSchedule(self.zeta_start, self.zeta_end, self.num_steps)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class PreconditionerState:
    """Running first moment and belief (centred second moment) of the motion gradient."""

    g1: np.ndarray
    g2: np.ndarray
    k: int = 0
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8

    @classmethod
    def zeros(cls, num_states: int, beta1: float = 0.5, beta2: float = 0.9, eps: float = 1e-8) -> "PreconditionerState":
        return cls(np.zeros((num_states, 6)), np.zeros((num_states, 6)), 0, beta1, beta2, eps)

    def update(self, grad: np.ndarray) -> np.ndarray:
        """Fold in a new gradient and return the diagonal ``√(ĝ₂) + ε``."""
        self.k += 1
        self.g1 = self.beta1 * self.g1 + (1.0 - self.beta1) * grad
        self.g2 = self.beta2 * self.g2 + (1.0 - self.beta2) * (grad - self.g1) ** 2
        corrected = self.g2 / (1.0 - self.beta2**self.k)
        return np.sqrt(corrected) + self.eps


@dataclass
class SolverState:
    x: np.ndarray
    coils: np.ndarray
    coils_prev: np.ndarray
    motion: np.ndarray
    motion_prev: np.ndarray
    precond: PreconditionerState
    active: np.ndarray
    lipschitz_coil: float = 1.0
    lipschitz_motion: float = 10.0


@dataclass
class IterationDiagnostics:
    iteration: int
    sigma: float
    zeta: float
    data_fidelity: float
    lipschitz_coil: float
    lipschitz_motion: float
    dc: np.ndarray
    active_states: int


@dataclass
class ReconResult:
    image: np.ndarray
    coils: np.ndarray
    motion: MotionTrajectory
    diagnostics: List[IterationDiagnostics] = field(default_factory=list)
    cg_failures: int = 0
    backtracking_exhausted: int = 0
    runtime_s: float = 0.0

    def write_diagnostics_csv(self, path: Union[str, Path]) -> None:
        """One row per iteration; floats written with ``repr`` so reruns compare byte for byte."""
        num_states = self.motion.num_states
        header = ["iteration", "sigma", "zeta", "data_fidelity", "lipschitz_coil", "lipschitz_motion", "active_states"]
        header += [f"dc_{t}" for t in range(num_states)]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for d in self.diagnostics:
                row = [str(d.iteration)] + [
                    repr(float(value))
                    for value in (d.sigma, d.zeta, d.data_fidelity, d.lipschitz_coil, d.lipschitz_motion)
                ]
                row.append(str(d.active_states))
                row += [repr(float(value)) for value in d.dc]
                writer.writerow(row)


# --- steps -------------------------------------------------------------------


def estimate_coils_from_kspace(z: KSpaceSet, plan: SamplingPlan) -> np.ndarray:
    """Normalized coil-wise inverse DFT of the zero-filled data."""
    if z.data.size == 0:
        raise ValueError("Cannot estimate coil maps from empty measurements")
    return coil_normalize(zero_filled_coil_images(z, plan))


def initialize(z: KSpaceSet, plan: SamplingPlan, schedule: NoiseSchedule, seed: int = 0) -> SolverState:
    """Seeded noise image at ``σ_max``, zero-filled coil estimate and a zero trajectory."""
    if z.data.size == 0:
        raise ValueError("Cannot initialize from empty measurements")
    rng = np.random.default_rng(seed)
    shape = tuple(plan.shape)
    x = schedule.sigma_max * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    coils = estimate_coils_from_kspace(z, plan)
    motion = np.zeros((plan.num_times, 6))
    return SolverState(
        x=x,
        coils=coils,
        coils_prev=coils.copy(),
        motion=motion,
        motion_prev=motion.copy(),
        precond=PreconditionerState.zeros(plan.num_times),
        active=np.ones(plan.num_times, dtype=bool),
    )


def _finite(value: np.ndarray, iteration: int, quantity: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise SolverAbort(iteration, quantity)
    return value


def dps_image_step(
    x: np.ndarray,
    coils: np.ndarray,
    motion: np.ndarray,
    z: KSpaceSet,
    plan: SamplingPlan,
    sigma: float,
    sigma_next: float,
    step_weight: float,
    prior: ScorePrior,
    noise_sigma: float = 1.0,
    active: Optional[np.ndarray] = None,
    iteration: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Euler step of the probability-flow ODE from ``sigma`` to ``sigma_next`` plus the data correction.

    ``x̂₀ = denoise(x, σ)`` and
    ``x' = x + ((σ_next − σ)/σ)(x − x̂₀) − ζ Jᵀ ∇_x D(A(x̂₀, c, v), z)``
    where ``Jᵀ`` is the prior's transpose Jacobian at ``(x, σ)``.

    The driver counts iterations down, so the image entering iteration ``i``
    carries ``σ^i`` and leaves it at ``sigma_next = σ^{i−1}`` (0 after
    ``i = 0``). ``sigma_next < sigma`` always holds, which makes
    ``(σ_next − σ)/σ`` lie in ``[−1, 0)``: the step moves ``x`` towards
    ``x̂₀``. Pairing ``σ^i`` with ``σ^{i+1}`` instead would flip that sign and
    push ``x`` away from the denoised estimate.

    Returns:
        ``(x', x̂₀)``.
    """
    if not sigma > 0.0 or not 0.0 <= sigma_next < sigma:
        raise ValueError(f"Image step needs sigma > sigma_next >= 0, got {sigma}, {sigma_next}")
    denoised = _finite(prior.denoise(x, sigma), iteration, "denoised image")
    updated = x + ((sigma_next - sigma) / sigma) * (x - denoised)
    if step_weight != 0.0:
        evaluation = evaluate_fidelity(denoised, coils, motion, z, plan, noise_sigma, active, wrt=("x",))
        assert evaluation.grad_x is not None
        updated = updated - step_weight * prior.vjp(x, sigma, evaluation.grad_x)
    return _finite(updated, iteration, "image"), denoised


def _backtrack(
    objective,
    base_value: float,
    point: np.ndarray,
    grad: np.ndarray,
    metric: np.ndarray,
    lipschitz: float,
    max_doublings: int,
    what: str,
) -> Tuple[np.ndarray, float, bool]:
    """Find ``L`` with ``f(p − g/(L m)) <= f(p) − Σ g²/(2 L m)``, starting from ``L/2``.

    Returns the trial point, the accepted ``L`` and whether the doublings ran out.
    """
    lipschitz = lipschitz / 2.0
    grad_sq = np.abs(grad) ** 2
    for _ in range(max_doublings + 1):
        trial = point - grad / (lipschitz * metric)
        if objective(trial) <= base_value - 0.5 * float(np.sum(grad_sq / (lipschitz * metric))):
            return trial, lipschitz, False
        lipschitz *= 2.0
    lipschitz /= 2.0
    logger.warning(f"{what} backtracking exhausted {max_doublings} doublings; keeping L={lipschitz:.3e}")
    return point - grad / (lipschitz * metric), lipschitz, True


def coil_step(
    state: SolverState,
    denoised: np.ndarray,
    z: KSpaceSet,
    plan: SamplingPlan,
    beta: float,
    gamma: float,
    noise_sigma: float = 1.0,
    max_doublings: int = 20,
    iteration: int = 0,
) -> Tuple[np.ndarray, bool]:
    """Inertial proximal gradient step on the coil maps; updates ``state.lipschitz_coil``.

    Returns the new normalized maps and whether backtracking ran out of doublings.
    """
    extrapolated = state.coils + beta * (state.coils - state.coils_prev)
    evaluation = evaluate_fidelity(denoised, extrapolated, state.motion, z, plan, noise_sigma, state.active, wrt=("c",))
    grad = _finite(evaluation.grad_c, iteration, "coil gradient")

    def objective(c: np.ndarray) -> float:
        return evaluate_fidelity(denoised, c, state.motion, z, plan, noise_sigma, state.active).value

    trial, state.lipschitz_coil, exhausted = _backtrack(
        objective, evaluation.value, extrapolated, grad, np.ones(1), state.lipschitz_coil, max_doublings, "Coil"
    )
    coils = coil_normalize(coil_prox(trial, gamma, state.lipschitz_coil))
    return _finite(coils, iteration, "coil maps"), exhausted


@dataclass
class MotionStepResult:
    motion: np.ndarray
    backtracking_exhausted: bool
    cg_converged: bool


def motion_step(
    state: SolverState,
    denoised: np.ndarray,
    coils: np.ndarray,
    z: KSpaceSet,
    plan: SamplingPlan,
    beta: float,
    config: SolverConfig,
    iteration: int = 0,
) -> MotionStepResult:
    """Inertial preconditioned proximal gradient step on the trajectory.

    The diagonal metric is ``P = L · (√(ĝ₂) + ε)`` from the running gradient
    belief, or ``P = L`` with the preconditioner disabled; ``L`` is
    backtracked. The prox is skipped when motion regularization is off.
    """
    extrapolated = state.motion + beta * (state.motion - state.motion_prev)
    evaluation = evaluate_fidelity(
        denoised, coils, extrapolated, z, plan, config.noise_sigma, state.active, wrt=("v",)
    )
    grad = _finite(evaluation.grad_v, iteration, "motion gradient")
    diag = state.precond.update(grad)
    if not config.use_preconditioner:
        diag = np.ones_like(diag)

    def objective(v: np.ndarray) -> float:
        return evaluate_fidelity(denoised, coils, v, z, plan, config.noise_sigma, state.active).value

    trial, state.lipschitz_motion, exhausted = _backtrack(
        objective, evaluation.value, extrapolated, grad, diag, state.lipschitz_motion, config.max_doublings, "Motion"
    )
    converged = True
    motion = trial
    if config.use_motion_regularization:
        result = motion_prox(
            trial, config.eta_r, config.eta_t, state.lipschitz_motion * diag, config.cg_tol, config.cg_max_iter
        )
        motion = result.motion.params
        converged = result.converged
    return MotionStepResult(_finite(motion, iteration, "motion"), exhausted, converged)


def dc_reject(dc: np.ndarray, iteration: int, threshold: float = 0.75, final_window: int = 40) -> np.ndarray:
    """Active-state mask for ``iteration``: states with ``DC > threshold`` drop out inside the final window.

    If every state would be dropped, the lowest-DC state is kept.
    """
    dc = np.asarray(dc, dtype=np.float64)
    if iteration >= final_window:
        return np.ones(dc.shape, dtype=bool)
    active = dc <= threshold
    if not np.any(active):
        keep = int(np.argmin(dc))
        logger.warning(f"All {dc.size} motion states exceed DC {threshold} at iteration {iteration}; keeping state {keep}")
        active[keep] = True
    return active


# --- driver ------------------------------------------------------------------


def _resolve_coils(
    z: KSpaceSet, plan: SamplingPlan, config: SolverConfig, coils: Optional[Union[CoilSet, np.ndarray]]
) -> Optional[np.ndarray]:
    if config.estimate_coils:
        return None
    if config.fixed_coils == "zero_filled":
        return estimate_coils_from_kspace(z, plan)
    if coils is None:
        raise ValueError("Coil estimation is off and fixed_coils='true', but no coil maps were supplied")
    maps = coils.maps if isinstance(coils, CoilSet) else np.asarray(coils)
    if maps.shape[1:] != tuple(plan.shape) or maps.shape[0] != z.num_coils:
        raise ValueError(f"Supplied coil maps {maps.shape} do not match {z.num_coils} coils on {plan.shape}")
    return maps.astype(np.complex128)


def run(
    z: KSpaceSet,
    plan: SamplingPlan,
    config: SolverConfig,
    coils: Optional[Union[CoilSet, np.ndarray]] = None,
    prior: Optional[ScorePrior] = None,
) -> ReconResult:
    """Reconstruct image, coil maps and motion from multi-state k-space.

    Args:
        z: Measurements in plan order.
        plan: Sampling plan the measurements follow.
        config: Solver settings.
        coils: Fixed maps, used when coil estimation is off with ``fixed_coils="true"``.
        prior: Overrides the prior named in ``config``.

    Raises:
        ValueError: On inconsistent inputs.
        SolverAbort: If a non-finite quantity appears.
    """
    if z.num_times != plan.num_times or z.data.shape[1] != int(plan.offsets[-1]):
        raise ValueError(f"Measurements ({z.data.shape}, {z.num_times} states) do not match plan {plan.plan_id}")
    if z.plan_id and z.plan_id != plan.plan_id:
        raise ValueError(f"Measurements were acquired with plan {z.plan_id}, not {plan.plan_id}")
    started = time.perf_counter()
    schedule = config.noise_schedule()
    zeta_schedule = config.zeta_schedule()
    prior = prior if prior is not None else build_prior(config.prior, config.prior_lambda)
    num_steps = schedule.num_steps

    state = initialize(z, plan, schedule, config.seed)
    state.precond = PreconditionerState.zeros(plan.num_times, config.beta1, config.beta2, config.precond_eps)
    state.lipschitz_coil = config.lipschitz_coil_init
    state.lipschitz_motion = config.lipschitz_motion_init
    fixed = _resolve_coils(z, plan, config, coils)
    if fixed is not None:
        state.coils = fixed
        state.coils_prev = fixed.copy()

    result = ReconResult(state.x, state.coils, MotionTrajectory(state.motion))
    logger.info(
        f"Reconstruction: {num_steps} steps, {plan.num_times} states, {z.num_coils} coils, shape {tuple(plan.shape)}, "
        f"estimate_coils={config.estimate_coils}, estimate_motion={config.estimate_motion}"
    )

    for i in range(num_steps - 1, -1, -1):
        sigma = karras_sigma(i, schedule)
        sigma_next = karras_sigma(i - 1, schedule) if i > 0 else 0.0
        step_weight = zeta(i, zeta_schedule)
        beta = float(momentum_beta(i, num_steps))

        state.x, denoised = dps_image_step(
            state.x, state.coils, state.motion, z, plan, sigma, sigma_next, step_weight, prior,
            config.noise_sigma, state.active, i,
        )
        if config.estimate_coils:
            new_coils, exhausted = coil_step(
                state, denoised, z, plan, beta, config.gamma, config.noise_sigma, config.max_doublings, i
            )
            state.coils_prev, state.coils = state.coils, new_coils
            result.backtracking_exhausted += int(exhausted)
        if config.estimate_motion:
            step = motion_step(state, denoised, state.coils, z, plan, beta, config, i)
            state.motion_prev, state.motion = state.motion, step.motion
            result.backtracking_exhausted += int(step.backtracking_exhausted)
            result.cg_failures += int(not step.cg_converged)

        evaluation = evaluate_fidelity(denoised, state.coils, state.motion, z, plan, config.noise_sigma)
        dc = consistency_ratios(evaluation.residual_norms, z)
        _finite(dc, i, "data consistency")
        fidelity = 0.5 * float(np.sum(evaluation.residual_norms[state.active] ** 2)) / config.noise_sigma**2
        diagnostics = IterationDiagnostics(
            i, sigma, step_weight, fidelity, state.lipschitz_coil, state.lipschitz_motion, dc, int(state.active.sum())
        )
        result.diagnostics.append(diagnostics)
        logger.debug(
            f"iter {i}: sigma={sigma:.4g} zeta={step_weight:.4g} fidelity={fidelity:.6g} "
            f"L_c={state.lipschitz_coil:.3g} L_v={state.lipschitz_motion:.3g} "
            f"active={diagnostics.active_states} dc={np.array2string(dc, precision=3)}"
        )
        if i > 0:
            state.active = dc_reject(dc, i - 1, config.dc_threshold, config.dc_window)

    result.image = state.x
    result.coils = state.coils
    result.motion = MotionTrajectory(state.motion)
    result.runtime_s = time.perf_counter() - started
    logger.info(
        f"Reconstruction finished in {result.runtime_s:.1f} s; final fidelity "
        f"{result.diagnostics[-1].data_fidelity:.6g}, {result.cg_failures} CG non-convergences, "
        f"{result.backtracking_exhausted} exhausted backtracking searches"
    )
    return result

