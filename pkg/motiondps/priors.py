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

"""Image score priors, the coil Tikhonov prior and the motion curvature prior."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Union, runtime_checkable

import numpy as np
import scipy.fft
import scipy.sparse

from .motion import MotionTrajectory, second_difference
from .transforms import dirichlet_laplacian_eigenvalues, dst3, fft_workers, idst3, periodic_laplacian_eigenvalues
from .volume import CoilSet

logger = logging.getLogger(__name__)

PRIOR_NAMES = ("identity", "quadratic")


@runtime_checkable
class ScorePrior(Protocol):
    """What the solver needs from an image prior: a denoiser and its transpose Jacobian."""

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, sigma: float, u: np.ndarray) -> np.ndarray: ...


class IdentityScorePrior:
    """Flat prior: the denoiser returns its input."""

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        return np.array(x, dtype=np.complex128, copy=True)

    def vjp(self, x: np.ndarray, sigma: float, u: np.ndarray) -> np.ndarray:
        return np.array(u, dtype=np.complex128, copy=True)


@dataclass
class QuadraticScorePrior:
    """Gaussian smoothness prior with precision ``lam * L_per``.

    ``denoise(x, σ) = (I + σ² lam L_per)^{-1} x``, applied diagonally in the
    DFT domain, is the exact MMSE denoiser of that prior, so its Tweedie
    score is the exact noisy score. The filter is real and symmetric, hence
    ``vjp(x, σ, u) = denoise(u, σ)``.
    """

    lam: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lam) and self.lam >= 0.0):
            raise ValueError(f"Quadratic prior weight must be finite and >= 0, got {self.lam}")

    def transfer(self, shape: tuple, sigma: float) -> np.ndarray:
        return 1.0 / (1.0 + sigma**2 * self.lam * periodic_laplacian_eigenvalues(shape))

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x)
        if self.lam == 0.0:
            return np.array(x, dtype=np.complex128, copy=True)
        workers = fft_workers()
        spectrum = scipy.fft.fftn(x, norm="ortho", workers=workers) * self.transfer(x.shape, sigma)
        return scipy.fft.ifftn(spectrum, norm="ortho", workers=workers)

    def vjp(self, x: np.ndarray, sigma: float, u: np.ndarray) -> np.ndarray:
        return self.denoise(u, sigma)

    def energy(self, x: np.ndarray, sigma: float) -> float:
        """Smoothed quadratic ``½ Re<x, Q x>`` whose negative gradient is the Tweedie score."""
        x = np.asarray(x)
        mu = periodic_laplacian_eigenvalues(x.shape)
        weight = self.lam * mu / (1.0 + sigma**2 * self.lam * mu)
        spectrum = scipy.fft.fftn(x, norm="ortho", workers=fft_workers())
        return 0.5 * float(np.sum(weight * np.abs(spectrum) ** 2))


def build_prior(name: str, lam: float = 1.0) -> ScorePrior:
    if name == "identity":
        return IdentityScorePrior()
    if name == "quadratic":
        return QuadraticScorePrior(lam)
    raise ValueError(f"Unknown prior {name!r}; expected one of {PRIOR_NAMES}")


def tweedie_score(prior: ScorePrior, x: np.ndarray, sigma: float) -> np.ndarray:
    """``(denoise(x, σ) − x) / σ²``."""
    if not sigma > 0.0:
        raise ValueError(f"Tweedie score needs sigma > 0, got {sigma}")
    return (prior.denoise(x, sigma) - np.asarray(x)) / sigma**2


# --- coil prior --------------------------------------------------------------


@dataclass(frozen=True)
class CoilPriorConfig:
    gamma: float = 200.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError(f"Coil regularization weight must be finite and >= 0, got {self.gamma}")


def _coil_array(c: Union[CoilSet, np.ndarray]) -> np.ndarray:
    maps = c.maps if isinstance(c, CoilSet) else np.asarray(c)
    if maps.ndim != 4:
        raise ValueError(f"Coil maps must be (C, z, y, x), got shape {maps.shape}")
    return maps


def coil_reg_value(c: Union[CoilSet, np.ndarray], gamma: float, boundary: str = "dirichlet") -> float:
    """``(γ/2) Σ_j ‖D Re c_j‖² + ‖D Im c_j‖²`` with forward differences D.

    ``boundary="dirichlet"`` pads each axis with zeros on both ends, the
    operator diagonalized by :func:`coil_prox`; ``"interior"`` keeps only
    differences between grid neighbours.
    """
    if gamma < 0:
        raise ValueError(f"Coil regularization weight must be >= 0, got {gamma}")
    if boundary not in ("dirichlet", "interior"):
        raise ValueError(f"Unknown boundary {boundary!r}; expected 'dirichlet' or 'interior'")
    maps = _coil_array(c)
    total = 0.0
    for part in (maps.real, maps.imag):
        for axis in (1, 2, 3):
            if boundary == "dirichlet":
                pad = [(0, 0)] * 4
                pad[axis] = (1, 1)
                diffs = np.diff(np.pad(part, pad), axis=axis)
            else:
                diffs = np.diff(part, axis=axis)
            total += float(np.sum(diffs**2))
    return 0.5 * gamma * total


def coil_prox(w: Union[CoilSet, np.ndarray], gamma: float, lipschitz: float) -> np.ndarray:
    """Solve ``(γ DᵀD + L I) u = L w`` per coil and real/imaginary part via DST-I.

    Args:
        w: Coil maps ``(C, z, y, x)``.
        gamma: Tikhonov weight γ ≥ 0.
        lipschitz: Step constant L > 0.
    """
    if not lipschitz > 0.0:
        raise ValueError(f"Coil prox needs L > 0, got {lipschitz}")
    if gamma < 0:
        raise ValueError(f"Coil regularization weight must be >= 0, got {gamma}")
    maps = _coil_array(w)
    if gamma == 0.0:
        return np.array(maps, dtype=np.complex128, copy=True)
    gain = lipschitz / (gamma * dirichlet_laplacian_eigenvalues(maps.shape[1:]) + lipschitz)
    real = idst3(dst3(np.ascontiguousarray(maps.real)) * gain)
    imag = idst3(dst3(np.ascontiguousarray(maps.imag)) * gain)
    return real + 1j * imag


def coil_normalize(c: Union[CoilSet, np.ndarray]) -> np.ndarray:
    """Scale maps so ``Σ_c |c_c(p)|² = 1`` wherever the sum is nonzero; zero elsewhere."""
    maps = _coil_array(c)
    norm = np.sqrt(np.sum(maps.real**2 + maps.imag**2, axis=0))
    nonzero = norm > 0.0
    return np.where(nonzero[None], maps / np.where(nonzero, norm, 1.0)[None], 0.0).astype(np.complex128)


# --- motion prior ------------------------------------------------------------


@dataclass(frozen=True)
class MotionPriorConfig:
    eta_r: float = 1000.0
    eta_t: float = 50.0

    def __post_init__(self) -> None:
        for name in ("eta_r", "eta_t"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"Motion regularization weight {name} must be finite and >= 0, got {value}")

    def weights(self) -> np.ndarray:
        """Per-parameter weights in (t_z, t_y, t_x, r_z, r_y, r_x) order."""
        return np.array([self.eta_t] * 3 + [self.eta_r] * 3, dtype=np.float64)


def _params(v: Union[MotionTrajectory, np.ndarray]) -> np.ndarray:
    params = v.params if isinstance(v, MotionTrajectory) else np.asarray(v, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != 6:
        raise ValueError(f"Motion trajectory must be (T, 6), got shape {params.shape}")
    return params


def motion_reg_value(v: Union[MotionTrajectory, np.ndarray], eta_r: float, eta_t: float) -> float:
    """``½ Σ_t ‖W_η (v_{t+1} − 2 v_t + v_{t−1})‖²`` with weight η_t on translations, η_r on rotations."""
    weights = MotionPriorConfig(eta_r, eta_t).weights()
    d = second_difference(_params(v))
    return 0.5 * float(np.sum(weights[None, :] * d**2))


def second_difference_operator(num_states: int) -> scipy.sparse.csr_matrix:
    """Sparse ``(T−2) × T`` matrix with rows ``[.., 1, −2, 1, ..]``."""
    if num_states < 3:
        return scipy.sparse.csr_matrix((0, max(num_states, 0)))
    return scipy.sparse.diags(
        [1.0, -2.0, 1.0], [0, 1, 2], shape=(num_states - 2, num_states), format="csr"
    )


class ConjugateGradient:
    """Jacobi-preconditioned conjugate gradient for ``A x = b`` with SPD ``A``.

    Tracks the iterate with the smallest relative residual, which is what
    is returned when the iteration budget runs out.
    """

    def __init__(self, A: scipy.sparse.spmatrix, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int):
        self.A = A
        self.b = b
        self.x = x0.copy()
        self.tol = tol
        self.max_iter = max_iter
        self.inv_diag = 1.0 / A.diagonal()
        self.b_norm = float(np.linalg.norm(b))
        self.r = b - A @ self.x
        self.z = self.inv_diag * self.r
        self.p = self.z.copy()
        self.rz = float(self.r @ self.z)
        self.iter = 0
        self.resid = self._relative(self.r)
        self.best_x = self.x.copy()
        self.best_resid = self.resid

    def _relative(self, r: np.ndarray) -> float:
        return float(np.linalg.norm(r)) / self.b_norm if self.b_norm > 0 else float(np.linalg.norm(r))

    def update(self) -> None:
        Ap = self.A @ self.p
        pAp = float(self.p @ Ap)
        if pAp <= 0.0:
            self.max_iter = self.iter
            return
        alpha = self.rz / pAp
        self.x = self.x + alpha * self.p
        self.r = self.r - alpha * Ap
        self.z = self.inv_diag * self.r
        rz_new = float(self.r @ self.z)
        self.p = self.z + (rz_new / self.rz) * self.p
        self.rz = rz_new
        self.iter += 1
        self.resid = self._relative(self.r)
        if self.resid < self.best_resid:
            self.best_resid = self.resid
            self.best_x = self.x.copy()

    def done(self) -> bool:
        return self.resid <= self.tol or self.iter >= self.max_iter

    def run(self) -> np.ndarray:
        while not self.done():
            self.update()
        return self.best_x


@dataclass
class MotionProxResult:
    motion: MotionTrajectory
    converged: bool
    iterations: int
    residual: float


def motion_prox(
    w: Union[MotionTrajectory, np.ndarray],
    eta_r: float,
    eta_t: float,
    precond: np.ndarray,
    cg_tol: float = 1e-8,
    cg_max_iter: int = 200,
) -> MotionProxResult:
    """Weighted proximal map of the curvature prior.

    Solves ``(η LᵀL + P) v = P w`` by CG started at ``w``, where ``L`` is the
    second difference in time applied to each parameter, ``η`` the per-
    parameter weight and ``P`` a positive diagonal metric.

    Args:
        w: Point to project, ``(T, 6)``.
        eta_r: Rotation weight.
        eta_t: Translation weight.
        precond: Diagonal of ``P`` as ``(T, 6)`` or ``(6T,)``, strictly positive.
        cg_tol: Relative residual target.
        cg_max_iter: Iteration cap; on exhaustion the best iterate is returned with ``converged=False``.
    """
    params = _params(w)
    num_states = params.shape[0]
    diag = np.asarray(precond, dtype=np.float64).reshape(-1)
    if diag.size != params.size:
        raise ValueError(f"Preconditioner has {diag.size} entries, expected {params.size}")
    if not np.all(diag > 0.0) or not np.all(np.isfinite(diag)):
        raise ValueError("Preconditioner diagonal must be finite and strictly positive")
    weights = MotionPriorConfig(eta_r, eta_t).weights()
    if num_states < 3 or not np.any(weights > 0.0):
        return MotionProxResult(MotionTrajectory(params), True, 0, 0.0)
    L = second_difference_operator(num_states)
    system = scipy.sparse.kron(L.T @ L, scipy.sparse.diags(weights), format="csr") + scipy.sparse.diags(diag)
    solver = ConjugateGradient(system.tocsr(), diag * params.reshape(-1), params.reshape(-1), cg_tol, cg_max_iter)
    solution = solver.run()
    converged = solver.best_resid <= cg_tol
    if not converged:
        logger.warning(
            f"Motion prox CG stopped after {solver.iter} iterations at relative residual {solver.best_resid:.3e}"
        )
    return MotionProxResult(MotionTrajectory(solution.reshape(num_states, 6)), converged, solver.iter, solver.best_resid)


def motion_prox_objective(
    v: Union[MotionTrajectory, np.ndarray],
    w: Union[MotionTrajectory, np.ndarray],
    eta_r: float,
    eta_t: float,
    precond: np.ndarray,
) -> float:
    """``R_v(v) + ½ ‖v − w‖²_P``, the quantity :func:`motion_prox` minimizes."""
    diff = _params(v) - _params(w)
    return motion_reg_value(v, eta_r, eta_t) + 0.5 * float(np.sum(np.asarray(precond).reshape(diff.shape) * diff**2))
