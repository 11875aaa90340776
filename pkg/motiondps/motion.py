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

"""Rigid motion on SE(3): parameters, trilinear warping and trajectory simulation.

A state holds ``(t_z, t_y, t_x)`` in millimetres and ``(r_z, r_y, r_x)`` in
degrees. Rotations are intrinsic Z-Y-X Euler angles about the geometric
volume center, ``R = Rz @ Ry @ Rx``, acting on ``(z, y, x)`` voxel
coordinates. :func:`warp` pulls back: output voxel ``p`` samples the input
at ``Rᵀ(p - center - t) + center``, with zero outside the grid.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

PARAM_NAMES = ("t_z_mm", "t_y_mm", "t_x_mm", "r_z_deg", "r_y_deg", "r_x_deg")
DEG = np.pi / 180.0
GP_JITTER = 1e-8


@dataclass(frozen=True)
class MotionState:
    """One rigid pose: translations in mm, rotations in degrees, both (z, y, x)."""

    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        values = self.as_array()
        if values.shape != (6,) or not np.all(np.isfinite(values)):
            raise ValueError(f"MotionState needs six finite parameters, got {self.translation}, {self.rotation}")

    def as_array(self) -> np.ndarray:
        return np.asarray(tuple(self.translation) + tuple(self.rotation), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "MotionState":
        v = [float(a) for a in values]
        if len(v) != 6:
            raise ValueError(f"MotionState needs six parameters, got {len(v)}")
        return cls((v[0], v[1], v[2]), (v[3], v[4], v[5]))


StateLike = Union[MotionState, Sequence[float], np.ndarray]


def _as_params(state: StateLike) -> np.ndarray:
    if isinstance(state, MotionState):
        return state.as_array()
    values = np.asarray(state, dtype=np.float64)
    if values.shape != (6,) or not np.all(np.isfinite(values)):
        raise ValueError(f"Motion state must be six finite numbers, got {values}")
    return values


@dataclass
class MotionTrajectory:
    """T rigid states stored as a ``(T, 6)`` array in :data:`PARAM_NAMES` order."""

    params: np.ndarray

    def __post_init__(self) -> None:
        self.params = np.array(self.params, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[1] != 6 or self.params.shape[0] < 1:
            raise ValueError(f"Trajectory must be a (T, 6) array with T >= 1, got shape {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("Trajectory contains non-finite parameters")

    @classmethod
    def zeros(cls, num_states: int) -> "MotionTrajectory":
        return cls(np.zeros((num_states, 6)))

    @classmethod
    def from_states(cls, states: Iterable[MotionState]) -> "MotionTrajectory":
        return cls(np.stack([s.as_array() for s in states]))

    @property
    def num_states(self) -> int:
        return int(self.params.shape[0])

    @property
    def states(self) -> List[MotionState]:
        return [MotionState.from_array(row) for row in self.params]

    def relative_to_first(self) -> "MotionTrajectory":
        return MotionTrajectory(self.params - self.params[0])


@dataclass(frozen=True)
class SeverityLevel:
    max_translation_mm: float
    max_rotation_deg: float

    def __post_init__(self) -> None:
        if self.max_translation_mm < 0 or self.max_rotation_deg < 0:
            raise ValueError(f"Severity bounds must be nonnegative, got {self}")

    def scaled(self, factor: float) -> "SeverityLevel":
        return SeverityLevel(self.max_translation_mm * factor, self.max_rotation_deg * factor)


SEVERITY_LEVELS: Dict[str, SeverityLevel] = {
    "mild": SeverityLevel(3.0, 5.0),
    "moderate": SeverityLevel(6.0, 10.0),
    "severe": SeverityLevel(9.0, 15.0),
}


def severity_level(name: str) -> SeverityLevel:
    try:
        return SEVERITY_LEVELS[name]
    except KeyError as e:
        raise ValueError(f"Unknown motion severity {name!r}; expected one of {sorted(SEVERITY_LEVELS)}") from e


# --- rotations ---------------------------------------------------------------


def _axis_rotation(axis: int, angle_deg: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotation about volume axis ``axis`` (0=z, 1=y, 2=x) and its derivative per radian."""
    a = angle_deg * DEG
    c, s = np.cos(a), np.sin(a)
    if axis == 0:
        rot = [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]]
        der = [[0.0, 0.0, 0.0], [0.0, -s, c], [0.0, -c, -s]]
    elif axis == 1:
        rot = [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
        der = [[-s, 0.0, -c], [0.0, 0.0, 0.0], [c, 0.0, -s]]
    else:
        rot = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
        der = [[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]]
    return np.array(rot), np.array(der)


def rotation_matrix(angles_deg: Sequence[float]) -> Tuple[np.ndarray, List[np.ndarray]]:
    """``R = Rz Ry Rx`` and its partial derivatives with respect to each angle in degrees."""
    (rz, dz), (ry, dy), (rx, dx) = (_axis_rotation(i, angles_deg[i]) for i in range(3))
    rot = rz @ ry @ rx
    partials = [dz @ ry @ rx * DEG, rz @ dy @ rx * DEG, rz @ ry @ dx * DEG]
    return rot, partials


def volume_center(shape: Sequence[int]) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def se3_matrix(state: StateLike, shape: Sequence[int], spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Homogeneous 4×4 forward transform in voxel coordinates ``(z, y, x, 1)``.

    Rotation about the volume center followed by the translation, converted
    from millimetres to voxels with ``spacing``.
    """
    params = _as_params(state)
    rot, _ = rotation_matrix(params[3:])
    center = volume_center(shape)
    t_vox = params[:3] / np.asarray(spacing, dtype=np.float64)
    matrix = np.eye(4)
    matrix[:3, :3] = rot
    matrix[:3, 3] = center + t_vox - rot @ center
    return matrix


# --- trilinear pull-back -------------------------------------------------------


_CORNERS = [(dz, dy, dx) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


class Resampler:
    """Sample positions, interpolation stencil and geometry of one warp.

    Built once per state and reused for the forward sample, its transpose
    and the motion derivative, which all share the same stencil.
    """

    def __init__(self, shape: Sequence[int], spacing: Sequence[float], state: StateLike):
        self.shape = tuple(int(n) for n in shape)
        if len(self.shape) != 3:
            raise ValueError(f"warp expects a 3D volume, got shape {self.shape}")
        self.spacing = np.asarray(spacing, dtype=np.float64)
        params = _as_params(state)
        self.rot, self.rot_partials = rotation_matrix(params[3:])
        center = volume_center(self.shape)
        grid = np.indices(self.shape, dtype=np.float64).reshape(3, -1)
        self.rel = grid - (center + params[:3] / self.spacing)[:, None]
        q = self.rot.T @ self.rel + center[:, None]
        self.base = np.floor(q).astype(np.intp)
        self.frac = q - self.base
        self.size = grid.shape[1]
        self.flat = np.empty((8, self.size), dtype=np.intp)
        self.valid = np.empty((8, self.size), dtype=bool)
        self.weights = np.empty((8, self.size))
        for k, offset in enumerate(_CORNERS):
            flat, valid = self._locate(self.base, offset)
            w = np.ones(self.size)
            for axis, d in enumerate(offset):
                w *= self.frac[axis] if d else 1.0 - self.frac[axis]
            self.flat[k] = flat
            self.valid[k] = valid
            self.weights[k] = np.where(valid, w, 0.0)

    def _locate(self, base: np.ndarray, offset: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        coords = base + np.asarray(offset, dtype=np.intp)[:, None]
        valid = np.ones(coords.shape[1], dtype=bool)
        for axis, n in enumerate(self.shape):
            valid &= (coords[axis] >= 0) & (coords[axis] < n)
        clipped = [np.clip(coords[axis], 0, n - 1) for axis, n in enumerate(self.shape)]
        return np.ravel_multi_index(clipped, self.shape), valid

    def apply(self, x: np.ndarray) -> np.ndarray:
        flat_x = x.reshape(-1)
        out = self.weights[0] * flat_x[self.flat[0]]
        for k in range(1, 8):
            out = out + self.weights[k] * flat_x[self.flat[k]]
        return out.reshape(self.shape)

    def transpose(self, u: np.ndarray) -> np.ndarray:
        weighted = self.weights * u.reshape(1, -1)
        idx = self.flat.reshape(-1)
        real = np.bincount(idx, weights=weighted.real.reshape(-1), minlength=self.size)
        if not np.iscomplexobj(weighted):
            return real.reshape(self.shape)
        imag = np.bincount(idx, weights=weighted.imag.reshape(-1), minlength=self.size)
        return (real + 1j * imag).reshape(self.shape)

    def slopes(self, x: np.ndarray) -> np.ndarray:
        """Derivative of the interpolant along each sample coordinate, shape ``(3, D)``.

        At an exactly integer coordinate the two one-sided slopes are averaged.
        """
        flat_x = x.reshape(-1)
        v = np.where(self.valid, flat_x[self.flat], 0.0).reshape(2, 2, 2, self.size)
        fz, fy, fx = self.frac
        wz = np.stack([1.0 - fz, fz])
        wy = np.stack([1.0 - fy, fy])
        wx = np.stack([1.0 - fx, fx])
        out = np.empty((3, self.size), dtype=np.result_type(flat_x.dtype, np.float64))
        out[0] = np.einsum("yd,xd,yxd->d", wy, wx, v[1] - v[0])
        out[1] = np.einsum("zd,xd,zxd->d", wz, wx, v[:, 1] - v[:, 0])
        out[2] = np.einsum("zd,yd,zyd->d", wz, wy, v[:, :, 1] - v[:, :, 0])
        weights_other = {0: (wy, wx), 1: (wz, wx), 2: (wz, wy)}
        for axis in range(3):
            on_grid = np.flatnonzero(self.frac[axis] == 0.0)
            if on_grid.size == 0:
                continue
            wa, wb = (w[:, on_grid] for w in weights_other[axis])
            left = np.zeros(on_grid.size, dtype=out.dtype)
            for da in (0, 1):
                for db in (0, 1):
                    lo = [0, 0, 0]
                    others = [a for a in range(3) if a != axis]
                    lo[others[0]], lo[others[1]] = da, db
                    hi = list(lo)
                    lo[axis] = -1
                    flat_lo, valid_lo = self._locate(self.base[:, on_grid], lo)
                    flat_hi, valid_hi = self._locate(self.base[:, on_grid], hi)
                    diff = np.where(valid_hi, flat_x[flat_hi], 0.0) - np.where(valid_lo, flat_x[flat_lo], 0.0)
                    left += wa[da] * wb[db] * diff
            out[axis, on_grid] = 0.5 * (out[axis, on_grid] + left)
        return out

    def position_jacobian(self, direction: np.ndarray) -> np.ndarray:
        """Change of the sample positions for a parameter perturbation, shape ``(3, D)``."""
        dq = (-self.rot.T @ (direction[:3] / self.spacing))[:, None] * np.ones((1, self.size))
        for j in range(3):
            if direction[3 + j] != 0.0:
                dq = dq + direction[3 + j] * (self.rot_partials[j].T @ self.rel)
        return dq

    def parameter_gradient(self, h: np.ndarray) -> np.ndarray:
        """Pull a per-sample position cotangent ``h`` (3, D) back to the 6 parameters."""
        total = h.sum(axis=1)
        grad = np.empty(6)
        grad[:3] = -(self.rot @ total) / self.spacing
        for j in range(3):
            grad[3 + j] = float(np.sum(self.rel * (self.rot_partials[j] @ h)))
        return grad


def warp(x: np.ndarray, state: StateLike, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Pull-back trilinear resampling of ``x`` under ``state``; zero outside the grid."""
    x = np.asarray(x)
    return Resampler(x.shape, spacing, state).apply(x)


def warp_adjoint(u: np.ndarray, state: StateLike, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Transpose of the interpolation stencil applied to ``u`` (Wᵀu for fixed state)."""
    u = np.asarray(u)
    return Resampler(u.shape, spacing, state).transpose(u)


def warp_vjp(
    x: np.ndarray,
    state: StateLike,
    cotangent: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> Tuple[np.ndarray, np.ndarray]:
    """Adjoint of the linearization of :func:`warp` at ``(x, state)``.

    Uses the real inner product ``Re<a, b>`` so that for a real loss ``f``
    with ``df/d(warp) = cotangent`` the outputs are ``df/dx`` (conjugate
    convention) and ``df/ds``.

    Returns:
        ``(grad_x, grad_s)`` with ``grad_s`` ordered as :data:`PARAM_NAMES`.
    """
    x = np.asarray(x)
    cotangent = np.asarray(cotangent)
    sampler = Resampler(x.shape, spacing, state)
    grad_x = sampler.transpose(cotangent)
    slopes = sampler.slopes(x)
    h = np.real(np.conj(cotangent.reshape(1, -1)) * slopes)
    return grad_x, sampler.parameter_gradient(h)


def warp_jvp(
    x: np.ndarray,
    state: StateLike,
    dx: np.ndarray,
    ds: Sequence[float],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> np.ndarray:
    """Linearization of :func:`warp` at ``(x, state)`` applied to ``(dx, ds)``."""
    x = np.asarray(x)
    sampler = Resampler(x.shape, spacing, state)
    dq = sampler.position_jacobian(np.asarray(ds, dtype=np.float64))
    moved = np.sum(sampler.slopes(x) * dq, axis=0).reshape(sampler.shape)
    return sampler.apply(np.asarray(dx)) + moved


# --- trajectories --------------------------------------------------------------


def second_difference(v: Union[MotionTrajectory, np.ndarray]) -> np.ndarray:
    """Rows ``v[t+1] - 2 v[t] + v[t-1]``; empty ``(0, 6)`` when fewer than three states."""
    params = v.params if isinstance(v, MotionTrajectory) else np.asarray(v, dtype=np.float64)
    if params.shape[0] < 3:
        return np.zeros((0, params.shape[1]))
    return params[2:] - 2.0 * params[1:-1] + params[:-2]


def _rbf_cholesky(num_states: int, lengthscale: float) -> np.ndarray:
    t = np.arange(1, num_states + 1, dtype=np.float64)
    gram = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * lengthscale**2))
    jitter = GP_JITTER
    while True:
        try:
            return scipy.linalg.cholesky(gram + jitter * np.eye(num_states), lower=True)
        except np.linalg.LinAlgError:
            if jitter >= 1e-4:
                raise
            jitter *= 10.0
            logger.warning(f"RBF Gram matrix not positive definite, retrying with jitter {jitter:g}")


def simulate_gp_trajectory(
    num_states: int,
    level: SeverityLevel,
    lengthscale: Optional[float] = None,
    seed: int = 0,
    random_amplitude: bool = False,
) -> MotionTrajectory:
    """Smooth zero-start trajectory from an RBF Gaussian process.

    Each component is an independent GP draw on time indices ``1..T``
    shifted so the first state is zero and rescaled so its max-abs equals
    the severity bound (times a uniform factor in [0.5, 1] when
    ``random_amplitude`` is set).

    Args:
        num_states: Number of motion states T (at least 2).
        level: Translation and rotation bounds.
        lengthscale: RBF lengthscale in time-index units, default ``T / 10``.
        seed: Seed of the root ``SeedSequence``; every component uses its own child stream.
        random_amplitude: Draw per-component amplitude fractions.

    Raises:
        ValueError: If ``num_states < 2`` or ``lengthscale <= 0``.
    """
    if num_states < 2:
        raise ValueError(f"GP trajectories need at least 2 states, got {num_states}")
    ell = num_states / 10.0 if lengthscale is None else float(lengthscale)
    if not ell > 0:
        raise ValueError(f"GP lengthscale must be positive, got {lengthscale}")
    chol = _rbf_cholesky(num_states, ell)
    streams = np.random.SeedSequence(seed).spawn(7)
    bounds = [level.max_translation_mm] * 3 + [level.max_rotation_deg] * 3
    amplitude = np.ones(6)
    if random_amplitude:
        amplitude = np.random.default_rng(streams[6]).uniform(0.5, 1.0, size=6)
    params = np.zeros((num_states, 6))
    for j in range(6):
        sample = chol @ np.random.default_rng(streams[j]).standard_normal(num_states)
        sample = sample - sample[0]
        peak = np.max(np.abs(sample))
        if peak > 0.0 and bounds[j] > 0.0:
            params[:, j] = (sample / peak) * (bounds[j] * amplitude[j])
    return MotionTrajectory(params)


def save_trajectory_csv(v: MotionTrajectory, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(("time_index",) + PARAM_NAMES)
        for t, row in enumerate(v.params, start=1):
            writer.writerow([t] + [repr(float(a)) for a in row])


def load_trajectory_csv(path: Union[str, Path]) -> MotionTrajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trajectory file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != ("time_index",) + PARAM_NAMES:
            raise ValueError(f"{path}: unexpected trajectory header {header}")
        rows = [[float(a) for a in row[1:]] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: trajectory has no states")
    return MotionTrajectory(np.asarray(rows))
