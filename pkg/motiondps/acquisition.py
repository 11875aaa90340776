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

"""Sampling masks, shot orderings and the motion-aware multi-coil forward model.

Masks live on the 2D phase-encode grid; every mask-on line is acquired in
full along the readout axis. A :class:`SamplingPlan` partitions the lines
into T time groups, one per motion state, and maps each group to flat
indices of the 3D k-space grid.

For group ``t`` the forward model is ``z_t = M_t F(c * W(x, v_t))``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .motion import MotionTrajectory, Resampler, StateLike
from .transforms import fft3, ifft3
from .volume import CoilSet, KSpaceSet

logger = logging.getLogger(__name__)

ORDERING_SCHEMES = ("linear_circular", "interleaved_center_first", "centric", "random")
PLAN_SCHEMA = 1

CoilsLike = Union[CoilSet, np.ndarray]
TrajectoryLike = Union[MotionTrajectory, np.ndarray]


class MaskDesignError(ValueError):
    """Raised when a sampling mask cannot meet its requested density."""


def pe_axes(readout_axis: int) -> Tuple[int, int]:
    if readout_axis not in (0, 1, 2):
        raise ValueError(f"Readout axis must be 0, 1 or 2, got {readout_axis}")
    a, b = (axis for axis in range(3) if axis != readout_axis)
    return a, b


# --- masks -------------------------------------------------------------------


def _check_mask_args(pe_shape: Sequence[int], R: float, acl_fraction: float) -> Tuple[int, int]:
    if len(pe_shape) != 2 or any(int(n) < 1 for n in pe_shape):
        raise ValueError(f"Phase-encode shape must be two positive extents, got {tuple(pe_shape)}")
    if not R >= 1.0:
        raise ValueError(f"Acceleration factor must be >= 1, got {R}")
    if not 0.0 <= acl_fraction < 1.0:
        raise ValueError(f"ACL fraction must lie in [0, 1), got {acl_fraction}")
    return int(pe_shape[0]), int(pe_shape[1])


def acl_region(pe_shape: Sequence[int], acl_fraction: float) -> np.ndarray:
    """Centered rectangle covering about ``acl_fraction`` of the phase-encode grid."""
    mask = np.zeros(tuple(int(n) for n in pe_shape), dtype=bool)
    if acl_fraction <= 0.0:
        return mask
    bounds = []
    for n in mask.shape:
        side = min(n, max(1, int(round(n * np.sqrt(acl_fraction)))))
        start = n // 2 - side // 2
        bounds.append(slice(start, start + side))
    mask[tuple(bounds)] = True
    return mask


def _line_budget(total: int, R: float) -> int:
    return int(round(total / R))


def make_full_mask(pe_shape: Sequence[int]) -> np.ndarray:
    return np.ones(tuple(int(n) for n in pe_shape), dtype=bool)


def make_cartesian_mask(pe_shape: Sequence[int], R: float, acl_fraction: float = 0.04, seed: int = 0) -> np.ndarray:
    """Central ACL block plus uniformly random lines, ``round(total / R)`` lines in all.

    Raises:
        ValueError: On invalid arguments or when the ACL block alone exceeds the budget.
    """
    ny, nx = _check_mask_args(pe_shape, R, acl_fraction)
    acl = acl_region((ny, nx), acl_fraction)
    budget = _line_budget(ny * nx, R)
    n_acl = int(acl.sum())
    if n_acl > budget:
        raise ValueError(f"ACL block of {n_acl} lines exceeds the budget of {budget} lines at R={R}")
    rng = np.random.default_rng(seed)
    candidates = np.flatnonzero(~acl.reshape(-1))
    chosen = rng.choice(candidates, size=budget - n_acl, replace=False)
    mask = acl.reshape(-1).copy()
    mask[chosen] = True
    return mask.reshape(ny, nx)


def _disk_offsets(radius_sq: int) -> np.ndarray:
    reach = int(np.ceil(np.sqrt(radius_sq)))
    dy, dx = np.mgrid[-reach : reach + 1, -reach : reach + 1]
    return (dy * dy + dx * dx < radius_sq).astype(bool)


def _throw_darts(
    pe_shape: Tuple[int, int], radius_sq: int, order: np.ndarray, limit: Optional[int] = None
) -> np.ndarray:
    """Greedy dart throwing: accept a candidate if no accepted point lies closer than the radius."""
    ny, nx = pe_shape
    disk = _disk_offsets(radius_sq)
    reach = disk.shape[0] // 2
    taken = np.zeros((ny + 2 * reach, nx + 2 * reach), dtype=bool)
    count = 0
    for flat in order:
        iy, ix = divmod(int(flat), nx)
        window = taken[iy : iy + 2 * reach + 1, ix : ix + 2 * reach + 1]
        if np.any(window & disk):
            continue
        taken[iy + reach, ix + reach] = True
        count += 1
        if limit is not None and count >= limit:
            break
    return taken[reach : reach + ny, reach : reach + nx]


@dataclass
class PoissonDiscDesign:
    mask: np.ndarray
    radius: float
    target: int


def design_poisson_disc_mask(
    pe_shape: Sequence[int], R: float, acl_fraction: float = 0.04, seed: int = 0
) -> PoissonDiscDesign:
    """Poisson-disc mask with a bisected radius; see :func:`make_poisson_disc_mask`."""
    ny, nx = _check_mask_args(pe_shape, R, acl_fraction)
    acl = acl_region((ny, nx), acl_fraction)
    target = _line_budget(ny * nx, R)
    n_acl = int(acl.sum())
    needed = target - n_acl
    if needed < 0:
        raise ValueError(f"ACL block of {n_acl} lines exceeds the budget of {target} lines at R={R}")
    order = np.random.default_rng(seed).permutation(np.flatnonzero(~acl.reshape(-1)))
    if needed == 0:
        return PoissonDiscDesign(acl, float("inf"), target)

    # The accept test only changes when r² crosses a sum of two squares. Beyond
    # 3·sqrt(area / needed) a disc packing cannot hold `needed` points.
    reach = min(max(ny, nx), int(np.ceil(3.0 * np.sqrt(ny * nx / needed))) + 2)
    squares = np.arange(reach + 1) ** 2
    radii_sq = np.unique((squares[:, None] + squares[None, :]).reshape(-1))
    radii_sq = radii_sq[radii_sq >= 1]

    def count(radius_sq: int) -> int:
        return int(_throw_darts((ny, nx), radius_sq, order).sum())

    lo, hi = 0, len(radii_sq) - 1
    if count(int(radii_sq[lo])) < needed:
        achieved = (count(int(radii_sq[lo])) + n_acl) / (ny * nx)
        raise MaskDesignError(f"Poisson-disc bisection failed to bracket R={R}: achieved density {achieved:.4f}")
    if count(int(radii_sq[hi])) >= needed:
        lo = hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(int(radii_sq[mid])) >= needed:
            lo = mid
        else:
            hi = mid
    radius_sq = int(radii_sq[lo])
    darts = _throw_darts((ny, nx), radius_sq, order, limit=needed)
    mask = acl | darts
    achieved = mask.sum()
    if abs(achieved - target) > 0.02 * target:
        raise MaskDesignError(
            f"Poisson-disc mask reached {achieved} lines, outside 2% of the {target} needed for R={R}"
        )
    logger.debug(f"Poisson-disc mask: radius {np.sqrt(radius_sq):.3f}, {achieved} of {ny * nx} lines")
    return PoissonDiscDesign(mask, float(np.sqrt(radius_sq)), target)


def make_poisson_disc_mask(pe_shape: Sequence[int], R: float, acl_fraction: float = 0.04, seed: int = 0) -> np.ndarray:
    """Dart-throwing Poisson-disc mask with a central ACL block.

    The largest radius whose full pass still reaches ``round(total / R)``
    lines is found by bisection; throwing then stops at that count, so
    non-ACL points keep a pairwise distance of at least the radius.

    Raises:
        MaskDesignError: If no radius reaches the requested density.
    """
    return design_poisson_disc_mask(pe_shape, R, acl_fraction, seed).mask


# --- plans -------------------------------------------------------------------


def _rle_encode(mask: np.ndarray) -> List[int]:
    flat = mask.reshape(-1).astype(np.int8)
    runs: List[int] = []
    current, length = 0, 0
    for value in flat:
        if value == current:
            length += 1
        else:
            runs.append(length)
            current, length = int(value), 1
    runs.append(length)
    return runs


def _rle_decode(runs: Sequence[int], shape: Sequence[int]) -> np.ndarray:
    values = np.zeros(int(sum(runs)), dtype=bool)
    pos, value = 0, False
    for length in runs:
        values[pos : pos + int(length)] = value
        pos += int(length)
        value = not value
    if values.size != int(np.prod(shape)):
        raise ValueError(f"Run-length mask encodes {values.size} entries, shape {tuple(shape)} needs {np.prod(shape)}")
    return values.reshape(tuple(shape))


@dataclass
class SamplingPlan:
    """Mask plus the time-ordered partition of its lines into motion states.

    ``groups[t]`` lists flat phase-encode line indices in acquisition
    order; ``T = shots * states_per_shot``.
    """

    shape: Tuple[int, int, int]
    mask: np.ndarray
    groups: List[np.ndarray]
    shots: int
    states_per_shot: int = 1
    readout_axis: int = 0
    scheme: str = "linear_circular"
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.shape = tuple(int(n) for n in self.shape)  # type: ignore[assignment]
        self.spacing = tuple(float(s) for s in self.spacing)  # type: ignore[assignment]
        self.mask = np.asarray(self.mask, dtype=bool)
        self.groups = [np.asarray(g, dtype=np.int64) for g in self.groups]
        a, b = pe_axes(self.readout_axis)
        if len(self.shape) != 3 or self.mask.shape != (self.shape[a], self.shape[b]):
            raise ValueError(f"Mask shape {self.mask.shape} does not match phase-encode axes of volume {self.shape}")
        if len(self.groups) != self.shots * self.states_per_shot:
            raise ValueError(
                f"Plan has {len(self.groups)} groups, expected shots*states_per_shot = "
                f"{self.shots * self.states_per_shot}"
            )
        joined = np.concatenate(self.groups) if self.groups else np.zeros(0, dtype=np.int64)
        support = np.flatnonzero(self.mask.reshape(-1))
        if joined.size != np.unique(joined).size:
            raise ValueError("Plan groups are not pairwise disjoint")
        if not np.array_equal(np.sort(joined), support):
            raise ValueError("Union of plan groups differs from the mask support")

    @property
    def pe_shape(self) -> Tuple[int, int]:
        return tuple(int(n) for n in self.mask.shape)  # type: ignore[return-value]

    @property
    def readout_length(self) -> int:
        return self.shape[self.readout_axis]

    @property
    def num_times(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> np.ndarray:
        """Samples per coil for each time group."""
        return np.array([g.size * self.readout_length for g in self.groups], dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(np.int64)

    @cached_property
    def _index_table(self) -> List[np.ndarray]:
        a, b = pe_axes(self.readout_axis)
        readout = np.arange(self.readout_length)
        table = []
        for lines in self.groups:
            pa, pb = np.unravel_index(lines, self.pe_shape)
            coords: List[np.ndarray] = [np.empty(0, dtype=np.int64)] * 3
            coords[self.readout_axis] = np.tile(readout, lines.size)
            coords[a] = np.repeat(pa, self.readout_length)
            coords[b] = np.repeat(pb, self.readout_length)
            indices = np.ravel_multi_index(coords, self.shape)
            indices.setflags(write=False)
            table.append(indices)
        return table

    def sample_indices(self, t: int) -> np.ndarray:
        """Flat indices into the 3D k-space grid for group ``t``, line by line."""
        if not 0 <= t < self.num_times:
            raise ValueError(f"Time index {t} out of range for {self.num_times} states")
        return self._index_table[t]

    def shot_of(self, t: int) -> int:
        return t // self.states_per_shot

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": PLAN_SCHEMA,
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "readout_axis": self.readout_axis,
            "mask_rle": _rle_encode(self.mask),
            "groups": [[int(i) for i in g] for g in self.groups],
            "shots": self.shots,
            "states_per_shot": self.states_per_shot,
            "scheme": self.scheme,
            "seed": self.seed,
            "metadata": self.metadata,
        }

    @cached_property
    def plan_id(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplingPlan":
        if data.get("schema") != PLAN_SCHEMA:
            raise ValueError(f"Unsupported sampling plan schema {data.get('schema')!r}")
        shape = tuple(data["shape"])
        readout_axis = int(data["readout_axis"])
        a, b = pe_axes(readout_axis)
        return cls(
            shape=shape,  # type: ignore[arg-type]
            mask=_rle_decode(data["mask_rle"], (shape[a], shape[b])),
            groups=[np.asarray(g, dtype=np.int64) for g in data["groups"]],
            shots=int(data["shots"]),
            states_per_shot=int(data["states_per_shot"]),
            readout_axis=readout_axis,
            scheme=data.get("scheme", "linear_circular"),
            spacing=tuple(data.get("spacing", (1.0, 1.0, 1.0))),  # type: ignore[arg-type]
            seed=int(data.get("seed", 0)),
            metadata=dict(data.get("metadata", {})),
        )

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SamplingPlan":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Sampling plan not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ValueError(f"Failed to load sampling plan {path}: {e}") from e


def _acquisition_sequence(mask: np.ndarray, scheme: str, seed: int) -> np.ndarray:
    ny, nx = mask.shape
    lines = np.flatnonzero(mask.reshape(-1))
    cy, cx = ny // 2, nx // 2
    py, px = np.divmod(lines, nx)
    dist = (py - cy) ** 2 + (px - cx) ** 2
    if scheme == "linear_circular":
        start = int(np.searchsorted(lines, cy * nx + cx))
        return np.roll(lines, -start)
    if scheme == "centric":
        return lines[np.lexsort((lines, dist))]
    if scheme == "random":
        first = int(np.lexsort((lines, dist))[0])
        rest = np.delete(lines, first)
        return np.concatenate([[lines[first]], np.random.default_rng(seed).permutation(rest)])
    raise ValueError(f"Unknown ordering scheme {scheme!r}; expected one of {ORDERING_SCHEMES}")


def _central_block(mask: np.ndarray) -> np.ndarray:
    """Boolean flags over the acquired lines marking the central 3×3 phase-encode block."""
    ny, nx = mask.shape
    py, px = np.divmod(np.flatnonzero(mask.reshape(-1)), nx)
    return (np.abs(py - ny // 2) <= 1) & (np.abs(px - nx // 2) <= 1)


def _interleaved_shots(mask: np.ndarray, shots: int) -> List[np.ndarray]:
    """Central 3×3 block opens shot 1; remaining lines are dealt round-robin in raster order."""
    lines = np.flatnonzero(mask.reshape(-1))
    central = _central_block(mask)
    sizes = [len(part) for part in np.array_split(lines, shots)]
    if central.sum() > sizes[0]:
        raise ValueError(f"Central 3x3 block ({central.sum()} lines) does not fit a shot of {sizes[0]} lines")
    buckets: List[List[int]] = [list(lines[central])] + [[] for _ in range(shots - 1)]
    s = 0
    for line in lines[~central]:
        while len(buckets[s]) >= sizes[s]:
            s = (s + 1) % shots
        buckets[s].append(int(line))
        s = (s + 1) % shots
    return [np.asarray(b, dtype=np.int64) for b in buckets]


def make_ordering(
    mask: np.ndarray,
    scheme: str,
    shots: int,
    states_per_shot: int = 1,
    seed: int = 0,
    volume_shape: Optional[Sequence[int]] = None,
    readout_axis: int = 0,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> SamplingPlan:
    """Order mask lines in time, split them into shots and each shot into states.

    Shots and states are contiguous balanced splits of the acquisition
    order, so group sizes differ by at most one line.

    Args:
        mask: Boolean phase-encode mask.
        scheme: One of :data:`ORDERING_SCHEMES`.
        shots: Number of shots S.
        states_per_shot: Motion states per shot n (intra-shot motion when > 1).
        seed: Seed of the ``random`` scheme.
        volume_shape: Full 3D grid; defaults to a single readout sample.
        readout_axis: Fully sampled axis of ``volume_shape``.
        spacing: Voxel spacing in mm, used to convert motion translations.

    Raises:
        ValueError: If ``shots`` exceeds the number of lines or the states cannot all be non-empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"Mask must be 2D over the phase-encode axes, got shape {mask.shape}")
    if volume_shape is None:
        shape = [0, 0, 0]
        a, b = pe_axes(readout_axis)
        shape[readout_axis], shape[a], shape[b] = 1, mask.shape[0], mask.shape[1]
        volume_shape = shape
    on_count = int(mask.sum())
    if shots < 1 or shots > on_count:
        raise ValueError(f"Cannot split {on_count} acquired lines into {shots} shots")
    if states_per_shot < 1:
        raise ValueError(f"states_per_shot must be >= 1, got {states_per_shot}")
    if shots * states_per_shot > on_count:
        raise ValueError(f"{shots * states_per_shot} motion states exceed the {on_count} acquired lines")
    if scheme == "interleaved_center_first":
        shot_lines = _interleaved_shots(mask, shots)
    else:
        shot_lines = np.array_split(_acquisition_sequence(mask, scheme, seed), shots)
    groups = [part for lines in shot_lines for part in np.array_split(lines, states_per_shot)]
    if scheme == "interleaved_center_first":
        central_lines = np.flatnonzero(mask.reshape(-1))[_central_block(mask)]
        if not np.all(np.isin(central_lines, groups[0])):
            raise ValueError("Central 3x3 block does not fit into the first motion state; use fewer states per shot")
    return SamplingPlan(
        shape=tuple(volume_shape),  # type: ignore[arg-type]
        mask=mask,
        groups=groups,
        shots=shots,
        states_per_shot=states_per_shot,
        readout_axis=readout_axis,
        scheme=scheme,
        spacing=tuple(spacing),  # type: ignore[arg-type]
        seed=seed,
    )


# --- forward model -------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Circular complex Gaussian k-space noise with total standard deviation ``sigma``."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sigma >= 0.0:
            raise ValueError(f"Noise sigma must be >= 0, got {self.sigma}")

    @classmethod
    def from_snr(cls, signal: np.ndarray, snr_db: float, seed: int = 0) -> "NoiseModel":
        rms = float(np.sqrt(np.mean(np.abs(signal) ** 2)))
        return cls(rms / 10.0 ** (snr_db / 20.0), seed)


def _maps(c: CoilsLike) -> np.ndarray:
    return c.maps if isinstance(c, CoilSet) else np.asarray(c)


def _params(v: TrajectoryLike) -> np.ndarray:
    return v.params if isinstance(v, MotionTrajectory) else np.asarray(v, dtype=np.float64).reshape(-1, 6)


def _check_operands(x: np.ndarray, maps: np.ndarray, plan: SamplingPlan) -> None:
    if x.shape != plan.shape:
        raise ValueError(f"Image shape {x.shape} does not match plan shape {plan.shape}")
    if maps.ndim != 4 or maps.shape[1:] != plan.shape:
        raise ValueError(f"Coil maps of shape {maps.shape} do not match plan shape {plan.shape}")


def _active_states(active: Optional[np.ndarray], num_times: int) -> np.ndarray:
    if active is None:
        return np.ones(num_times, dtype=bool)
    active = np.asarray(active, dtype=bool)
    if active.shape != (num_times,):
        raise ValueError(f"Active-state mask must have {num_times} entries, got {active.shape}")
    return active


def forward_at_t(x: np.ndarray, c: CoilsLike, v_t: StateLike, plan: SamplingPlan, t: int) -> np.ndarray:
    """Samples of time group ``t`` for every coil, shape ``(C, K_t)``."""
    x = np.asarray(x)
    maps = _maps(c)
    _check_operands(x, maps, plan)
    indices = plan.sample_indices(t)
    warped = Resampler(plan.shape, plan.spacing, v_t).apply(x)
    return fft3(maps * warped[None]).reshape(maps.shape[0], -1)[:, indices]


def forward_full(x: np.ndarray, c: CoilsLike, v: TrajectoryLike, plan: SamplingPlan) -> KSpaceSet:
    params = _params(v)
    if params.shape[0] != plan.num_times:
        raise ValueError(f"Trajectory has {params.shape[0]} states but the plan defines {plan.num_times}")
    parts = [forward_at_t(x, c, params[t], plan, t) for t in range(plan.num_times)]
    return KSpaceSet(np.concatenate(parts, axis=1), plan.offsets, plan.plan_id)


def _scatter(y_t: np.ndarray, plan: SamplingPlan, t: int) -> np.ndarray:
    grid = np.zeros((y_t.shape[0], int(np.prod(plan.shape))), dtype=np.complex128)
    grid[:, plan.sample_indices(t)] = y_t
    return grid.reshape((y_t.shape[0],) + plan.shape)


def adjoint_at_t(y_t: np.ndarray, c: CoilsLike, v_t: StateLike, plan: SamplingPlan, t: int) -> np.ndarray:
    maps = _maps(c)
    combined = np.sum(np.conj(maps) * ifft3(_scatter(np.asarray(y_t), plan, t)), axis=0)
    return Resampler(plan.shape, plan.spacing, v_t).transpose(combined)


def adjoint_full(
    z: KSpaceSet, c: CoilsLike, v: TrajectoryLike, plan: SamplingPlan, active: Optional[np.ndarray] = None
) -> np.ndarray:
    """Exact adjoint of :func:`forward_full`, accumulated over t in increasing order."""
    params = _params(v)
    if params.shape[0] != plan.num_times or z.num_times != plan.num_times:
        raise ValueError(
            f"Trajectory ({params.shape[0]}) and data ({z.num_times}) must both have {plan.num_times} states"
        )
    active = _active_states(active, plan.num_times)
    out = np.zeros(plan.shape, dtype=np.complex128)
    for t in range(plan.num_times):
        if active[t]:
            out += adjoint_at_t(z.group(t), c, params[t], plan, t)
    return out


@dataclass
class FidelityEvaluation:
    """Value and requested gradients of ``(1/2σ²)‖A(x, c, v) − z‖²``."""

    value: float
    residual_norms: np.ndarray
    grad_x: Optional[np.ndarray] = None
    grad_c: Optional[np.ndarray] = None
    grad_v: Optional[np.ndarray] = None


def evaluate_fidelity(
    x: np.ndarray,
    c: CoilsLike,
    v: TrajectoryLike,
    z: KSpaceSet,
    plan: SamplingPlan,
    sigma: float = 1.0,
    active: Optional[np.ndarray] = None,
    wrt: Iterable[str] = (),
) -> FidelityEvaluation:
    """Data fidelity and any subset of its gradients in one pass over the states.

    Gradients use the conjugate convention: for complex ``x`` the returned
    array is ``∂f/∂Re x + i ∂f/∂Im x``, so ``x - step * grad`` descends.

    Args:
        wrt: Any of ``"x"``, ``"c"``, ``"v"``.
        active: Boolean mask of states included in the sum (default all).

    Raises:
        ValueError: If ``sigma <= 0``, shapes disagree or ``wrt`` is unknown.
    """
    if not sigma > 0.0:
        raise ValueError(f"Data fidelity needs sigma > 0, got {sigma}")
    wanted = set(wrt)
    if not wanted <= {"x", "c", "v"}:
        raise ValueError(f"Unknown gradient targets {sorted(wanted - {'x', 'c', 'v'})}")
    x = np.asarray(x)
    maps = _maps(c)
    params = _params(v)
    _check_operands(x, maps, plan)
    if params.shape[0] != plan.num_times or z.num_times != plan.num_times:
        raise ValueError(
            f"Trajectory ({params.shape[0]}) and data ({z.num_times}) must both have {plan.num_times} states"
        )
    active = _active_states(active, plan.num_times)
    num_coils = maps.shape[0]
    scale = 1.0 / sigma**2
    value = 0.0
    norms = np.zeros(plan.num_times)
    grad_x = np.zeros(plan.shape, dtype=np.complex128) if "x" in wanted else None
    grad_c = np.zeros(maps.shape, dtype=np.complex128) if "c" in wanted else None
    grad_v = np.zeros((plan.num_times, 6)) if "v" in wanted else None
    for t in range(plan.num_times):
        if not active[t]:
            continue
        sampler = Resampler(plan.shape, plan.spacing, params[t])
        warped = sampler.apply(x)
        residual = fft3(maps * warped[None]).reshape(num_coils, -1)[:, plan.sample_indices(t)] - z.group(t)
        sq = float(np.sum(residual.real**2 + residual.imag**2))
        norms[t] = np.sqrt(sq)
        value += 0.5 * scale * sq
        if not wanted:
            continue
        back = ifft3(_scatter(residual, plan, t))
        if grad_c is not None:
            grad_c += scale * np.conj(warped)[None] * back
        if grad_x is not None or grad_v is not None:
            combined = np.sum(np.conj(maps) * back, axis=0)
            if grad_x is not None:
                grad_x += scale * sampler.transpose(combined)
            if grad_v is not None:
                h = np.real(np.conj(combined.reshape(1, -1)) * sampler.slopes(x))
                grad_v[t] = scale * sampler.parameter_gradient(h)
    return FidelityEvaluation(value, norms, grad_x, grad_c, grad_v)


def data_fidelity(
    x: np.ndarray,
    c: CoilsLike,
    v: TrajectoryLike,
    z: KSpaceSet,
    plan: SamplingPlan,
    sigma: float = 1.0,
    active: Optional[np.ndarray] = None,
) -> float:
    """``(1/2σ²)‖A(x, c, v) − z‖²`` over the active states."""
    return evaluate_fidelity(x, c, v, z, plan, sigma, active).value


def grad_data_fidelity(
    wrt: str,
    x: np.ndarray,
    c: CoilsLike,
    v: TrajectoryLike,
    z: KSpaceSet,
    plan: SamplingPlan,
    sigma: float = 1.0,
    active: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of :func:`data_fidelity` with respect to ``"x"``, ``"c"`` or ``"v"``."""
    if wrt not in ("x", "c", "v"):
        raise ValueError(f"Gradient target must be 'x', 'c' or 'v', got {wrt!r}")
    evaluation = evaluate_fidelity(x, c, v, z, plan, sigma, active, wrt=(wrt,))
    return getattr(evaluation, f"grad_{wrt}")


def consistency_ratios(residual_norms: np.ndarray, z: KSpaceSet) -> np.ndarray:
    """Per-state ``‖r_t‖ / ‖z_t‖``, falling back to ``‖r_t‖`` where ``z_t`` is zero."""
    data_norms = np.array([np.linalg.norm(z.group(t)) for t in range(z.num_times)])
    return np.where(data_norms > 0.0, residual_norms / np.where(data_norms > 0.0, data_norms, 1.0), residual_norms)


def state_data_consistency(x: np.ndarray, c: CoilsLike, v: TrajectoryLike, z: KSpaceSet, plan: SamplingPlan) -> np.ndarray:
    """Relative residual ``‖A_t − z_t‖ / ‖z_t‖`` per state (absolute where ``z_t`` is zero)."""
    return consistency_ratios(evaluate_fidelity(x, c, v, z, plan).residual_norms, z)


def simulate_kspace(
    x: np.ndarray, c: CoilsLike, v: TrajectoryLike, plan: SamplingPlan, noise: NoiseModel = NoiseModel()
) -> KSpaceSet:
    """Motion-corrupted measurements plus seeded circular complex Gaussian noise."""
    clean = forward_full(x, c, v, plan)
    if noise.sigma == 0.0:
        return clean
    rng = np.random.default_rng(noise.seed)
    shape = clean.data.shape
    eps = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (noise.sigma / np.sqrt(2.0))
    return clean.with_data(clean.data + eps)
