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

"""Synthetic ground truth: ellipsoid phantoms with smooth phase, and smooth coil maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .priors import coil_normalize
from .volume import CoilSet, ComplexVolume

# Polynomial phase terms on centred coordinates u in [-1, 1], in this order.
PHASE_TERMS = ("1", "z", "y", "x", "zz", "yy", "xx", "zy", "zx", "yx")
MIN_PHANTOM_EXTENT = 8


@dataclass
class Ellipsoid:
    center: Tuple[float, float, float]
    semi_axes: Tuple[float, float, float]
    amplitude: complex = 1.0

    def to_dict(self) -> Dict[str, Any]:
        amp = complex(self.amplitude)
        return {"center": list(self.center), "semi_axes": list(self.semi_axes), "amplitude": [amp.real, amp.imag]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Ellipsoid":
        amp = data.get("amplitude", 1.0)
        if isinstance(amp, (list, tuple)):
            amp = complex(amp[0], amp[1])
        return cls(tuple(data["center"]), tuple(data["semi_axes"]), complex(amp))  # type: ignore[arg-type]


@dataclass
class PhantomSpec:
    """Sum of ellipsoid indicators times ``exp(i·phase)``.

    ``phase_coeffs`` weight :data:`PHASE_TERMS`; missing trailing terms are
    zero. ``texture`` adds seeded smooth multiplicative variation inside the
    support (0 disables it): amplitudes are scaled by a factor in
    ``[1 - texture, 1 + texture]``, so magnitudes can exceed the largest
    ellipsoid amplitude by up to that fraction.
    """

    shape: Tuple[int, int, int]
    ellipsoids: List[Ellipsoid] = field(default_factory=list)
    phase_coeffs: List[float] = field(default_factory=list)
    seed: int = 0
    smoothing: float = 1.0
    texture: float = 0.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ValueError(f"Phantom shape must be three positive extents, got {self.shape}")
        if len(self.phase_coeffs) > len(PHASE_TERMS):
            raise ValueError(f"At most {len(PHASE_TERMS)} phase coefficients, got {len(self.phase_coeffs)}")
        for k, e in enumerate(self.ellipsoids):
            center = np.asarray(e.center, dtype=np.float64)
            axes = np.asarray(e.semi_axes, dtype=np.float64)
            if center.shape != (3,) or axes.shape != (3,) or np.any(axes <= 0.0):
                raise ValueError(f"Ellipsoid {k} needs a 3D center and positive semi-axes, got {e.center}, {e.semi_axes}")
            upper = np.asarray(self.shape, dtype=np.float64) - 1.0
            if np.any(center - axes < 0.0) or np.any(center + axes > upper):
                raise ValueError(
                    f"Ellipsoid {k} (center {tuple(center)}, semi-axes {tuple(axes)}) leaves the grid {tuple(self.shape)}"
                )
        if self.smoothing < 0.0 or self.texture < 0.0:
            raise ValueError(f"smoothing and texture must be >= 0, got {self.smoothing}, {self.texture}")


def _centred_coordinates(shape: Sequence[int]) -> List[np.ndarray]:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    return [(g - (n - 1) / 2.0) / max(n / 2.0, 1.0) for g, n in zip(grids, shape)]


def phase_field(shape: Sequence[int], coeffs: Sequence[float]) -> np.ndarray:
    """Low-order polynomial phase in radians."""
    z, y, x = _centred_coordinates(shape)
    terms = [np.ones_like(z), z, y, x, z * z, y * y, x * x, z * y, z * x, y * x]
    phase = np.zeros(tuple(shape))
    for coeff, term in zip(coeffs, terms):
        phase += float(coeff) * term
    return phase


def make_phantom(spec: PhantomSpec) -> ComplexVolume:
    """Render ``spec`` on its grid; deterministic for a given spec and seed."""
    spec.validate()
    shape = tuple(int(n) for n in spec.shape)
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    image = np.zeros(shape, dtype=np.complex128)
    for e in spec.ellipsoids:
        r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, e.center, e.semi_axes))
        image += complex(e.amplitude) * (r2 <= 1.0)
    if spec.texture > 0.0:
        rng = np.random.default_rng(spec.seed)
        bumps = gaussian_filter(rng.standard_normal(shape), sigma=2.0, mode="wrap")
        bumps /= max(float(np.max(np.abs(bumps))), 1e-12)
        image *= 1.0 + spec.texture * bumps
    if spec.smoothing > 0.0:
        image = gaussian_filter(image.real, spec.smoothing, mode="constant") + 1j * gaussian_filter(
            image.imag, spec.smoothing, mode="constant"
        )
    if any(spec.phase_coeffs):
        image = image * np.exp(1j * phase_field(shape, spec.phase_coeffs))
    return ComplexVolume(image, tuple(spec.spacing))


def default_phantom_spec(shape: Sequence[int] = (32, 32, 32), seed: int = 0) -> PhantomSpec:
    """Head-like nested ellipsoids: skull rim, brain, two ventricles and three seeded lesions."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < MIN_PHANTOM_EXTENT:
        raise ValueError(f"Default phantom needs a 3D shape with extents >= {MIN_PHANTOM_EXTENT}, got {shape}")
    rng = np.random.default_rng(seed)
    n = np.asarray(shape, dtype=np.float64)
    c = (n - 1.0) / 2.0

    def at(offset: Sequence[float], axes: Sequence[float], amplitude: complex) -> Ellipsoid:
        return Ellipsoid(tuple(c + np.asarray(offset) * n), tuple(np.asarray(axes) * n), amplitude)  # type: ignore[arg-type]

    ellipsoids = [
        at((0.0, 0.0, 0.0), (0.40, 0.42, 0.36), 1.0),
        at((0.0, 0.0, 0.0), (0.34, 0.37, 0.30), -0.35),
        at((0.02, 0.0, -0.07), (0.10, 0.16, 0.04), -0.3),
        at((0.02, 0.0, 0.07), (0.10, 0.16, 0.04), -0.3),
    ]
    for _ in range(3):
        offset = rng.uniform(-0.15, 0.15, size=3)
        radius = rng.uniform(0.03, 0.05)
        ellipsoids.append(at(offset, (radius, radius, radius), 0.25))
    phase = [0.0, 0.4, -0.3, 0.25, 0.15, -0.1, 0.1] + list(rng.uniform(-0.05, 0.05, size=3))
    return PhantomSpec(shape, ellipsoids, phase, seed=seed, texture=0.05)


def make_synthetic_coils(
    shape: Sequence[int], num_coils: int, seed: int = 0, spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> CoilSet:
    """Broad Gaussian sensitivity bumps centred on points around the volume, with linear phase, normalized."""
    if num_coils < 1:
        raise ValueError(f"Need at least one coil, got {num_coils}")
    shape = tuple(int(n) for n in shape)
    rng = np.random.default_rng(seed)
    n = np.asarray(shape, dtype=np.float64)
    centre = (n - 1.0) / 2.0
    grid = np.meshgrid(*[np.arange(m, dtype=np.float64) for m in shape], indexing="ij")
    width = 0.6 * float(np.max(n))
    maps = np.empty((num_coils,) + shape, dtype=np.complex128)
    for k in range(num_coils):
        angle = 2.0 * np.pi * k / num_coils + rng.uniform(-0.2, 0.2)
        pos = centre + np.array([rng.uniform(-0.15, 0.15) * n[0], 0.5 * n[1] * np.cos(angle), 0.5 * n[2] * np.sin(angle)])
        r2 = sum((g - p) ** 2 for g, p in zip(grid, pos))
        slope = rng.uniform(-1.0, 1.0, size=3) * np.pi / n
        phase = rng.uniform(-np.pi, np.pi) + sum(s * (g - m) for s, g, m in zip(slope, grid, centre))
        maps[k] = np.exp(-r2 / (2.0 * width**2)) * np.exp(1j * phase)
    return CoilSet(coil_normalize(maps), spacing)
