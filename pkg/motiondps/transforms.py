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

"""Centered orthonormal 3D DFT, orthonormal DST-I and Laplacian spectra.

The DFT puts the DC coefficient at index ``n // 2`` of every axis. Instead
of ``fftshift`` copies it multiplies by cached per-axis phase ramps before
and after ``scipy.fft.fftn``, which is algebraically identical to
``fftshift(fftn(ifftshift(x)))``.
"""

from __future__ import annotations

import os
import threading
from typing import Dict, Sequence, Tuple

import numpy as np
import scipy.fft

THREADS_ENV = "MDPS_THREADS"
_AXES = (-3, -2, -1)


def fft_workers() -> int:
    """Worker count for scipy.fft, capped by ``MDPS_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        workers = int(raw)
    except ValueError as e:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
    if workers < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return workers


class TransformPlanCache:
    """Per-shape tables shared by all transforms; safe for concurrent lookup."""

    __slots__ = ("_lock", "_ramps", "_eigen", "hits", "misses")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._ramps: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        self._eigen: Dict[Tuple[str, Tuple[int, ...]], np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def clear(self) -> None:
        with self._lock:
            self._ramps.clear()
            self._eigen.clear()
            self.hits = 0
            self.misses = 0

    def ramps(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Pre- and post-modulation vectors of the centered DFT of length ``n``."""
        with self._lock:
            cached = self._ramps.get(n)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
        # X[k] = sum_j x[j] exp(-2i pi (k-c)(j-c)/n), c = n // 2; exponents reduced mod n
        c = n // 2
        j = np.arange(n)
        pre = np.exp(2j * np.pi * ((c * j) % n) / n)
        post = pre * np.exp(-2j * np.pi * ((c * c) % n) / n)
        pre.setflags(write=False)
        post.setflags(write=False)
        with self._lock:
            return self._ramps.setdefault(n, (pre, post))

    def eigenvalues(self, kind: str, shape: Tuple[int, ...]) -> np.ndarray:
        key = (kind, tuple(int(n) for n in shape))
        with self._lock:
            cached = self._eigen.get(key)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
        if kind == "dirichlet":
            terms = [2.0 - 2.0 * np.cos(np.pi * (np.arange(n) + 1) / (n + 1)) for n in key[1]]
        elif kind == "periodic":
            terms = [2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(n) / n) for n in key[1]]
        else:
            raise ValueError(f"Unknown Laplacian boundary {kind!r}")
        values = terms[0][:, None, None] + terms[1][None, :, None] + terms[2][None, None, :]
        values.setflags(write=False)
        with self._lock:
            return self._eigen.setdefault(key, values)


DEFAULT_CACHE = TransformPlanCache()


def _modulate(x: np.ndarray, cache: TransformPlanCache, which: int, conjugate: bool) -> np.ndarray:
    out = np.array(x, dtype=np.complex128, copy=True)
    for axis in _AXES:
        ramp = cache.ramps(out.shape[axis])[which]
        if conjugate:
            ramp = ramp.conj()
        shape = [1] * out.ndim
        shape[axis] = ramp.size
        out *= ramp.reshape(shape)
    return out


def fft3(x: np.ndarray, cache: TransformPlanCache = DEFAULT_CACHE) -> np.ndarray:
    """Centered unitary DFT over the trailing three axes."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError(f"fft3 needs at least 3 dimensions, got shape {x.shape}")
    spectrum = scipy.fft.fftn(_modulate(x, cache, 0, False), axes=_AXES, norm="ortho", workers=fft_workers())
    return _modulate(spectrum, cache, 1, False)


def ifft3(k: np.ndarray, cache: TransformPlanCache = DEFAULT_CACHE) -> np.ndarray:
    """Inverse (and adjoint) of :func:`fft3`."""
    k = np.asarray(k)
    if k.ndim < 3:
        raise ValueError(f"ifft3 needs at least 3 dimensions, got shape {k.shape}")
    image = scipy.fft.ifftn(_modulate(k, cache, 1, True), axes=_AXES, norm="ortho", workers=fft_workers())
    return _modulate(image, cache, 0, True)


def dst3(u: np.ndarray) -> np.ndarray:
    """Orthonormal type-I DST over the trailing three axes of a real array."""
    u = np.asarray(u)
    if np.iscomplexobj(u):
        raise ValueError("dst3 expects a real-valued array; transform real and imaginary parts separately")
    return scipy.fft.dstn(u, type=1, axes=_AXES, norm="ortho", workers=fft_workers())


def idst3(u: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dst3` (the orthonormal DST-I is an involution)."""
    u = np.asarray(u)
    if np.iscomplexobj(u):
        raise ValueError("idst3 expects a real-valued array; transform real and imaginary parts separately")
    return scipy.fft.idstn(u, type=1, axes=_AXES, norm="ortho", workers=fft_workers())


def _check_shape(shape: Sequence[int]) -> Tuple[int, int, int]:
    if len(shape) != 3 or any(int(n) < 1 for n in shape):
        raise ValueError(f"Expected a 3D shape with positive extents, got {tuple(shape)}")
    return tuple(int(n) for n in shape)  # type: ignore[return-value]


def dirichlet_laplacian_eigenvalues(
    shape: Sequence[int], cache: TransformPlanCache = DEFAULT_CACHE
) -> np.ndarray:
    """Eigenvalues of DᵀD with zero boundaries, in DST-I coefficient order.

    ``lambda(k) = sum_axis 2 - 2 cos(pi (k + 1) / (n + 1))``, each in [0, 12].
    """
    return cache.eigenvalues("dirichlet", _check_shape(shape))


def periodic_laplacian_eigenvalues(
    shape: Sequence[int], cache: TransformPlanCache = DEFAULT_CACHE
) -> np.ndarray:
    """Eigenvalues of the periodic Laplacian in unshifted ``fftn`` order."""
    return cache.eigenvalues("periodic", _check_shape(shape))
