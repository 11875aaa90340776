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

"""Complex volume containers, normalization and the MDPSVOL1 file format.

All arrays use (z, y, x) voxel order with z slowest. Coil stacks put the
coil axis first, k-space sets are stored as a ``(C, M)`` array holding the
time groups of a :class:`~motiondps.acquisition.SamplingPlan` back to back.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Optional, Tuple

import numpy as np

from .transforms import ifft3

if TYPE_CHECKING:
    from .acquisition import SamplingPlan

MAGIC = b"MDPSVOL1"
PAYLOAD_DTYPE = "complex64"

Spacing = Tuple[float, float, float]


class VolumeFormatError(ValueError):
    """Raised when an MDPSVOL1 file cannot be decoded."""


def _check_spacing(spacing: Spacing) -> Spacing:
    if len(spacing) != 3:
        raise ValueError(f"Spacing must have 3 components, got {spacing}")
    values = tuple(float(s) for s in spacing)
    if not all(np.isfinite(s) and s > 0 for s in values):
        raise ValueError(f"Spacing components must be strictly positive, got {spacing}")
    return values  # type: ignore[return-value]


@dataclass
class ComplexVolume:
    """Dense complex 3D array with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise ValueError(f"ComplexVolume expects a non-empty 3D array, got shape {self.data.shape}")
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex128)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


@dataclass
class CoilSet:
    """Coil sensitivity maps stacked along a leading coil axis."""

    maps: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 4 or self.maps.shape[0] < 1 or 0 in self.maps.shape:
            raise ValueError(f"CoilSet expects a (C, z, y, x) array with C >= 1, got shape {self.maps.shape}")
        if not np.iscomplexobj(self.maps):
            self.maps = self.maps.astype(np.complex128)
        self.spacing = _check_spacing(self.spacing)

    @property
    def num_coils(self) -> int:
        return int(self.maps.shape[0])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.maps.shape[1:])  # type: ignore[return-value]

    def volume(self, index: int) -> ComplexVolume:
        return ComplexVolume(self.maps[index], self.spacing)


@dataclass
class KSpaceSet:
    """Measured samples of every coil, grouped by motion state.

    ``data`` has shape ``(C, M)``; the samples of time ``t`` occupy
    ``data[:, offsets[t]:offsets[t + 1]]`` in the order given by
    ``SamplingPlan.sample_indices(t)``.
    """

    data: np.ndarray
    offsets: np.ndarray
    plan_id: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if self.data.ndim != 2:
            raise ValueError(f"KSpaceSet data must be (C, M), got shape {self.data.shape}")
        if self.offsets.ndim != 1 or self.offsets.size < 2 or self.offsets[0] != 0:
            raise ValueError("KSpaceSet offsets must start at 0 and bound at least one group")
        if np.any(np.diff(self.offsets) < 0) or self.offsets[-1] != self.data.shape[1]:
            raise ValueError(
                f"KSpaceSet offsets end at {self.offsets[-1]} but data holds {self.data.shape[1]} samples per coil"
            )

    @property
    def num_coils(self) -> int:
        return int(self.data.shape[0])

    @property
    def num_times(self) -> int:
        return int(self.offsets.size - 1)

    @property
    def samples_per_time(self) -> np.ndarray:
        return np.diff(self.offsets)

    def group(self, t: int) -> np.ndarray:
        if not 0 <= t < self.num_times:
            raise ValueError(f"Time index {t} out of range for {self.num_times} states")
        return self.data[:, self.offsets[t] : self.offsets[t + 1]]

    def with_data(self, data: np.ndarray) -> "KSpaceSet":
        return KSpaceSet(data, self.offsets.copy(), self.plan_id, dict(self.extra))


def rss_combine(coil_images: np.ndarray) -> np.ndarray:
    """Root sum-of-squares over the leading coil axis.

    Args:
        coil_images: Array of shape ``(C, z, y, x)`` or a ``CoilSet``.

    Returns:
        Real nonnegative array of shape ``(z, y, x)``.

    Raises:
        ValueError: If the stack is empty or not four-dimensional.
    """
    stack = coil_images.maps if isinstance(coil_images, CoilSet) else np.asarray(coil_images)
    if stack.ndim != 4 or stack.shape[0] == 0:
        raise ValueError(f"rss_combine expects a non-empty (C, z, y, x) stack, got shape {stack.shape}")
    return np.sqrt(np.sum(stack.real**2 + stack.imag**2, axis=0))


def zero_filled_coil_images(k: KSpaceSet, plan: "SamplingPlan") -> np.ndarray:
    """Coil-wise inverse DFT of all time groups scattered onto one grid."""
    if k.num_times != plan.num_times:
        raise ValueError(f"k-space holds {k.num_times} states but the plan defines {plan.num_times}")
    grid = np.zeros((k.num_coils, int(np.prod(plan.shape))), dtype=np.complex128)
    for t in range(plan.num_times):
        grid[:, plan.sample_indices(t)] = k.group(t)
    return ifft3(grid.reshape((k.num_coils,) + tuple(plan.shape)))


def rss_percentile(coil_images: np.ndarray, q: float = 99.0) -> float:
    """Percentile (linear interpolation between order statistics) of the RSS image."""
    return float(np.percentile(rss_combine(coil_images), q))


def percentile_normalize(k: KSpaceSet, plan: "SamplingPlan", q: float = 99.0) -> Tuple[KSpaceSet, float]:
    """Divide k-space by the ``q``-th percentile of its zero-filled RSS image.

    Returns:
        The normalized set and the scale that was divided out.

    Raises:
        ValueError: If the data is empty or the percentile is not positive.
    """
    if k.data.size == 0:
        raise ValueError("Cannot normalize an empty k-space set")
    scale = rss_percentile(zero_filled_coil_images(k, plan), q)
    if not np.isfinite(scale) or scale <= 0.0:
        raise ValueError(f"Normalization scale is undefined (percentile {q} of RSS is {scale})")
    return k.with_data(k.data / scale), scale


# --- MDPSVOL1 binary format -------------------------------------------------


def save_array(path: str | Path, array: np.ndarray, header: Optional[Dict[str, Any]] = None) -> None:
    """Write ``array`` as MDPSVOL1: magic, length-prefixed JSON header, float32 (re, im) payload.

    Every input is cast to complex64, so only complex64 arrays round-trip
    bit for bit; complex128 data comes back rounded to single precision.
    """
    array = np.asarray(array)
    meta: Dict[str, Any] = dict(header or {})
    meta["shape"] = [int(n) for n in array.shape]
    meta["dtype"] = PAYLOAD_DTYPE
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(array, dtype="<c8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(payload.tobytes(order="C"))


def load_array(path: str | Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Read an MDPSVOL1 file and return ``(complex64 array, header)``.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        VolumeFormatError: On bad magic, unreadable header or a payload
            whose length does not match the header shape.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Volume file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: missing MDPSVOL1 magic")
    (header_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if start + header_len > len(raw):
        raise VolumeFormatError(f"{path}: header length {header_len} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
        shape = tuple(int(n) for n in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"{path}: corrupt header: {e}") from e
    if header.get("dtype") != PAYLOAD_DTYPE:
        raise VolumeFormatError(f"{path}: unsupported payload dtype {header.get('dtype')!r}")
    if any(n < 0 for n in shape):
        raise VolumeFormatError(f"{path}: negative dimension in shape {shape}")
    payload = raw[start + header_len :]
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload length mismatch, expected {expected} bytes for shape {shape}, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<c8").reshape(shape).astype(np.complex64)
    return data, header


def save_volume(v: ComplexVolume, path: str | Path) -> None:
    save_array(path, v.data, {"kind": "volume", "spacing": list(v.spacing)})


def load_volume(path: str | Path) -> ComplexVolume:
    data, header = load_array(path)
    if data.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a 3D volume, header shape is {data.shape}")
    return ComplexVolume(data, tuple(header.get("spacing", (1.0, 1.0, 1.0))))  # type: ignore[arg-type]


def save_coils(c: CoilSet, path: str | Path) -> None:
    save_array(path, c.maps, {"kind": "coils", "spacing": list(c.spacing)})


def load_coils(path: str | Path) -> CoilSet:
    data, header = load_array(path)
    if data.ndim != 4:
        raise VolumeFormatError(f"{path}: expected a (C, z, y, x) coil stack, header shape is {data.shape}")
    return CoilSet(data, tuple(header.get("spacing", (1.0, 1.0, 1.0))))  # type: ignore[arg-type]


def save_kspace(k: KSpaceSet, path: str | Path) -> None:
    save_array(
        path,
        k.data,
        {"kind": "kspace", "plan_id": k.plan_id, "offsets": [int(o) for o in k.offsets], "extra": k.extra},
    )


def load_kspace(path: str | Path) -> KSpaceSet:
    data, header = load_array(path)
    if "offsets" not in header:
        raise VolumeFormatError(f"{path}: k-space header lacks group offsets")
    try:
        return KSpaceSet(data, np.asarray(header["offsets"]), header.get("plan_id", ""), header.get("extra", {}))
    except ValueError as e:
        raise VolumeFormatError(f"{path}: {e}") from e


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
