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

"""Reconstruction quality metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from skimage.metrics import structural_similarity

from .motion import PARAM_NAMES, MotionTrajectory

SSIM_WINDOW = 7
EVALUATION_PERCENTILE = 99.9


def _real(volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume)
    return np.abs(volume) if np.iscomplexobj(volume) else volume.astype(np.float64)


def _pair(ref: np.ndarray, test: np.ndarray) -> tuple:
    a, b = _real(ref), _real(test)
    if a.shape != b.shape:
        raise ValueError(f"Volumes differ in shape: {a.shape} vs {b.shape}")
    return a, b


def evaluation_range(ref: np.ndarray) -> float:
    """99.9th percentile of the reference magnitude."""
    value = float(np.percentile(np.abs(np.asarray(ref)), EVALUATION_PERCENTILE))
    if not value > 0.0:
        raise ValueError("Reference volume has no positive intensity to set the evaluation range")
    return value


def psnr(ref: np.ndarray, test: np.ndarray, data_range: Optional[float] = None) -> float:
    """``10 log10(range² / MSE)``; complex inputs are compared as magnitudes.

    Returns ``inf`` for identical inputs.
    """
    a, b = _pair(ref, test)
    data_range = evaluation_range(a) if data_range is None else float(data_range)
    if not data_range > 0.0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ssim3d(ref: np.ndarray, test: np.ndarray, data_range: Optional[float] = None) -> float:
    """Mean SSIM over all ``7³`` uniform windows that fit inside the volume.

    Real inputs are compared as given (sign included); complex inputs as
    magnitudes.
    """
    a, b = _pair(ref, test)
    if a.ndim != 3:
        raise ValueError(f"ssim3d expects 3D volumes, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM window {SSIM_WINDOW} is larger than the volume {a.shape}")
    if data_range is None:
        data_range = float(np.max(a) - np.min(a)) or 1.0
    return float(
        structural_similarity(
            a,
            b,
            win_size=SSIM_WINDOW,
            gaussian_weights=False,
            use_sample_covariance=False,
            data_range=data_range,
        )
    )


def motion_rmse(est: Union[MotionTrajectory, np.ndarray], true: Union[MotionTrajectory, np.ndarray]) -> np.ndarray:
    """Per-parameter RMSE after referencing both trajectories to their first state."""
    e = est.params if isinstance(est, MotionTrajectory) else np.asarray(est, dtype=np.float64)
    t = true.params if isinstance(true, MotionTrajectory) else np.asarray(true, dtype=np.float64)
    if e.shape != t.shape or e.ndim != 2 or e.shape[1] != 6:
        raise ValueError(f"Trajectories must both be (T, 6) with equal T, got {e.shape} and {t.shape}")
    diff = (e - e[:1]) - (t - t[:1])
    return np.sqrt(np.mean(diff**2, axis=0))


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    data_range: float
    motion_rmse: Optional[Dict[str, float]] = None
    runtime_s: Optional[float] = None

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "psnr_db": None if self.psnr_infinite else self.psnr_db,
            "psnr_infinite": self.psnr_infinite,
            "ssim": self.ssim,
            "data_range": self.data_range,
            "motion_rmse": self.motion_rmse,
            "runtime_s": self.runtime_s,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        value = math.inf if data.get("psnr_infinite") else float(data["psnr_db"])
        return cls(value, float(data["ssim"]), float(data["data_range"]), data.get("motion_rmse"), data.get("runtime_s"))

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def compute_metrics(
    ref: np.ndarray,
    recon: np.ndarray,
    est_motion: Optional[MotionTrajectory] = None,
    true_motion: Optional[MotionTrajectory] = None,
    runtime_s: Optional[float] = None,
) -> MetricsReport:
    """PSNR and SSIM on magnitudes at the reference's evaluation range, plus motion RMSE when both trajectories exist."""
    ref_mag, recon_mag = np.abs(np.asarray(ref)), np.abs(np.asarray(recon))
    data_range = evaluation_range(ref_mag)
    rmse = None
    if est_motion is not None and true_motion is not None:
        rmse = dict(zip(PARAM_NAMES, (float(r) for r in motion_rmse(est_motion, true_motion))))
    return MetricsReport(
        psnr(ref_mag, recon_mag, data_range), ssim3d(ref_mag, recon_mag, data_range), data_range, rmse, runtime_s
    )


def append_summary_csv(path: Union[str, Path], report: MetricsReport, run_name: str) -> None:
    """Append one row, writing the header first if the file is new."""
    path = Path(path)
    header = ["run", "psnr_db", "ssim", "data_range", "runtime_s"] + [f"rmse_{name}" for name in PARAM_NAMES]
    rmse = report.motion_rmse or {}
    row = [run_name, repr(report.psnr_db), repr(report.ssim), repr(report.data_range)]
    row.append("" if report.runtime_s is None else repr(report.runtime_s))
    row += ["" if name not in rmse else repr(float(rmse[name])) for name in PARAM_NAMES]
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(header)
        writer.writerow(row)
