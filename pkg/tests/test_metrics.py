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

"""Tests for PSNR, SSIM and motion RMSE."""

import json
import math

import numpy as np
import pytest

from motiondps.metrics import (
    MetricsReport,
    append_summary_csv,
    compute_metrics,
    evaluation_range,
    motion_rmse,
    psnr,
    ssim3d,
)
from motiondps.motion import PARAM_NAMES, MotionTrajectory

from .conftest import smooth_volume


def test_psnr_of_a_constant_offset():
    ref = np.ones((8, 8, 8))
    assert psnr(ref, ref + 0.1) == pytest.approx(20.0)
    assert psnr(ref, ref + 0.1, data_range=10.0) == pytest.approx(40.0)


def test_psnr_is_infinite_for_identical_volumes():
    ref = smooth_volume((8, 8, 8))
    assert math.isinf(psnr(ref, ref.copy()))


def test_psnr_rejects_unusable_inputs():
    with pytest.raises(ValueError, match="differ in shape"):
        psnr(np.ones((4, 4, 4)), np.ones((4, 4, 5)))
    with pytest.raises(ValueError, match="positive intensity"):
        evaluation_range(np.zeros((4, 4, 4)))


def test_ssim_identity_and_phase_invariance():
    ref = smooth_volume((12, 12, 12), seed=1)
    assert ssim3d(ref, ref) == pytest.approx(1.0)
    assert ssim3d(ref, ref * np.exp(0.7j)) == pytest.approx(1.0)
    noisy = np.abs(ref) + 0.2 * np.random.default_rng(0).standard_normal(ref.shape)
    assert ssim3d(np.abs(ref), noisy) < 0.9


def _windowed_ssim(a, b, data_range, win=7):
    """Average of the SSIM formula over every win³ window that fits, population moments."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    values = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            for k in range(a.shape[2] - win + 1):
                pa = a[i : i + win, j : j + win, k : k + win]
                pb = b[i : i + win, j : j + win, k : k + win]
                ma, mb = pa.mean(), pb.mean()
                va, vb = pa.var(), pb.var()
                cov = np.mean(pa * pb) - ma * mb
                values.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(values))


def test_ssim_matches_the_windowed_formula():
    rng = np.random.default_rng(3)
    ref = rng.uniform(0.0, 1.0, (9, 9, 9))
    test = ref + 0.3 * rng.standard_normal(ref.shape)
    assert ssim3d(ref, test, data_range=1.0) == pytest.approx(_windowed_ssim(ref, test, 1.0), abs=1e-10)
    assert ssim3d(ref, test) == pytest.approx(_windowed_ssim(ref, test, float(ref.max() - ref.min())), abs=1e-10)


def test_ssim_keeps_the_sign_of_real_input():
    """A zero-mean pattern against its negation is anti-correlated in every window."""
    ref = (-1.0) ** np.indices((9, 9, 9)).sum(axis=0)
    assert ssim3d(ref, -ref) < -0.5
    assert ssim3d(np.abs(ref), np.abs(-ref)) == pytest.approx(1.0)


def test_ssim_needs_room_for_the_window():
    with pytest.raises(ValueError, match="window"):
        ssim3d(np.ones((6, 10, 10)), np.ones((6, 10, 10)))
    with pytest.raises(ValueError, match="3D"):
        ssim3d(np.ones((10, 10)), np.ones((10, 10)))


def test_motion_rmse_ignores_a_common_offset():
    rng = np.random.default_rng(0)
    true = rng.standard_normal((4, 6))
    np.testing.assert_allclose(motion_rmse(true + 3.0, true), 0.0, atol=1e-12)
    est = true.copy()
    est[2, 4] += 1.0
    expected = np.zeros(6)
    expected[4] = 0.5
    np.testing.assert_allclose(motion_rmse(MotionTrajectory(est), MotionTrajectory(true)), expected, atol=1e-12)
    with pytest.raises(ValueError):
        motion_rmse(true[:3], true)


def test_report_serializes_infinite_psnr(tmp_path):
    report = MetricsReport(math.inf, 1.0, 2.5)
    data = report.to_dict()
    assert data["psnr_db"] is None and data["psnr_infinite"]
    assert math.isinf(MetricsReport.from_dict(data).psnr_db)
    report.to_json(tmp_path / "metrics.json")
    assert json.loads((tmp_path / "metrics.json").read_text())["data_range"] == 2.5


def test_compute_metrics_with_motion():
    ref = smooth_volume((10, 10, 10), seed=2)
    recon = ref * 0.98
    true = MotionTrajectory(np.zeros((3, 6)))
    est = MotionTrajectory(np.full((3, 6), 0.5))
    report = compute_metrics(ref, recon, est, true, runtime_s=1.5)
    assert report.data_range == pytest.approx(evaluation_range(np.abs(ref)))
    assert 30.0 < report.psnr_db < math.inf
    assert 0.9 < report.ssim <= 1.0
    assert list(report.motion_rmse) == list(PARAM_NAMES)
    assert all(value == 0.0 for value in report.motion_rmse.values())
    assert compute_metrics(ref, recon).motion_rmse is None


def test_summary_csv_appends_rows(tmp_path):
    path = tmp_path / "summary.csv"
    append_summary_csv(path, MetricsReport(31.5, 0.9, 1.0, runtime_s=2.0), "run_a")
    append_summary_csv(path, MetricsReport(math.inf, 1.0, 1.0), "run_b")
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("run,psnr_db,ssim,data_range,runtime_s,rmse_t_z_mm")
    assert lines[1].startswith("run_a,31.5,0.9,1.0,2.0")
    assert lines[2].startswith("run_b,inf,")
