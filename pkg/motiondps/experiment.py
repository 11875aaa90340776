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

"""Experiment commands: each reads and writes artifacts in one output directory.

The commands chain through files so every stage can be rerun on its own:

    phantom      -> phantom.mdps, coils_true.mdps, checksums.json
    simulate     -> kspace.mdps, plan.json, motion_true.csv, zero_filled_rss.mdps, simulation.json
    reconstruct  -> recon.mdps, coils_est.mdps, motion_est.csv, diagnostics.csv (+ metrics)
    evaluate     -> metrics.json, summary.csv
    export-slices-> slices/*.png with sidecar JSON, slices/motion_*.csv
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .acquisition import (
    NoiseModel,
    SamplingPlan,
    forward_full,
    make_cartesian_mask,
    make_full_mask,
    make_ordering,
    make_poisson_disc_mask,
    pe_axes,
    simulate_kspace,
)
from .config import ExperimentConfig, load_config
from .metrics import MetricsReport, append_summary_csv, compute_metrics
from .motion import MotionTrajectory, load_trajectory_csv, save_trajectory_csv, severity_level, simulate_gp_trajectory
from .phantom import Ellipsoid, PhantomSpec, default_phantom_spec, make_phantom, make_synthetic_coils
from .solver import run
from .volume import (
    CoilSet,
    ComplexVolume,
    file_sha256,
    load_coils,
    load_kspace,
    load_volume,
    percentile_normalize,
    rss_combine,
    save_coils,
    save_kspace,
    save_volume,
    zero_filled_coil_images,
)

logger = logging.getLogger(__name__)

Artifacts = Dict[str, Path]

PHANTOM_FILE = "phantom.mdps"
COILS_TRUE_FILE = "coils_true.mdps"
KSPACE_FILE = "kspace.mdps"
PLAN_FILE = "plan.json"
MOTION_TRUE_FILE = "motion_true.csv"
ZERO_FILLED_FILE = "zero_filled_rss.mdps"
SIMULATION_FILE = "simulation.json"
RECON_FILE = "recon.mdps"
COILS_EST_FILE = "coils_est.mdps"
MOTION_EST_FILE = "motion_est.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
METRICS_FILE = "metrics.json"
SUMMARY_FILE = "summary.csv"
SLICE_DIR = "slices"


def _out_dir(config: ExperimentConfig, out: Optional[Union[str, Path]]) -> Path:
    path = Path(out) if out is not None else Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"Missing input {path}; run `mdps {producer}` first")
    return path


def build_phantom_spec(config: ExperimentConfig) -> PhantomSpec:
    pc = config.phantom
    shape = tuple(pc.shape)
    if pc.ellipsoids is None:
        spec = default_phantom_spec(shape, pc.seed)
    else:
        try:
            ellipsoids = [Ellipsoid.from_dict(e) for e in pc.ellipsoids]
        except (KeyError, TypeError, IndexError) as e:
            raise ValueError(f"Invalid ellipsoid entry in phantom.ellipsoids: {e}") from e
        spec = PhantomSpec(shape, ellipsoids, seed=pc.seed)  # type: ignore[arg-type]
    if pc.phase_coeffs is not None:
        spec.phase_coeffs = list(pc.phase_coeffs)
    spec.texture = pc.texture
    spec.spacing = tuple(pc.spacing)  # type: ignore[assignment]
    return spec


def cmd_phantom(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Artifacts:
    """Ground-truth volume and coil maps plus their checksums."""
    out_dir = _out_dir(config, out)
    if config.phantom.input_path:
        volume = load_volume(config.phantom.input_path)
    else:
        volume = make_phantom(build_phantom_spec(config))
    coils = make_synthetic_coils(volume.shape, config.coils.num_coils, config.coils.seed, volume.spacing)
    artifacts = {"phantom": out_dir / PHANTOM_FILE, "coils_true": out_dir / COILS_TRUE_FILE}
    save_volume(volume, artifacts["phantom"])
    save_coils(coils, artifacts["coils_true"])
    checksums = {path.name: file_sha256(path) for path in artifacts.values()}
    artifacts["checksums"] = out_dir / "checksums.json"
    artifacts["checksums"].write_text(json.dumps(checksums, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts["config"] = config.write_resolved(out_dir)
    logger.info(f"Phantom {volume.shape} with {coils.num_coils} coils written to {out_dir}")
    return artifacts


def build_plan(config: ExperimentConfig, shape: Sequence[int], spacing: Sequence[float]) -> SamplingPlan:
    pc = config.plan
    a, b = pe_axes(pc.readout_axis)
    pe_shape = (int(shape[a]), int(shape[b]))
    if pc.mask == "full":
        mask = make_full_mask(pe_shape)
    elif pc.mask == "cartesian":
        mask = make_cartesian_mask(pe_shape, pc.acceleration, pc.acl_fraction, pc.seed)
    else:
        mask = make_poisson_disc_mask(pe_shape, pc.acceleration, pc.acl_fraction, pc.seed)
    return make_ordering(
        mask, pc.ordering, pc.shots, pc.states_per_shot, pc.seed, tuple(shape), pc.readout_axis, tuple(spacing)
    )


def build_trajectory(config: ExperimentConfig, num_states: int) -> MotionTrajectory:
    mc = config.motion
    if mc.severity == "none" or num_states < 2:
        return MotionTrajectory.zeros(num_states)
    level = severity_level(mc.severity).scaled(mc.scale)
    return simulate_gp_trajectory(num_states, level, mc.lengthscale, mc.seed, mc.random_amplitude)


def cmd_simulate(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Artifacts:
    """Motion-corrupted, noisy, normalized k-space from the phantom artifacts."""
    out_dir = _out_dir(config, out)
    volume = load_volume(_require(out_dir / PHANTOM_FILE, "phantom"))
    coils = load_coils(_require(out_dir / COILS_TRUE_FILE, "phantom"))
    x = volume.data.astype(np.complex128)
    maps = coils.maps.astype(np.complex128)
    plan = build_plan(config, volume.shape, volume.spacing)
    motion = build_trajectory(config, plan.num_times)

    nc = config.noise
    sigma = nc.sigma
    if nc.snr_db is not None:
        sigma = NoiseModel.from_snr(forward_full(x, maps, motion, plan).data, nc.snr_db, nc.seed).sigma
    kspace = simulate_kspace(x, maps, motion, plan, NoiseModel(sigma, nc.seed))
    zero_filled = rss_combine(zero_filled_coil_images(kspace, plan))
    normalized, scale = percentile_normalize(kspace, plan, config.normalize_percentile)
    normalized.extra["scale"] = scale

    artifacts = {
        "kspace": out_dir / KSPACE_FILE,
        "plan": out_dir / PLAN_FILE,
        "motion_true": out_dir / MOTION_TRUE_FILE,
        "zero_filled": out_dir / ZERO_FILLED_FILE,
        "simulation": out_dir / SIMULATION_FILE,
    }
    save_kspace(normalized, artifacts["kspace"])
    plan.save(artifacts["plan"])
    save_trajectory_csv(motion, artifacts["motion_true"])
    save_volume(ComplexVolume(zero_filled, volume.spacing), artifacts["zero_filled"])
    summary = {
        "plan_id": plan.plan_id,
        "num_states": plan.num_times,
        "acquired_lines": int(plan.mask.sum()),
        "acceleration": float(plan.mask.size / plan.mask.sum()),
        "noise_sigma": float(sigma),
        "scale": float(scale),
    }
    artifacts["simulation"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    artifacts["config"] = config.write_resolved(out_dir)
    logger.info(
        f"Simulated {plan.num_times} states, R={summary['acceleration']:.2f}, noise sigma {sigma:.3e}, scale {scale:.4g}"
    )
    return artifacts


def _maybe_trajectory(path: Path) -> Optional[MotionTrajectory]:
    return load_trajectory_csv(path) if path.is_file() else None


def _evaluate(out_dir: Path, recon: np.ndarray, motion: Optional[MotionTrajectory], runtime_s: Optional[float]) -> Optional[MetricsReport]:
    phantom_path = out_dir / PHANTOM_FILE
    if not phantom_path.is_file():
        return None
    report = compute_metrics(
        load_volume(phantom_path).data, recon, motion, _maybe_trajectory(out_dir / MOTION_TRUE_FILE), runtime_s
    )
    report.to_json(out_dir / METRICS_FILE)
    append_summary_csv(out_dir / SUMMARY_FILE, report, out_dir.name)
    return report


def cmd_reconstruct(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Artifacts:
    """Run the solver on the simulated data; evaluates against the phantom when it exists."""
    out_dir = _out_dir(config, out)
    kspace = load_kspace(_require(out_dir / KSPACE_FILE, "simulate"))
    plan = SamplingPlan.load(_require(out_dir / PLAN_FILE, "simulate"))
    coils_path = out_dir / COILS_TRUE_FILE
    true_coils = load_coils(coils_path) if coils_path.is_file() else None
    scale = float(kspace.extra.get("scale", 1.0))

    result = run(kspace, plan, config.solver, coils=true_coils)
    image = result.image * scale

    artifacts = {
        "recon": out_dir / RECON_FILE,
        "coils_est": out_dir / COILS_EST_FILE,
        "motion_est": out_dir / MOTION_EST_FILE,
        "diagnostics": out_dir / DIAGNOSTICS_FILE,
    }
    save_volume(ComplexVolume(image, plan.spacing), artifacts["recon"])
    save_coils(CoilSet(result.coils, plan.spacing), artifacts["coils_est"])
    save_trajectory_csv(result.motion, artifacts["motion_est"])
    result.write_diagnostics_csv(artifacts["diagnostics"])
    if _evaluate(out_dir, image, result.motion, result.runtime_s) is not None:
        artifacts["metrics"] = out_dir / METRICS_FILE
        artifacts["summary"] = out_dir / SUMMARY_FILE
    artifacts["config"] = config.write_resolved(out_dir)
    return artifacts


def cmd_evaluate(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Artifacts:
    """Metrics of ``recon.mdps`` against ``phantom.mdps``."""
    out_dir = _out_dir(config, out)
    _require(out_dir / PHANTOM_FILE, "phantom")
    recon = load_volume(_require(out_dir / RECON_FILE, "reconstruct"))
    report = _evaluate(out_dir, recon.data, _maybe_trajectory(out_dir / MOTION_EST_FILE), None)
    assert report is not None
    psnr_text = "inf" if report.psnr_infinite else f"{report.psnr_db:.3f} dB"
    logger.info(f"PSNR {psnr_text}, SSIM {report.ssim:.4f}")
    return {"metrics": out_dir / METRICS_FILE, "summary": out_dir / SUMMARY_FILE, "config": config.write_resolved(out_dir)}


# --- slice export ------------------------------------------------------------

SLICE_PLANES = (("axial", 0), ("coronal", 1), ("sagittal", 2))


def central_slice(volume: np.ndarray, axis: int) -> Tuple[np.ndarray, int]:
    index = volume.shape[axis] // 2
    return np.take(volume, index, axis=axis), index


def save_slice_png(image: np.ndarray, path: Union[str, Path], metadata: Optional[Dict[str, object]] = None) -> Dict[str, object]:
    """8-bit grayscale PNG windowed to the slice's own min and max, with a sidecar JSON."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    Image.fromarray(pixels).save(path, format="PNG")
    sidecar: Dict[str, object] = {"window_min": lo, "window_max": hi, "shape": list(image.shape)}
    sidecar.update(metadata or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def cmd_export_slices(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Artifacts:
    """Central-slice magnitude and |error| PNGs plus trajectory CSVs referenced to the first state."""
    out_dir = _out_dir(config, out)
    recon = np.abs(load_volume(_require(out_dir / RECON_FILE, "reconstruct")).data)
    ref_path = out_dir / PHANTOM_FILE
    ref = np.abs(load_volume(ref_path).data) if ref_path.is_file() else None
    slice_dir = out_dir / SLICE_DIR
    slice_dir.mkdir(parents=True, exist_ok=True)
    artifacts: Artifacts = {}
    for plane, axis in SLICE_PLANES:
        sources = [("recon", recon)]
        if ref is not None:
            sources += [("reference", ref), ("error", np.abs(ref - recon))]
        for name, volume in sources:
            image, index = central_slice(volume, axis)
            path = slice_dir / f"{plane}_{name}.png"
            save_slice_png(image, path, {"plane": plane, "axis": axis, "index": index, "source": name})
            artifacts[f"{plane}_{name}"] = path
    for name in (MOTION_EST_FILE, MOTION_TRUE_FILE):
        trajectory = _maybe_trajectory(out_dir / name)
        if trajectory is not None:
            target = slice_dir / name
            save_trajectory_csv(trajectory.relative_to_first(), target)
            artifacts[Path(name).stem] = target
    artifacts["config"] = config.write_resolved(out_dir)
    return artifacts


# --- batch -------------------------------------------------------------------


def run_pipeline(config: ExperimentConfig, out: Optional[Union[str, Path]] = None) -> Artifacts:
    """phantom, simulate, reconstruct and export-slices in one output directory."""
    artifacts: Artifacts = {}
    for command in (cmd_phantom, cmd_simulate, cmd_reconstruct, cmd_export_slices):
        artifacts.update(command(config, out))
    return artifacts


def _run_config_file(args: Tuple[str, Optional[str], List[str]]) -> Artifacts:
    path, preset, overrides = args
    return run_pipeline(load_config(path, preset, overrides))


def run_batch(
    config_paths: Iterable[Union[str, Path]],
    jobs: int = 1,
    preset: Optional[str] = None,
    overrides: Sequence[str] = (),
) -> List[Artifacts]:
    """Run independent experiment configs, in parallel processes when ``jobs > 1``.

    Results are returned in input order.
    """
    tasks = [(str(p), preset, list(overrides)) for p in config_paths]
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(tasks) <= 1:
        return [_run_config_file(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_config_file, tasks))
