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

"""Experiment configuration.

A run is described by an :class:`ExperimentConfig` tree. Values are
resolved in three layers: a bundled preset, then the config file (JSON or
YAML), then ``--set section.key=value`` overrides. The fully resolved tree
is written next to every command's outputs as ``config.resolved.json``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import types
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from .acquisition import ORDERING_SCHEMES
from .motion import SEVERITY_LEVELS
from .solver import SolverConfig

SCHEMA_VERSION = 1
RESOLVED_CONFIG_NAME = "config.resolved.json"
MASK_KINDS = ("cartesian", "poisson", "full")
MOTION_MODES = ("inter", "intra")


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad type, bad override or unsupported schema."""


@dataclass
class PhantomConfig:
    shape: List[int] = field(default_factory=lambda: [32, 32, 32])
    spacing: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    seed: int = 0
    ellipsoids: Optional[List[Dict[str, Any]]] = None
    phase_coeffs: Optional[List[float]] = None
    texture: float = 0.05
    input_path: Optional[str] = None


@dataclass
class CoilConfig:
    num_coils: int = 4
    seed: int = 0


@dataclass
class PlanConfig:
    mask: str = "cartesian"
    acceleration: float = 2.0
    acl_fraction: float = 0.04
    ordering: str = "linear_circular"
    shots: int = 16
    states_per_shot: int = 1
    readout_axis: int = 0
    seed: int = 0


@dataclass
class MotionConfig:
    severity: str = "mild"
    scale: float = 0.5
    lengthscale: Optional[float] = None
    random_amplitude: bool = False
    mode: str = "inter"
    seed: int = 0


@dataclass
class NoiseConfig:
    snr_db: Optional[float] = 30.0
    sigma: float = 0.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "default"
    output_dir: str = "runs/default"
    normalize_percentile: float = 99.0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    coils: CoilConfig = field(default_factory=CoilConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def validate(self) -> None:
        """Cross-field checks; raises :class:`ConfigError`."""
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if len(self.phantom.shape) != 3 or any(n < 1 for n in self.phantom.shape):
            raise ConfigError(f"phantom.shape must be three positive integers, got {self.phantom.shape}")
        if len(self.phantom.spacing) != 3 or any(s <= 0 for s in self.phantom.spacing):
            raise ConfigError(f"phantom.spacing must be three positive numbers, got {self.phantom.spacing}")
        if self.coils.num_coils < 1:
            raise ConfigError(f"coils.num_coils must be >= 1, got {self.coils.num_coils}")
        if self.plan.mask not in MASK_KINDS:
            raise ConfigError(f"plan.mask must be one of {MASK_KINDS}, got {self.plan.mask!r}")
        if self.plan.ordering not in ORDERING_SCHEMES:
            raise ConfigError(f"plan.ordering must be one of {ORDERING_SCHEMES}, got {self.plan.ordering!r}")
        if self.plan.readout_axis not in (0, 1, 2):
            raise ConfigError(f"plan.readout_axis must be 0, 1 or 2, got {self.plan.readout_axis}")
        if self.motion.severity not in tuple(SEVERITY_LEVELS) + ("none",):
            raise ConfigError(f"motion.severity must be one of {sorted(SEVERITY_LEVELS) + ['none']}, got {self.motion.severity!r}")
        if self.motion.mode not in MOTION_MODES:
            raise ConfigError(f"motion.mode must be one of {MOTION_MODES}, got {self.motion.mode!r}")
        if self.motion.mode == "inter" and self.plan.states_per_shot != 1:
            raise ConfigError(
                f"motion.mode='inter' needs plan.states_per_shot=1, got {self.plan.states_per_shot}; use mode 'intra'"
            )
        if self.motion.mode == "intra" and self.plan.states_per_shot < 2:
            raise ConfigError("motion.mode='intra' needs plan.states_per_shot >= 2")
        if self.noise.sigma < 0.0:
            raise ConfigError(f"noise.sigma must be >= 0, got {self.noise.sigma}")
        if not 0.0 < self.normalize_percentile <= 100.0:
            raise ConfigError(f"normalize_percentile must lie in (0, 100], got {self.normalize_percentile}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write_resolved(self, out_dir: Union[str, Path]) -> Path:
        """Write ``config.resolved.json`` into ``out_dir`` and return its path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_CONFIG_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


_FULL_SCALE_SOLVER = {
    "num_steps": 200,
    "sigma_min": 0.002,
    "sigma_max": 80.0,
    "rho": 7.0,
    "zeta_start": 1.0,
    "zeta_end": 0.1,
    "gamma": 200.0,
    "eta_r": 1000.0,
    "eta_t": 50.0,
    "dc_threshold": 0.75,
    "dc_window": 40,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "test": {
        "output_dir": "runs/test",
        "phantom": {"shape": [16, 16, 16]},
        "coils": {"num_coils": 2},
        "plan": {"shots": 4},
        "motion": {"scale": 0.25},
        "solver": {"num_steps": 8, "dc_window": 2, "cg_max_iter": 50},
    },
    "paperlike": {
        "output_dir": "runs/paperlike",
        "plan": {"acceleration": 4.0, "shots": 52},
        "motion": {"severity": "severe", "scale": 1.0},
        "solver": dict(_FULL_SCALE_SOLVER),
    },
    "paperlike_nonsevere": {
        "output_dir": "runs/paperlike_nonsevere",
        "plan": {"acceleration": 4.0, "shots": 52},
        "motion": {"severity": "moderate", "scale": 1.0},
        "solver": dict(_FULL_SCALE_SOLVER, num_steps=100),
    },
    "cc359_like": {
        "output_dir": "runs/cc359_like",
        "phantom": {"shape": [32, 32, 28]},
        "coils": {"num_coils": 12},
        "plan": {"acceleration": 4.0, "shots": 52},
        "motion": {"severity": "moderate", "scale": 1.0},
        "solver": dict(_FULL_SCALE_SOLVER, gamma=2000.0, num_steps=100),
    },
    "pmoc3d_like": {
        "output_dir": "runs/pmoc3d_like",
        "phantom": {"shape": [48, 48, 48]},
        "coils": {"num_coils": 8},
        "plan": {"mask": "poisson", "acceleration": 4.9, "ordering": "interleaved_center_first", "shots": 52},
        "motion": {"severity": "moderate", "scale": 1.0},
        "solver": dict(_FULL_SCALE_SOLVER, num_steps=100),
    },
}


def _merge(target: Dict[str, Any], source: Dict[str, Any], prefix: str = "") -> None:
    for key, value in source.items():
        path = f"{prefix}{key}"
        if key not in target:
            raise ConfigError(f"Unknown config key {path!r}")
        if isinstance(target[key], dict) and isinstance(value, dict):
            _merge(target[key], value, path + ".")
        else:
            target[key] = copy.deepcopy(value)


def _check_value(value: Any, hint: Any, path: str) -> Any:
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        args = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_value(value, args[0], path)
    if origin in (list, List, tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {type(value).__name__}")
        item = get_args(hint)[0] if get_args(hint) else Any
        return [_check_value(v, item, f"{path}[{k}]") for k, v in enumerate(value)]
    if hint is Any or origin in (dict, Dict):
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping, got {type(value).__name__}")
        return _build(hint, value, path + ".")
    return value


def _build(cls: Any, data: Dict[str, Any], prefix: str = "") -> Any:
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown config key {prefix + unknown[0]!r}")
    kwargs = {name: _check_value(value, hints[name], prefix + name) for name, value in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"Invalid {prefix.rstrip('.') or 'config'}: {e}") from e


def from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a (possibly partial) mapping over the defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"Config must be a mapping, got {type(data).__name__}")
    resolved = asdict(ExperimentConfig())
    _merge(resolved, data)
    config = _build(ExperimentConfig, resolved)
    config.validate()
    return config


def parse_override(text: str) -> Tuple[List[str], Any]:
    """Split ``section.key=value``; the value is parsed as YAML so numbers, booleans and lists type correctly."""
    if "=" not in text:
        raise ConfigError(f"Override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"Override {text!r} has an unparsable value: {e}") from e
    return path, value


def _nest(path: List[str], value: Any) -> Dict[str, Any]:
    nested: Dict[str, Any] = {path[-1]: value}
    for part in reversed(path[:-1]):
        nested = {part: nested}
    return nested


def load_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Iterable[str] = (),
) -> ExperimentConfig:
    """Resolve preset, file and overrides into an :class:`ExperimentConfig`.

    The preset is taken from ``preset`` if given, else from the file's
    ``preset`` key, else ``"default"``.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ConfigError: For unknown keys, bad types or bad overrides.
    """
    file_data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"Failed to parse config {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"Config {path} must contain a mapping at the top level")
        file_data = loaded or {}
    name = preset or file_data.get("preset") or "default"
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    resolved = asdict(ExperimentConfig())
    _merge(resolved, copy.deepcopy(PRESETS[name]))
    _merge(resolved, file_data)
    for text in overrides:
        key_path, value = parse_override(text)
        _merge(resolved, _nest(key_path, value))
    resolved["preset"] = name
    config = _build(ExperimentConfig, resolved)
    config.validate()
    return config
