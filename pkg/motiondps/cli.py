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

"""Command-line interface for motiondps."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .config import PRESETS, ExperimentConfig, load_config
from .experiment import cmd_evaluate, cmd_export_slices, cmd_phantom, cmd_reconstruct, cmd_simulate, run_batch
from .solver import SolverAbort


def _load(args) -> ExperimentConfig:
    return load_config(args.config, args.preset, args.overrides)


def _report(artifacts: Dict[str, Path]) -> None:
    for name, path in artifacts.items():
        print(f"Wrote {name}: {path}")


def phantom_command(args) -> None:
    """Handle phantom command."""
    _report(cmd_phantom(_load(args), args.out))


def simulate_command(args) -> None:
    """Handle simulate command."""
    _report(cmd_simulate(_load(args), args.out))


def reconstruct_command(args) -> None:
    """Handle reconstruct command."""
    _report(cmd_reconstruct(_load(args), args.out))


def evaluate_command(args) -> None:
    """Handle evaluate command."""
    _report(cmd_evaluate(_load(args), args.out))


def export_slices_command(args) -> None:
    """Handle export-slices command."""
    _report(cmd_export_slices(_load(args), args.out))


def batch_command(args) -> None:
    """Handle batch command."""
    for artifacts in run_batch(args.configs, args.jobs, args.preset, args.overrides):
        _report(artifacts)


def _add_common(parser: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        parser.add_argument("--config", default=None, help="Path to experiment config (JSON or YAML)")
        parser.add_argument("--out", default=None, help="Output directory (default: output_dir from the config)")
    parser.add_argument(
        "--preset", default=None, choices=sorted(PRESETS), help="Bundled base config (default: from file or 'default')"
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config field by dotted path, e.g. solver.num_steps=50 (repeatable)",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdps",
        description="motiondps - motion-compensated 3D multi-coil MRI reconstruction with score priors",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    commands = [
        ("phantom", "Generate the ground-truth phantom and coil maps", phantom_command),
        ("simulate", "Simulate motion-corrupted multi-coil k-space", simulate_command),
        ("reconstruct", "Jointly reconstruct image, coils and motion", reconstruct_command),
        ("evaluate", "Compute PSNR, SSIM and motion RMSE of a reconstruction", evaluate_command),
        ("export-slices", "Export central slices as PNG plus trajectory CSVs", export_slices_command),
    ]
    for name, help_text, func in commands:
        sub = subparsers.add_parser(name, help=help_text)
        _add_common(sub)
        sub.set_defaults(func=func)

    batch_parser = subparsers.add_parser("batch", help="Run several configs end to end in parallel processes")
    batch_parser.add_argument("configs", nargs="+", help="Experiment config files")
    batch_parser.add_argument("--jobs", type=int, default=1, help="Parallel processes (default: 1)")
    _add_common(batch_parser, with_config=False)
    batch_parser.set_defaults(func=batch_command)
    return parser


def main(argv: Optional[List[str]] = None) -> None:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(1)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except SolverAbort as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(2)
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
