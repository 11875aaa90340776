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

"""motiondps - motion-compensated 3D multi-coil MRI reconstruction with score priors.

The package simulates motion-corrupted multi-shot k-space from synthetic
phantoms and jointly reconstructs the image, the coil sensitivities and
the rigid motion trajectory by diffusion posterior sampling with
analytic score priors.
"""

from .acquisition import SamplingPlan, forward_full, adjoint_full, make_ordering
from .motion import MotionState, MotionTrajectory, warp
from .priors import QuadraticScorePrior, IdentityScorePrior, ScorePrior
from .solver import ReconResult, SolverAbort, SolverConfig, run
from .volume import CoilSet, ComplexVolume, KSpaceSet

__all__ = [
    "CoilSet",
    "ComplexVolume",
    "IdentityScorePrior",
    "KSpaceSet",
    "MotionState",
    "MotionTrajectory",
    "QuadraticScorePrior",
    "ReconResult",
    "SamplingPlan",
    "ScorePrior",
    "SolverAbort",
    "SolverConfig",
    "adjoint_full",
    "forward_full",
    "make_ordering",
    "run",
    "warp",
]
