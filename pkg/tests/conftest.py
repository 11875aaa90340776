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

"""Shared fixtures: small random problems with known ground truth."""

import numpy as np
import pytest

from motiondps.acquisition import make_cartesian_mask, make_full_mask, make_ordering
from motiondps.phantom import default_phantom_spec, make_phantom, make_synthetic_coils


def random_complex(shape, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def smooth_volume(shape, seed=0):
    """Smooth complex blob that vanishes towards the border."""
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
    r2 = sum(((g - (n - 1) / 2) / (0.3 * n)) ** 2 for g, n in zip(grids, shape))
    rng = np.random.default_rng(seed)
    phase = sum(rng.uniform(-0.3, 0.3) * g / n for g, n in zip(grids, shape))
    return np.exp(-r2) * np.exp(1j * phase)


@pytest.fixture
def full_plan_8():
    """Fully sampled 8³ plan with 4 inter-shot states."""
    mask = make_full_mask((8, 8))
    return make_ordering(mask, "linear_circular", shots=4, volume_shape=(8, 8, 8))


@pytest.fixture
def cartesian_plan_16():
    """R=2 Cartesian 16³ plan with 8 states."""
    mask = make_cartesian_mask((16, 16), 2.0, 0.04, seed=1)
    return make_ordering(mask, "linear_circular", shots=8, volume_shape=(16, 16, 16))


@pytest.fixture
def phantom_16():
    return make_phantom(default_phantom_spec((16, 16, 16), seed=0)).data


@pytest.fixture
def coils_16():
    return make_synthetic_coils((16, 16, 16), 4, seed=0).maps
