import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from featstress.featstore import generate_synthetic  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(classes=3, per_class=40, dims=24, informative_dims=6, scale_spread=20.0, seed=5)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(seed=42, classes=4, dims=256, informative_dims=32, scale_spread=100.0)
