import numpy as np
import pytest

from morphkit.engine import MorphConfig, MorphEngine


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    # 10 steps keep the full pipeline comfortably sub-second per run
    return MorphConfig(k=3, n_inv=10, n_dng=10, toy_seed=42)


@pytest.fixture
def toy_engine(toy_config):
    return MorphEngine.from_config(toy_config)


@pytest.fixture
def image_pair(rng):
    a = rng.uniform(0.05, 0.95, (16, 16))
    b = rng.uniform(0.05, 0.95, (16, 16))
    return a, b
