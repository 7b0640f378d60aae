import numpy as np
import pytest

from cascn.data import synth_dataset
from cascn.model import ModelConfig, build


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def desk_config():
    return ModelConfig.desk(seed=1)


@pytest.fixture(scope="session")
def desk_model(desk_config):
    return build(desk_config)


@pytest.fixture(scope="session")
def synth_samples():
    return synth_dataset(8, (48, 64), seed=7)
