import numpy as np
import pytest

from uavseg.model import Segmenter, init_weights, make_config


@pytest.fixture(scope="session")
def tiny_cfg():
    return make_config("Tiny", num_classes=8)


@pytest.fixture(scope="session")
def tiny_store(tiny_cfg):
    return init_weights(tiny_cfg, 0)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_store):
    return Segmenter(tiny_cfg, tiny_store)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
