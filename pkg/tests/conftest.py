import numpy as np
import pytest
import torch

from darcnn.core import GUARD_LOG, PipelineConfig
from darcnn.data import generate_synthetic, source_spec, target_spec
from darcnn.model import DARCNN, BackboneSpec


@pytest.fixture(autouse=True)
def _reset_guard_log():
    GUARD_LOG.clear()
    yield
    GUARD_LOG.clear()


@pytest.fixture
def cfg():
    return PipelineConfig()


@pytest.fixture(scope="session")
def small_source():
    return generate_synthetic(source_spec(image_size=(32, 32), instances_per_image=(1, 3),
                                          radius_range=(3.0, 6.0)), 8, 0)


@pytest.fixture(scope="session")
def small_target():
    return generate_synthetic(target_spec(image_size=(32, 32), instances_per_image=(1, 3),
                                          radius_range=(3.0, 6.0)), 8, 0)


def make_model(seed=0, dtype=torch.float32, **spec):
    torch.manual_seed(seed)
    model = DARCNN(BackboneSpec(**spec))
    return model.to(dtype)


@pytest.fixture
def model():
    return make_model()


def rand(shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def boolean_grid(rng, shape, p=0.5):
    return rng.random(shape) < p


@pytest.fixture
def rng():
    return np.random.default_rng(0)
