import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oddone.core import validate_superclass_map
from oddone.synthworld import WorldConfig, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def smap():
    return validate_superclass_map(
        ["cat", "dog", "car", "bus", "chair"],
        {"cat": "animal", "dog": "animal", "car": "vehicle", "bus": "vehicle", "chair": "furniture"},
    )


@pytest.fixture(scope="session")
def tiny_world():
    return generate(WorldConfig(n_train=40, n_test=30, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, lo=0.02, hi=0.6):
    xy = rng.uniform(0.0, 0.7, size=(n, 2))
    wh = rng.uniform(lo, hi, size=(n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
