import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adaptive_kb.model import DetInitModel, JointModel, RandomInitModel, TimeGrid

settings.register_profile("pkg", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")


def det_spec(eps=0.01, theta=1.0, f=1.0, sigma=1.0, a=0.0, b=1.0, bounds=(-10.0, 10.0)):
    return DetInitModel(f, sigma, a, b, eps, bounds, theta)


def joint_spec(eps=0.01, theta=(2.5, 0.0), f=1.0, sigma=1.0, b=0.3, drift=(0.0, 1.0),
               bounds=((0.1, 10.0), (-1.0, 1.0))):
    return JointModel(f, sigma, b, drift, eps, bounds, theta)


def random_spec(eps=0.01, theta=1.0, f=1.0, sigma=1.0, b=1.0, d2=1.0, bounds=(0.1, 5.0)):
    return RandomInitModel(f, sigma, b, d2, eps, bounds, theta)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def grid1k():
    return TimeGrid(1.0, 1024)
