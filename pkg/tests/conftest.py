import numpy as np
import pytest

from camera_sampler import Camera
from diffusion_math import NoiseSchedule
from verify_suites import random_cloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def small_cloud(rng):
    return random_cloud(rng, 5, scale_range=(0.08, 0.2))


@pytest.fixture
def camera16():
    return Camera(30.0, 20.0, 2.5, 50.0, 16, 16)
