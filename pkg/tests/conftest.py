import numpy as np
import pytest

from metasplat.gradcheck import check_camera, random_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture
def tiny_camera():
    return check_camera(16, 16)


@pytest.fixture
def tiny_scene(rng):
    return random_scene(rng, 6, sh_degree=1)


def make_scene(rng, count, sh_degree=1):
    return random_scene(rng, count, sh_degree)
