"""Shared fixtures: small shapes, camera rigs, tiny configs and a tiny dataset."""
from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from mvocc.components.config import DatasetConfig, ModelConfig
from mvocc.components.geometry import CameraRig, Intrinsics, look_at
from mvocc.components.scenegen import ShapeSpec, Sphere, generate_dataset
from mvocc.components.stores import clear_stores


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance test (needs --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _fresh_state():
    torch.manual_seed(0)
    torch.set_num_threads(1)
    clear_stores()
    yield


@pytest.fixture
def sphere():
    return ShapeSpec(Sphere((0.0, 0.0, 0.0), 0.5), 'blobby', (0.8, 0.6, 0.4))


@pytest.fixture
def intrinsics():
    return Intrinsics.centered(32, 20.0)


def gradients_match(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-8):
    """Central finite differences vs autograd (inputs should be float64)"""
    return torch.autograd.gradcheck(fn, inputs, eps=eps, atol=atol, rtol=rtol, raise_exception=False)


def random_rotation(rng):
    """Uniformly random rotation matrix drawn from a numpy Generator"""
    return Rotation.random(random_state=rng).as_matrix()


def orbit_rigs(intrinsics, n, radius=2.2, seed=0):
    """n cameras on a sphere of the given radius, all looking at the origin"""
    rng = np.random.default_rng(seed)
    rigs = []
    while len(rigs) < n:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        if abs(direction[1]) > 0.95:
            continue
        rigs.append(CameraRig(intrinsics, look_at(direction * radius, np.zeros(3))))
    return rigs


@pytest.fixture
def rigs(intrinsics):
    return orbit_rigs(intrinsics, 5)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(image_size=16, feature_channels=8, hidden=8, g_blocks=1, f_blocks=2,
                       encoder_depth=2, encoder_base=4, dtype='float64')


@pytest.fixture(scope='session')
def tiny_dataset_config():
    return DatasetConfig(train_per_family=2, test_per_family=1, image_size=16, focal=10.0,
                         views_per_shape=5, pool_size=512, seed=3)


@pytest.fixture(scope='session')
def tiny_dataset(tiny_dataset_config):
    return generate_dataset(tiny_dataset_config)
