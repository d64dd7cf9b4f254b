"""Shared fixtures: everything is generated, no external datasets are needed."""

import numpy as np
import pytest
from scipy import ndimage

from keyreg.augment import TrainConfig
from keyreg.dataset_manager import DatasetManager
from keyreg.synthetic import fundus_image, make_pair, write_fire_dataset, write_training_folder
from keyreg.trainer import CHECKPOINT_NAME, DescriptorTrainer


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_texture(size=96, sigma=3.0, seed=0):
    """Gray texture in [0, 1] with structure at a few pixels' scale."""
    noise = np.random.default_rng(seed).normal(size=(size, size))
    tex = ndimage.gaussian_filter(noise, sigma)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return tex


@pytest.fixture
def texture():
    return smooth_texture()


@pytest.fixture
def fundus():
    return fundus_image(128, np.random.default_rng(7))


@pytest.fixture
def fundus_pair():
    return make_pair(192, np.random.default_rng(11), "S")


@pytest.fixture(scope="session")
def fire_root(tmp_path_factory):
    """FIRE-layout tree with two synthetic pairs per category."""
    root = tmp_path_factory.mktemp("fire")
    write_fire_dataset(root, pairs_per_category=2, size=160, seed=3)
    return root


@pytest.fixture(scope="session")
def train_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    write_training_folder(root, count=4, size=96, seed=5)
    return root


@pytest.fixture(scope="session")
def desk_checkpoint(tmp_path_factory):
    """Checkpoint of a network trained with the desk preset on 20 synthetic images."""
    root = tmp_path_factory.mktemp("desk")
    write_training_folder(root / "images", count=20, size=128, seed=13)
    manager = DatasetManager()
    manifest = manager.load_image_folder(root / "images")
    data = []
    for entry in manifest.images:
        loaded = manager.load_entry(manifest, entry)
        data.append((loaded.image, loaded.roi))
    DescriptorTrainer(TrainConfig.preset("desk"), root / "model").train(data)
    return root / "model" / CHECKPOINT_NAME
