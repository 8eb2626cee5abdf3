import numpy as np
import pytest

from convprune.dataset import generate_dataset
from convprune.network import init_network


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 instances x 8 images: big enough to train, small enough for CI."""
    root = tmp_path_factory.mktemp("smallds")
    return generate_dataset(root, instances=12, images_per_instance=8, seed=5)


@pytest.fixture(scope="session")
def small_arch():
    """Two-block net on the synthetic 3x32x32 images, much lighter than tinynet."""
    return {
        "input_shape": [3, 32, 32],
        "layers": [
            {"kind": "conv", "channels": 6, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "relu"},
            {"kind": "maxpool2"},
            {"kind": "conv", "channels": 8, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "relu"},
            {"kind": "maxpool2"},
        ],
    }


@pytest.fixture()
def small_model(small_arch):
    return init_network(small_arch, seed=0)
