import numpy as np
import pytest
import torch

from dctbev.data import DatasetConfig, build_dataset
from dctbev.model import ModelConfig


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(n_classes=2, input_hw=32):
    return ModelConfig(input_hw=input_hw, base_channels=4, encoder_stages=2, embed_dim=8,
                       mlp_hidden=16, n_classes=n_classes, attention_heads=2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six easy scenes at 32x32 pixels and a 16x16 grid."""
    root = tmp_path_factory.mktemp("tiny_ds")
    build_dataset(6, DatasetConfig(root=str(root), seed=3, difficulty="easy", image_size=32,
                                   grid_size=16, noise_std=0.02, val_fraction=1 / 3))
    return root
