import numpy as np
import pytest
import torch

from semiseg import data as dat
from semiseg import model as mod


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """Small shared dataset: 20 items, 32x32, 3 classes."""
    root = tmp_path_factory.mktemp("tiny_ds")
    index = dat.synth_dataset(str(root), 20, 32, 3, seed=5)
    return index


@pytest.fixture()
def small_net():
    return mod.TinySegNet(mod.TinyNetConfig(num_classes=3, widths=(8, 12, 12), feature_dim=12, decoder_width=12, init_seed=3))


@pytest.fixture()
def rand_image():
    rng = np.random.default_rng(0)
    return rng.random((3, 32, 32)).astype(np.float32)


def seeded_batch(n=4, c=3, side=32, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, c, side, side)).astype(np.float32)


@pytest.fixture()
def torch_gen():
    def make(seed=0):
        g = torch.Generator()
        g.manual_seed(seed)
        return g

    return make
