import numpy as np
import pytest

from dualtta.data import SpuriousDatasetConfig, gen_spurious_dataset
from dualtta.model import build_reference_net, pretrain


@pytest.fixture(scope="session")
def small_splits():
    return gen_spurious_dataset(SpuriousDatasetConfig(n_train=256, n_val=128, n_test=192, seed=11))


@pytest.fixture(scope="session")
def pretrained():
    """Reference net after 5 epochs on the default source split (seed 0)."""
    splits = gen_spurious_dataset(SpuriousDatasetConfig(seed=0))
    tr, va = splits["source_train"], splits["source_val"]
    model, report = pretrain(build_reference_net(2, 3, 0), tr.images, tr.labels, 5, 0.05, seed=0,
                             val=(va.images, va.labels))
    return model, report, splits


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
