import numpy as np
import pytest

from cyclegan3d.trainer import TrainConfig, UnpairedDataset
from cyclegan3d.voldata import DatasetManifest, make_phantom_dataset


def tiny_config(**kw):
    base = dict(epochs=3, decay_start=1, lr=2e-4, base_filters=2, disc_filters=2, n_blocks=1, n_down=2,
                pool_size=2, depth_slices=5, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    make_phantom_dataset(str(root), 3, shape=(7, 32, 32), seed=4, n_eval=2)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_root):
    man = DatasetManifest.read(str(tiny_root / "manifest.json"))
    # unequal domain sizes exercise the cycling of the smaller one
    return UnpairedDataset(man.load("oct", "train"), man.load("confocal", "train")[:2])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
