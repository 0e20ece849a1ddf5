"""Shared fixtures: model, small collected dataset, stub encoder."""

import numpy as np
import pytest

from latentgait import dataset as ds
from latentgait.autoencoder import AeConfig, AutoencoderModel, build_autoencoder
from latentgait.sim import RobotModel


@pytest.fixture(scope="session")
def model():
    return RobotModel()


@pytest.fixture(scope="session")
def mini_dataset(model):
    """Two short gaits: enough samples for realistic standardizer stats."""
    return ds.collect_gaits(model, velocity_grid=(0.0, 0.4), duration_per_gait=2.0,
                            rate=50.0, seed=123)


@pytest.fixture(scope="session")
def stub_encoder(mini_dataset):
    """Untrained autoencoder with real input statistics: correct shapes and
    bounded outputs, no reconstruction quality. Enough for env/eval plumbing."""
    cfg = AeConfig(latent_dim=2)
    enc, dec = build_autoencoder(mini_dataset.n_features, cfg,
                                 np.random.default_rng(0))
    return AutoencoderModel(encoder=enc, decoder=dec, latent_dim=2,
                            stats=mini_dataset.stats)
