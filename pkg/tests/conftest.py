import numpy as np
import pytest

from arflow.arlm import ARConfig, ARModel
from arflow.checkpoint import Bundle
from arflow.codec import VAEConfig, train_codebook, train_vae
from arflow.config import CATEGORIES, GenDataConfig, TrainConfig
from arflow.data import make_dataset, sample_scene
from arflow.dit import DiTConfig, DiTModel
from arflow.render import render
from arflow.tensor import reset_tape


TINY_SIZES = {"d_model": 16, "layers": 1, "heads": 2}
CODEBOOK_SIZE = 16
LATENT_CHANNELS = 4


@pytest.fixture(autouse=True)
def empty_tape():
    # A failing test may leave operations on the tape of the main thread
    reset_tape()
    yield
    reset_tape()


@pytest.fixture(scope="session")
def images():
    scenes = [sample_scene(seed, category)[0] for category in CATEGORIES for seed in range(4)]
    return np.stack([render(s) for s in scenes])


@pytest.fixture(scope="session")
def codebook(images):
    return train_codebook(images, seed=0, size=CODEBOOK_SIZE, iters=5)


@pytest.fixture(scope="session")
def vae(images):
    vae, _ = train_vae(images, VAEConfig(hidden_channels=8, latent_channels=LATENT_CHANNELS), 0, steps=3, lr=1e-2)
    return vae


@pytest.fixture
def ar_model():
    return ARModel(ARConfig(codebook_size=CODEBOOK_SIZE, **TINY_SIZES), np.random.default_rng(0))


@pytest.fixture
def dit_model():
    config = DiTConfig(latent_channels=LATENT_CHANNELS, cond_dim=TINY_SIZES["d_model"], **TINY_SIZES)
    return DiTModel(config, np.random.default_rng(1))


@pytest.fixture
def bundle(codebook, vae, ar_model, dit_model):
    # The codecs are shared by the whole session, only the generation models are fresh
    return Bundle(codebook, vae, ar_model, dit_model)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    make_dataset(GenDataConfig(t2i=6, recon=3, edit=3, seed=3), out)
    return out


@pytest.fixture
def train_config(dataset, tmp_path):
    return TrainConfig(
        data_dir=str(dataset),
        out_dir=str(tmp_path / "train"),
        steps=2,
        batch_size=2,
        ar=TINY_SIZES,
        dit=TINY_SIZES,
        mix={"t2i": 0.5, "recon": 0.25, "edit": 0.25},
    )
