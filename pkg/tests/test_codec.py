import numpy as np
import pytest

from arflow.codec import (
    N_TOKENS,
    VAE,
    Codebook,
    Codec,
    VAEConfig,
    codebook_utilization,
    decode_tokens,
    encode_tokens,
    load_image_array,
    patchify,
    quantization_error,
    train_codebook,
    train_vae,
    unpatchify,
    vae_decode,
    vae_encode,
)
from arflow.errors import DataError, UntrainedError
from arflow.render import CELL_SIZE, IMAGE_SIZE, PALETTE, render
from arflow.scene import SceneObject, SceneSpec


COLORS = list(PALETTE.values()) + [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)]


@pytest.fixture(scope="module")
def flat_images():
    # One uniform image per color : 8 distinct patches
    return np.stack([np.broadcast_to(np.array(c, dtype=np.float32), (IMAGE_SIZE, IMAGE_SIZE, 3)) for c in COLORS])


def test_patchify_unpatchify(images):
    patches = patchify(images)
    assert patches.shape == (len(images), 8, 8, 4, 4, 3)
    np.testing.assert_array_equal(unpatchify(patches), images)


def test_codebook_learns_the_palette(flat_images):
    cb = train_codebook(flat_images, seed=0, size=len(COLORS), iters=5)
    learned = {tuple(np.round(code[:3], 5)) for code in cb.codes}
    assert learned == {tuple(np.round(c, 5)) for c in np.array(COLORS, dtype=np.float32)}
    assert quantization_error(flat_images, cb) == pytest.approx(0.0, abs=1e-10)
    assert codebook_utilization(flat_images, cb) == 1.0


def test_codebook_too_few_patches(flat_images):
    with pytest.raises(DataError):
        train_codebook(flat_images, seed=0, size=len(COLORS) + 1)


def test_codebook_is_deterministic(images):
    a = train_codebook(images, seed=4, size=16, iters=3)
    b = train_codebook(images, seed=4, size=16, iters=3)
    np.testing.assert_array_equal(a.codes, b.codes)


def test_codes_are_distinct(codebook):
    assert len(np.unique(codebook.codes, axis=0)) == codebook.size


def test_uniform_image_has_uniform_tokens(codebook):
    tokens = encode_tokens(np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32), codebook)
    assert tokens.shape == (8, 8)
    assert len(np.unique(tokens)) == 1


@pytest.mark.parametrize("cell", [(0, 0), (1, 2), (3, 3)])
def test_tokens_are_local(cell):
    blank = render(SceneSpec())
    image = render(SceneSpec((SceneObject(*cell, "square", "red"),)))
    # Every patch of both images is a code, so the encoding is exact
    cb = Codebook(np.unique(patchify(np.stack([blank, image])).reshape(-1, 48), axis=0))

    changed = encode_tokens(image, cb) != encode_tokens(blank, cb)

    # A cell of 8x8 pixels is covered by 2x2 tokens
    k = CELL_SIZE // 4
    r, c = cell
    assert changed[r * k : (r + 1) * k, c * k : (c + 1) * k].any()
    changed[r * k : (r + 1) * k, c * k : (c + 1) * k] = False
    assert not changed.any()


def test_encode_batch(codebook, images):
    tokens = encode_tokens(images[:3], codebook)
    assert tokens.shape == (3, 8, 8)
    assert tokens.min() >= 0 and tokens.max() < codebook.size
    np.testing.assert_array_equal(tokens[1], encode_tokens(images[1], codebook))


def test_decode_tokens_uses_the_codes(codebook):
    tokens = np.full((8, 8), 3)
    image = decode_tokens(tokens, codebook)
    assert image.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    np.testing.assert_allclose(image[:4, :4].reshape(-1), np.clip(codebook.codes[3], 0, 1))


def test_untrained_codebook():
    with pytest.raises(UntrainedError):
        encode_tokens(np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3)), Codebook(np.zeros((4, 48)), trained=False))


def test_untrained_vae():
    vae = VAE(VAEConfig(hidden_channels=4), np.random.default_rng(0))
    with pytest.raises(UntrainedError):
        vae_encode(vae, np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3)))
    with pytest.raises(UntrainedError):
        vae_decode(vae, np.zeros((8, 8, 4)))


def test_vae_shapes(vae, images):
    latents = vae_encode(vae, images[:2])
    assert latents.shape == (2, 8, 8, 4)
    assert vae_encode(vae, images[0]).shape == (8, 8, 4)

    decoded = vae_decode(vae, latents)
    assert decoded.shape == (2, IMAGE_SIZE, IMAGE_SIZE, 3)
    assert decoded.min() >= 0 and decoded.max() <= 1


def test_vae_training_reduces_the_loss(images):
    vae, history = train_vae(images, VAEConfig(hidden_channels=8), seed=0, steps=40, lr=1e-2)
    assert vae.trained
    assert len(history) == 40
    first = np.mean([h["loss"] for h in history[:5]])
    last = np.mean([h["loss"] for h in history[-5:]])
    assert last < first


def test_latents_have_unit_scale(vae, images):
    assert vae_encode(vae, images).std() == pytest.approx(1.0, rel=1e-3)


def test_vae_training_is_deterministic(images):
    a, _ = train_vae(images, VAEConfig(hidden_channels=4), seed=1, steps=2)
    b, _ = train_vae(images, VAEConfig(hidden_channels=4), seed=1, steps=2)
    for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        np.testing.assert_array_equal(x, y, err_msg=name)


def test_codec(codebook, vae, images):
    codec = Codec(codebook, vae)
    assert codec.tokens(images[0]).size == N_TOKENS
    assert codec.images(codec.latents(images[:1])).shape == (1, IMAGE_SIZE, IMAGE_SIZE, 3)


def test_load_image_array_empty():
    with pytest.raises(DataError):
        load_image_array([])
