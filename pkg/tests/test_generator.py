import numpy as np
import pytest

from arflow.checkpoint import Bundle
from arflow.errors import DataError, GrammarError, UntrainedError
from arflow.generator import Generator, PipelineGenerator
from arflow.render import IMAGE_SIZE


@pytest.fixture
def generator(bundle):
    return PipelineGenerator(bundle, ode_steps=2)


def test_default_generator():
    image = np.ones((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    assert not Generator().generate("a circle", 0).any()
    np.testing.assert_array_equal(Generator().edit(image, "remove the circle", "both", 0), image)


def test_generate(generator):
    image = generator.generate("a red circle", seed=0)
    assert image.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    assert image.min() >= 0.0 and image.max() <= 1.0
    np.testing.assert_array_equal(image, generator.generate("a red circle", seed=0))


def test_generate_outside_of_the_grammar(generator):
    with pytest.raises(GrammarError):
        generator.generate("a purple circle", seed=0)


@pytest.mark.parametrize("mode", ["none", "cross_attn", "noise_concat", "both"])
def test_edit(generator, mode):
    ref = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    assert generator.edit(ref, "Keep the image unchanged.", mode, seed=0).shape == ref.shape


def test_edit_wrong_size(generator):
    with pytest.raises(DataError):
        generator.edit(np.zeros((16, 16, 3)), "Keep the image unchanged.", "both", seed=0)


def test_edit_outside_of_the_grammar(generator):
    with pytest.raises(GrammarError):
        generator.edit(np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3)), "paint it black", "both", seed=0)


def test_codecs_only(codebook, vae):
    with pytest.raises(UntrainedError):
        PipelineGenerator(Bundle(codebook, vae))
