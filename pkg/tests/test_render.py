import itertools

import numpy as np
import pytest

from arflow.data import sample_scene
from arflow.render import BACKGROUND, IMAGE_SIZE, PALETTE, cell_templates, parse, render
from arflow.scene import GRID, Glyphs, SceneObject, SceneSpec


def test_render_empty_scene():
    img = render(SceneSpec())
    assert img.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    assert img.dtype == np.float32
    np.testing.assert_array_equal(img, np.broadcast_to(BACKGROUND, img.shape))


def test_render_red_square_top_left():
    img = render(SceneSpec((SceneObject(0, 0, "square", "red"),)))

    expected = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    for y, x in itertools.product(range(6), range(6)):
        expected[y, x] = PALETTE["red"]
    np.testing.assert_array_equal(img, expected)


def test_parse_background():
    assert parse(np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))) == SceneSpec()


@pytest.mark.parametrize("category", ["single", "two-object", "counting", "colors", "position", "text"])
@pytest.mark.parametrize("seed", range(5))
def test_parse_render_round_trip(category, seed):
    scene, _ = sample_scene(seed, category)
    assert parse(render(scene)) == scene


def test_parse_text():
    scene = SceneSpec((SceneObject(0, 0, "circle", "cyan"),), Glyphs("XYZ", 3, 1))
    assert parse(render(scene)) == scene


@pytest.mark.parametrize("cell", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_templates_are_far_apart(cell):
    templates, _ = cell_templates(cell)
    flat = templates.reshape(len(templates), -1)
    distances = (flat[:, None] != flat[None]).sum(axis=-1)
    np.fill_diagonal(distances, 99)
    assert distances.min() > 2


@pytest.mark.parametrize("seed", range(3))
def test_parse_is_robust_to_one_flipped_pixel(seed):
    rng = np.random.default_rng(seed)
    scene, _ = sample_scene(seed, "counting")
    img = render(scene)
    for _ in range(10):
        noisy = img.copy()
        y, x = rng.integers(IMAGE_SIZE, size=2)
        noisy[y, x] = rng.random(3) > 0.5
        assert parse(noisy) == scene


def test_parse_any_image_is_valid():
    rng = np.random.default_rng(0)
    scene = parse(rng.random((IMAGE_SIZE, IMAGE_SIZE, 3)))
    assert all(0 <= o.row < GRID and 0 <= o.col < GRID for o in scene.objects)
