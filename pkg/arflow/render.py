"""Module containing the rasterizer (`SceneSpec` → image) and the exact
parser (image → `SceneSpec`) of the synthetic world.

Each cell of the 4x4 grid is 8x8 pixels. Shapes are drawn from fixed 6x6
templates, shifted by one pixel in odd rows / columns. Letters come from a
3x5 bitmap font, drawn at double width.

Parsing snaps every pixel to the closest known color, then classifies each
cell as the template with the smallest Hamming distance (ties broken by the
template order : empty, shapes, letters).
"""

from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from arflow.scene import COLORS, GRID, LETTERS, SHAPES, Cell, Glyphs, SceneObject, SceneSpec


IMAGE_SIZE = 32
CELL_SIZE = 8
SHAPE_SIZE = 6

BACKGROUND = (0.0, 0.0, 0.0)
GLYPH_COLOR = (1.0, 1.0, 1.0)
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
# Label 0 is the background, 1 the glyph color, then the palette in order
KNOWN_COLORS = np.array([BACKGROUND, GLYPH_COLOR] + [PALETTE[c] for c in COLORS])
BACKGROUND_LABEL = 0
GLYPH_LABEL = 1

SHAPE_TEMPLATES = {
    "circle": [".####.", "######", "######", "######", "######", ".####."],
    "square": ["######"] * 6,
    "triangle": ["..##..", "..##..", ".####.", ".####.", "######", "######"],
}

FONT = {
    "A": ["010", "101", "111", "101", "101"],
    "B": ["110", "101", "110", "101", "110"],
    "C": ["011", "100", "100", "100", "011"],
    "D": ["110", "101", "101", "101", "110"],
    "E": ["111", "100", "110", "100", "111"],
    "F": ["111", "100", "110", "100", "100"],
    "G": ["011", "100", "101", "101", "011"],
    "H": ["101", "101", "111", "101", "101"],
    "I": ["111", "010", "010", "010", "111"],
    "J": ["001", "001", "001", "101", "010"],
    "K": ["101", "110", "100", "110", "101"],
    "L": ["100", "100", "100", "100", "111"],
    "M": ["101", "111", "101", "101", "101"],
    "N": ["110", "101", "101", "101", "101"],
    "O": ["010", "101", "101", "101", "010"],
    "P": ["110", "101", "110", "100", "100"],
    "Q": ["010", "101", "101", "110", "011"],
    "R": ["110", "101", "110", "101", "101"],
    "S": ["011", "100", "010", "001", "110"],
    "T": ["111", "010", "010", "010", "010"],
    "U": ["101", "101", "101", "101", "111"],
    "V": ["101", "101", "101", "101", "010"],
    "W": ["101", "101", "101", "111", "101"],
    "X": ["101", "101", "010", "101", "101"],
    "Y": ["101", "101", "010", "010", "010"],
    "Z": ["111", "001", "010", "100", "111"],
}
LETTER_TOP = 2
LETTER_LEFT = 1


def shape_mask(shape: str) -> np.ndarray:
    """Boolean 6x6 mask of a shape."""
    return np.array([[c == "#" for c in row] for row in SHAPE_TEMPLATES[shape]])


def letter_mask(letter: str) -> np.ndarray:
    """Boolean 8x8 mask of a letter inside its cell."""
    glyph = np.array([[c == "1" for c in row] for row in FONT[letter]])
    mask = np.zeros((CELL_SIZE, CELL_SIZE), dtype=bool)
    mask[LETTER_TOP : LETTER_TOP + 5, LETTER_LEFT : LETTER_LEFT + 6] = np.repeat(glyph, 2, axis=1)
    return mask


def shape_offset(cell: Cell) -> Tuple[int, int]:
    """Position of the top-left pixel of a shape inside its cell."""
    return (cell[0] % 2, cell[1] % 2)


def object_mask(obj_cell: Cell, shape: str) -> np.ndarray:
    """Boolean 8x8 mask of a shape drawn in the given cell."""
    dr, dc = shape_offset(obj_cell)
    mask = np.zeros((CELL_SIZE, CELL_SIZE), dtype=bool)
    mask[dr : dr + SHAPE_SIZE, dc : dc + SHAPE_SIZE] = shape_mask(shape)
    return mask


def cell_slice(cell: Cell) -> Tuple[slice, slice]:
    """Pixel region of a cell."""
    r, c = cell
    return slice(r * CELL_SIZE, (r + 1) * CELL_SIZE), slice(c * CELL_SIZE, (c + 1) * CELL_SIZE)


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize a scene.

    Args:
        scene (SceneSpec): Scene to draw.

    Returns:
        Image of shape (32, 32, 3), float32 values in [0, 1].
    """
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = BACKGROUND
    for o in scene.objects:
        img[cell_slice(o.cell)][object_mask(o.cell, o.shape)] = PALETTE[o.color]
    if scene.glyphs is not None:
        for letter, cell in zip(scene.glyphs.text, scene.glyphs.cells):
            img[cell_slice(cell)][letter_mask(letter)] = GLYPH_COLOR
    return img


@lru_cache(maxsize=None)
def cell_templates(cell: Cell) -> Tuple[np.ndarray, List[Tuple[str, Optional[str]]]]:
    """All the templates a cell can be classified as, in tie-breaking order.

    Args:
        cell (Cell): Cell of the grid (shape offsets depend on it).

    Returns:
        Label templates, of shape (n_templates, 8, 8).
        Description of each template : `("empty", None)`, `(shape, color)`
        or `("letter", letter)`.
    """
    templates = [np.full((CELL_SIZE, CELL_SIZE), BACKGROUND_LABEL)]
    names = [("empty", None)]
    for shape in SHAPES:
        mask = object_mask(cell, shape)
        for i, color in enumerate(COLORS):
            templates.append(np.where(mask, 2 + i, BACKGROUND_LABEL))
            names.append((shape, color))
    for letter in LETTERS:
        templates.append(np.where(letter_mask(letter), GLYPH_LABEL, BACKGROUND_LABEL))
        names.append(("letter", letter))
    return np.stack(templates), names


def color_labels(image: np.ndarray) -> np.ndarray:
    """Snap every pixel to the closest known color.

    Args:
        image (np.ndarray): Image of shape (32, 32, 3).

    Returns:
        Integer labels of shape (32, 32), indexing `KNOWN_COLORS`.
    """
    d = ((image[:, :, None, :].astype(np.float64) - KNOWN_COLORS[None, None]) ** 2).sum(axis=-1)
    return d.argmin(axis=-1)


def classify_cells(image: np.ndarray) -> List[List[Tuple[str, Optional[str]]]]:
    """Classify every cell of an image as its nearest template.

    Args:
        image (np.ndarray): Image of shape (32, 32, 3).

    Returns:
        Grid (rows of columns) of template descriptions.
    """
    labels = color_labels(image)
    grid = []
    for r in range(GRID):
        row = []
        for c in range(GRID):
            templates, names = cell_templates((r, c))
            distances = (templates != labels[cell_slice((r, c))][None]).sum(axis=(1, 2))
            row.append(names[int(distances.argmin())])
        grid.append(row)
    return grid


def parse(image: np.ndarray) -> SceneSpec:
    """Recover the scene drawn in an image.

    The glyph anchor is the first cell (row-major order) classified as a
    letter, and the text is made of the consecutive letter cells starting
    there, on the same row.

    Args:
        image (np.ndarray): Any image of shape (32, 32, 3).

    Returns:
        The parsed scene.
    """
    grid = classify_cells(image)
    objects = []
    anchor = None
    for r in range(GRID):
        for c in range(GRID):
            kind, value = grid[r][c]
            if kind == "letter":
                anchor = anchor or (r, c)
            elif kind != "empty":
                objects.append(SceneObject(r, c, kind, value))

    glyphs = None
    if anchor is not None:
        r, c = anchor
        text = ""
        while c + len(text) < GRID and grid[r][c + len(text)][0] == "letter":
            text += grid[r][c + len(text)][1]
        glyphs = Glyphs(text, r, c)
    return SceneSpec(tuple(objects), glyphs)

