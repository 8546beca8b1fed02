"""Module defining the symbolic description of a synthetic image (`SceneSpec`)
and the edit operations that can be applied to it.

A scene is a 4x4 grid of cells. Each cell holds at most one object (a shape
with a color), or one letter of the glyph text. The glyph text occupies
consecutive cells of a single row, starting at its anchor cell.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

from arflow.errors import DataError, EditConflictError


GRID = 4
MAX_OBJECTS = 6
MAX_TEXT = 3
SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
NUMBERS = ("one", "two", "three", "four")

Cell = Tuple[int, int]


@dataclass(frozen=True, order=True)
class SceneObject:
    """One object of the scene.

    Args:
        row (int): Row of the cell holding the object.
        col (int): Column of the cell holding the object.
        shape (str): One of `SHAPES`.
        color (str): One of `COLORS`.
    """

    row: int
    col: int
    shape: str
    color: str

    @property
    def cell(self) -> Cell:
        return (self.row, self.col)

    def describe(self) -> str:
        """Name of the object as used in instructions (`red circle`)."""
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Glyphs:
    """Text drawn in the scene, one letter per cell.

    Args:
        text (str): Uppercase letters.
        row (int): Row of the anchor cell (the first letter).
        col (int): Column of the anchor cell.
    """

    text: str
    row: int
    col: int

    @property
    def cells(self) -> List[Cell]:
        return [(self.row, self.col + i) for i in range(len(self.text))]


@dataclass(frozen=True)
class SceneSpec:
    """Symbolic description of a synthetic image.

    Objects are always kept sorted in row-major order of their cells, so two
    scenes holding the same objects compare equal.

    Args:
        objects (Tuple[SceneObject, ...], optional): Objects of the scene.
        glyphs (Optional[Glyphs], optional): Text of the scene.
    """

    objects: Tuple[SceneObject, ...] = field(default_factory=tuple)
    glyphs: Optional[Glyphs] = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def occupied(self) -> Set[Cell]:
        """Cells used by an object or a letter."""
        cells = {o.cell for o in self.objects}
        if self.glyphs is not None:
            cells.update(self.glyphs.cells)
        return cells

    def object_at(self, cell: Cell) -> Optional[SceneObject]:
        for o in self.objects:
            if o.cell == cell:
                return o
        return None

    def find(self, shape: str, color: Optional[str] = None) -> List[SceneObject]:
        """Objects with the given shape (and color, if given)."""
        return [o for o in self.objects if o.shape == shape and (color is None or o.color == color)]

    def to_dict(self) -> Dict:
        """Plain representation, used in the dataset records."""
        return {
            "objects": [{"shape": o.shape, "color": o.color, "cell": [o.row, o.col]} for o in self.objects],
            "glyphs": None
            if self.glyphs is None
            else {"text": self.glyphs.text, "anchor": [self.glyphs.row, self.glyphs.col]},
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "SceneSpec":
        try:
            objects = tuple(SceneObject(o["cell"][0], o["cell"][1], o["shape"], o["color"]) for o in d["objects"])
            g = d.get("glyphs")
            glyphs = None if g is None else Glyphs(g["text"], g["anchor"][0], g["anchor"][1])
        except (KeyError, IndexError, TypeError) as e:
            raise DataError(f"Invalid scene description : {d!r}") from e
        return cls(objects, glyphs)

    def digest(self) -> str:
        """Canonical hash of the scene, used to deduplicate the datasets."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def validate_scene(scene: SceneSpec):
    """Check that the scene respects every constraint of the world.

    Args:
        scene (SceneSpec): Scene to check.

    Raises:
        DataError: If the scene is invalid.
    """
    if len(scene.objects) > MAX_OBJECTS:
        raise DataError(f"A scene holds at most {MAX_OBJECTS} objects (got {len(scene.objects)})")

    cells = set()
    for o in scene.objects:
        if o.shape not in SHAPES or o.color not in COLORS:
            raise DataError(f"Unknown object : {o}")
        if not (0 <= o.row < GRID and 0 <= o.col < GRID):
            raise DataError(f"Object outside of the grid : {o}")
        if o.cell in cells:
            raise DataError(f"Two objects share the cell {o.cell}")
        cells.add(o.cell)

    if scene.glyphs is not None:
        g = scene.glyphs
        if not (1 <= len(g.text) <= MAX_TEXT) or any(c not in LETTERS for c in g.text):
            raise DataError(f"Glyph text should be 1 to {MAX_TEXT} uppercase letters (got {g.text!r})")
        if not (0 <= g.row < GRID and 0 <= g.col and g.col + len(g.text) <= GRID):
            raise DataError(f"Glyph text {g.text!r} doesn't fit in the grid from {(g.row, g.col)}")
        if cells & set(g.cells):
            raise DataError("Glyph cells overlap objects")


class EditKind(Enum):
    ADD = "add"
    REMOVE = "remove"
    RECOLOR = "recolor"
    MOVE = "move"


@dataclass(frozen=True)
class EditOp:
    """Edit operation applied to a scene.

    Args:
        kind (EditKind): Type of edit.
        target (SceneObject): For `ADD`, the object to add (with its cell).
            Otherwise the object of the scene to edit.
        color (Optional[str], optional): New color, for `RECOLOR`.
        cell (Optional[Cell], optional): Destination cell, for `MOVE`.
    """

    kind: EditKind
    target: SceneObject
    color: Optional[str] = None
    cell: Optional[Cell] = None

    def touched_cells(self) -> Set[Cell]:
        """Cells whose content changes with this edit (source and destination
        for a move).
        """
        cells = {self.target.cell}
        if self.kind == EditKind.MOVE:
            cells.add(self.cell)
        return cells

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind.value,
            "target": {"shape": self.target.shape, "color": self.target.color, "cell": list(self.target.cell)},
            "color": self.color,
            "cell": None if self.cell is None else list(self.cell),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "EditOp":
        t = d["target"]
        return cls(
            EditKind(d["kind"]),
            SceneObject(t["cell"][0], t["cell"][1], t["shape"], t["color"]),
            color=d.get("color"),
            cell=None if d.get("cell") is None else tuple(d["cell"]),
        )


def cell_words(cell: Cell) -> str:
    """Words locating a cell in an instruction (`row one column three`)."""
    return f"row {NUMBERS[cell[0]]} column {NUMBERS[cell[1]]}"


def _unique_target(scene: SceneSpec, target: SceneObject) -> SceneObject:
    if scene.object_at(target.cell) != target:
        raise EditConflictError(f"There is no {target.describe()} at {target.cell}")
    if len(scene.find(target.shape, target.color)) > 1:
        raise EditConflictError(f"The {target.describe()} is ambiguous, the scene holds several of them")
    return target


def apply_edit(scene: SceneSpec, op: EditOp) -> Tuple[SceneSpec, str]:
    """Apply an edit operation to a scene.

    Args:
        scene (SceneSpec): Scene to edit.
        op (EditOp): Edit to apply.

    Raises:
        EditConflictError: If the edit can't be applied to this scene (target
            missing or ambiguous, destination cell occupied, etc...).

    Returns:
        The edited scene.
        The canonical instruction describing the edit.
    """
    objects = list(scene.objects)
    t = op.target

    if op.kind == EditKind.ADD:
        if t.cell in scene.occupied():
            raise EditConflictError(f"Can't add a {t.describe()} : cell {t.cell} is occupied")
        if len(objects) >= MAX_OBJECTS:
            raise EditConflictError(f"Can't add a {t.describe()} : the scene already holds {MAX_OBJECTS} objects")
        if scene.find(t.shape, t.color):
            raise EditConflictError(f"Can't add a {t.describe()} : the scene already holds one")
        objects.append(t)
        instruction = f"add a {t.describe()} at {cell_words(t.cell)}"
    elif op.kind == EditKind.REMOVE:
        objects.remove(_unique_target(scene, t))
        instruction = f"remove the {t.describe()}"
    elif op.kind == EditKind.RECOLOR:
        _unique_target(scene, t)
        if op.color is None or op.color == t.color:
            raise EditConflictError(f"Can't recolor the {t.describe()} to {op.color}")
        if scene.find(t.shape, op.color):
            raise EditConflictError(f"Can't recolor the {t.describe()} : a {op.color} {t.shape} already exists")
        objects[objects.index(t)] = replace(t, color=op.color)
        instruction = f"make the {t.describe()} {op.color}"
    elif op.kind == EditKind.MOVE:
        _unique_target(scene, t)
        if op.cell is None or not all(0 <= x < GRID for x in op.cell):
            raise EditConflictError(f"Invalid destination cell : {op.cell}")
        if op.cell in scene.occupied():
            raise EditConflictError(f"Can't move the {t.describe()} : cell {op.cell} is occupied")
        objects[objects.index(t)] = replace(t, row=op.cell[0], col=op.cell[1])
        instruction = f"move the {t.describe()} to {cell_words(op.cell)}"
    else:
        raise EditConflictError(f"Unknown edit kind : {op.kind}")

    edited = SceneSpec(tuple(objects), scene.glyphs)
    validate_scene(edited)
    return edited, instruction
