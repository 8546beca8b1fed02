import pytest

from arflow.errors import DataError, EditConflictError
from arflow.render import parse, render
from arflow.scene import EditKind, EditOp, Glyphs, SceneObject, SceneSpec, apply_edit, cell_words, validate_scene


@pytest.fixture
def scene():
    return SceneSpec(
        (
            SceneObject(0, 0, "circle", "red"),
            SceneObject(1, 2, "square", "blue"),
            SceneObject(3, 3, "triangle", "green"),
        )
    )


def test_objects_are_sorted():
    a = SceneSpec((SceneObject(2, 0, "circle", "red"), SceneObject(0, 1, "square", "blue")))
    b = SceneSpec((SceneObject(0, 1, "square", "blue"), SceneObject(2, 0, "circle", "red")))
    assert a == b
    assert a.digest() == b.digest()


def test_dict_round_trip(scene):
    with_text = SceneSpec(scene.objects, Glyphs("HI", 2, 0))
    assert SceneSpec.from_dict(with_text.to_dict()) == with_text


def test_from_dict_invalid():
    with pytest.raises(DataError):
        SceneSpec.from_dict({"objects": [{"shape": "circle"}]})


@pytest.mark.parametrize(
    "scene",
    [
        SceneSpec((SceneObject(0, 0, "circle", "red"), SceneObject(0, 0, "square", "blue"))),
        SceneSpec((SceneObject(4, 0, "circle", "red"),)),
        SceneSpec((SceneObject(0, 0, "hexagon", "red"),)),
        SceneSpec((SceneObject(0, 0, "circle", "orange"),)),
        SceneSpec(tuple(SceneObject(i // 4, i % 4, "circle", "red") for i in range(7))),
        SceneSpec((), Glyphs("ABCD", 0, 0)),
        SceneSpec((), Glyphs("AB", 0, 3)),
        SceneSpec((SceneObject(0, 1, "circle", "red"),), Glyphs("AB", 0, 0)),
    ],
)
def test_validate_scene_invalid(scene):
    with pytest.raises(DataError):
        validate_scene(scene)


def test_cell_words():
    assert cell_words((0, 2)) == "row one column three"


def test_recolor(scene):
    target = SceneObject(0, 0, "circle", "red")
    edited, instruction = apply_edit(scene, EditOp(EditKind.RECOLOR, target, color="blue"))
    assert instruction == "make the red circle blue"
    assert SceneObject(0, 0, "circle", "blue") in parse(render(edited)).objects


def test_remove_then_add_is_identity(scene):
    target = SceneObject(1, 2, "square", "blue")
    removed, instruction = apply_edit(scene, EditOp(EditKind.REMOVE, target))
    assert instruction == "remove the blue square"
    restored, instruction = apply_edit(removed, EditOp(EditKind.ADD, target))
    assert instruction == "add a blue square at row two column three"
    assert restored == scene


def test_move(scene):
    target = SceneObject(3, 3, "triangle", "green")
    edited, instruction = apply_edit(scene, EditOp(EditKind.MOVE, target, cell=(2, 1)))
    assert instruction == "move the green triangle to row three column two"
    assert edited.object_at((2, 1)) == SceneObject(2, 1, "triangle", "green")
    assert edited.object_at((3, 3)) is None


@pytest.mark.parametrize(
    "op",
    [
        EditOp(EditKind.MOVE, SceneObject(3, 3, "triangle", "green"), cell=(0, 0)),
        EditOp(EditKind.ADD, SceneObject(0, 0, "square", "cyan")),
        EditOp(EditKind.ADD, SceneObject(2, 2, "circle", "red")),
        EditOp(EditKind.REMOVE, SceneObject(2, 2, "circle", "red")),
        EditOp(EditKind.RECOLOR, SceneObject(0, 0, "circle", "red"), color="red"),
        EditOp(EditKind.MOVE, SceneObject(0, 0, "circle", "red"), cell=(4, 0)),
    ],
)
def test_inapplicable_edits(scene, op):
    with pytest.raises(EditConflictError):
        apply_edit(scene, op)


def test_ambiguous_target():
    scene = SceneSpec((SceneObject(0, 0, "circle", "red"), SceneObject(1, 1, "circle", "red")))
    with pytest.raises(EditConflictError):
        apply_edit(scene, EditOp(EditKind.REMOVE, SceneObject(0, 0, "circle", "red")))


def test_touched_cells():
    op = EditOp(EditKind.MOVE, SceneObject(0, 0, "circle", "red"), cell=(1, 1))
    assert op.touched_cells() == {(0, 0), (1, 1)}
    assert EditOp.from_dict(op.to_dict()) == op
