"""Module containing the verifiable rewards : exact checks of the constraints of
a prompt against the scene parsed from an image.
"""

from typing import Optional

import numpy as np

from arflow.grammar import Constraint, ConstraintKind, PromptSpec
from arflow.render import classify_cells, parse
from arflow.scene import GRID, SceneObject, SceneSpec


def _relation_holds(a: SceneObject, relation: str, b: SceneObject) -> bool:
    if relation == "left of":
        return a.col < b.col
    elif relation == "right of":
        return a.col > b.col
    elif relation == "above":
        return a.row < b.row
    else:
        return a.row > b.row


def satisfies(scene: SceneSpec, c: Constraint) -> bool:
    """Check one constraint against a scene.

    Args:
        scene (SceneSpec): Scene (usually parsed from an image).
        c (Constraint): Constraint to check.

    Returns:
        `True` if the constraint holds.
    """
    if c.kind == ConstraintKind.ATTRIBUTE:
        return len(scene.find(c.shape, c.color)) > 0
    elif c.kind == ConstraintKind.COUNT:
        # Exact count, not "at least"
        return len(scene.find(c.shape, c.color)) == c.count
    elif c.kind == ConstraintKind.COLOR:
        same_shape = scene.find(c.shape)
        return len(same_shape) > 0 and all(o.color == c.color for o in same_shape)
    elif c.kind == ConstraintKind.POSITION:
        return any(
            _relation_holds(a, c.relation, b)
            for a in scene.find(c.shape, c.color)
            for b in scene.find(c.other_shape, c.other_color)
            if a is not b
        )
    else:
        return scene.glyphs is not None and scene.glyphs.text == c.text


def score_composition(prompt: PromptSpec, image: np.ndarray, binary: bool = False) -> float:
    """Fraction of the constraints of the prompt satisfied by the image.

    Args:
        prompt (PromptSpec): Prompt, with at least one constraint.
        image (np.ndarray): Image of shape (32, 32, 3).
        binary (bool, optional): If `True`, return 1.0 when every constraint
            holds and 0.0 otherwise.

    Returns:
        Reward in [0, 1].
    """
    assert len(prompt.constraints) > 0, "The prompt should have at least one constraint"
    scene = parse(image)
    score = sum(satisfies(scene, c) for c in prompt.constraints) / len(prompt.constraints)
    if binary:
        return float(score == 1.0)
    return float(score)


def prompt_text(prompt: PromptSpec) -> Optional[str]:
    """Letters requested by the text constraint of a prompt (if any)."""
    for c in prompt.constraints:
        if c.kind == ConstraintKind.TEXT:
            return c.text
    return None


def score_glyphs(prompt: PromptSpec, image: np.ndarray, binary: bool = False) -> float:
    """Fraction of the requested letters drawn correctly.

    Letters are read from the anchor of the parsed glyph text (the first
    letter cell of the image) : the i-th requested letter has to be drawn
    i cells to the right of the anchor.

    Args:
        prompt (PromptSpec): Prompt containing a text constraint.
        image (np.ndarray): Image of shape (32, 32, 3).
        binary (bool, optional): If `True`, return 1.0 when every letter is
            correct and 0.0 otherwise.

    Returns:
        Reward in [0, 1].
    """
    text = prompt_text(prompt)
    assert text, "The prompt should contain a text constraint"

    grid = classify_cells(image)
    anchor = next(((r, c) for r in range(GRID) for c in range(GRID) if grid[r][c][0] == "letter"), None)
    if anchor is None:
        return 0.0

    r, c = anchor
    correct = sum(c + i < GRID and grid[r][c + i] == ("letter", letter) for i, letter in enumerate(text))
    score = correct / len(text)
    if binary:
        return float(score == 1.0)
    return float(score)


def combined_reward(prompt: PromptSpec, image: np.ndarray, glyph_weight: float = 0.5, binary: bool = False) -> float:
    """Weighted mix of the composition and glyph rewards. Prompts without
    text are scored with the composition reward only.

    Args:
        prompt (PromptSpec): Prompt.
        image (np.ndarray): Image of shape (32, 32, 3).
        glyph_weight (float, optional): Weight of the glyph reward.
        binary (bool, optional): Use binary rewards.

    Returns:
        Reward in [0, 1].
    """
    composition = score_composition(prompt, image, binary=binary)
    if prompt_text(prompt) is None:
        return composition
    return (1 - glyph_weight) * composition + glyph_weight * score_glyphs(prompt, image, binary=binary)


REWARDS = {
    "composition": score_composition,
    "glyph": score_glyphs,
    "combined": combined_reward,
}
