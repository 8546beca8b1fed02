"""Module containing the canonical prompt grammar : the constraints a prompt
expresses, how they are written as text, and how text is parsed back into
constraints.

A prompt is a list of clauses joined by ` and `. Each clause is one
constraint :

* `a red circle` / `a circle` : at least one such object
* `two red circles` / `one square` : exact count
* `the square is blue` : every square is blue (and there is at least one)
* `a green triangle left of a red square` : relative position
* `the text 'HI'` : glyph text
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import regex as re

from arflow.errors import GrammarError
from arflow.scene import COLORS, NUMBERS, SHAPES, EditKind


RECONSTRUCTION_PROMPT = "Keep the image unchanged."
RELATIONS = ("left of", "right of", "above", "below")

_COLOR = "|".join(COLORS)
_SHAPE = "|".join(SHAPES)
_NUMBER = "|".join(NUMBERS)
_RELATION = "|".join(RELATIONS)
_OBJECT = rf"(?:({_COLOR}) )?({_SHAPE})"
_CELL = rf"row ({_NUMBER}) column ({_NUMBER})"

CLAUSE_PATTERNS = {
    "attribute": re.compile(rf"a {_OBJECT}"),
    "count": re.compile(rf"({_NUMBER}) (?:({_COLOR}) )?({_SHAPE})(s?)"),
    "color": re.compile(rf"the ({_SHAPE}) is ({_COLOR})"),
    "position": re.compile(rf"a {_OBJECT} ({_RELATION}) a {_OBJECT}"),
    "text": re.compile(r"the text '([A-Z]{1,3})'"),
}
INSTRUCTION_PATTERNS = {
    EditKind.ADD: re.compile(rf"add a ({_COLOR}) ({_SHAPE}) at {_CELL}"),
    EditKind.REMOVE: re.compile(rf"remove the ({_COLOR}) ({_SHAPE})"),
    EditKind.RECOLOR: re.compile(rf"make the ({_COLOR}) ({_SHAPE}) ({_COLOR})"),
    EditKind.MOVE: re.compile(rf"move the ({_COLOR}) ({_SHAPE}) to {_CELL}"),
}
PRODUCTIONS = [
    "a <color> <shape>",
    "a <shape>",
    "<number> [<color>] <shape>[s]",
    "the <shape> is <color>",
    "a [<color>] <shape> <left of|right of|above|below> a [<color>] <shape>",
    "the text '<1 to 3 uppercase letters>'",
    "<clause> and <clause> ...",
]
INSTRUCTION_PRODUCTIONS = [
    RECONSTRUCTION_PROMPT,
    "add a <color> <shape> at row <number> column <number>",
    "remove the <color> <shape>",
    "make the <color> <shape> <color>",
    "move the <color> <shape> to row <number> column <number>",
]


class ConstraintKind(Enum):
    ATTRIBUTE = "attribute"
    COUNT = "count"
    COLOR = "color"
    POSITION = "position"
    TEXT = "text"


@dataclass(frozen=True)
class Constraint:
    """One verifiable constraint of a prompt.

    Args:
        kind (ConstraintKind): Type of constraint.
        shape (Optional[str], optional): Shape of the (subject) object.
        color (Optional[str], optional): Color of the (subject) object.
        count (Optional[int], optional): Exact number of objects, for `COUNT`.
        relation (Optional[str], optional): Relation, for `POSITION`.
        other_shape (Optional[str], optional): Shape of the reference object,
            for `POSITION`.
        other_color (Optional[str], optional): Color of the reference object,
            for `POSITION`.
        text (Optional[str], optional): Letters, for `TEXT`.
    """

    kind: ConstraintKind
    shape: Optional[str] = None
    color: Optional[str] = None
    count: Optional[int] = None
    relation: Optional[str] = None
    other_shape: Optional[str] = None
    other_color: Optional[str] = None
    text: Optional[str] = None


@dataclass(frozen=True)
class PromptSpec:
    """A prompt of the canonical grammar.

    Args:
        text (str): Canonical text.
        constraints (Tuple[Constraint, ...]): Constraints expressed by the text.
        category (Optional[str], optional): Category the prompt was sampled
            from, if known.
    """

    text: str
    constraints: Tuple[Constraint, ...]
    category: Optional[str] = None


def _object_words(shape: str, color: Optional[str]) -> str:
    return shape if color is None else f"{color} {shape}"


def render_clause(c: Constraint) -> str:
    """Write one constraint as canonical text."""
    if c.kind == ConstraintKind.ATTRIBUTE:
        return f"a {_object_words(c.shape, c.color)}"
    elif c.kind == ConstraintKind.COUNT:
        plural = "s" if c.count > 1 else ""
        return f"{NUMBERS[c.count - 1]} {_object_words(c.shape, c.color)}{plural}"
    elif c.kind == ConstraintKind.COLOR:
        return f"the {c.shape} is {c.color}"
    elif c.kind == ConstraintKind.POSITION:
        return (
            f"a {_object_words(c.shape, c.color)} {c.relation} a {_object_words(c.other_shape, c.other_color)}"
        )
    else:
        return f"the text '{c.text}'"


def make_prompt(constraints: List[Constraint], category: Optional[str] = None) -> PromptSpec:
    """Build the canonical prompt expressing the given constraints.

    Args:
        constraints (List[Constraint]): Constraints, in order.
        category (Optional[str], optional): Category of the prompt.

    Returns:
        The prompt.
    """
    return PromptSpec(" and ".join(render_clause(c) for c in constraints), tuple(constraints), category)


def _parse_clause(clause: str) -> Constraint:
    m = CLAUSE_PATTERNS["position"].fullmatch(clause)
    if m:
        return Constraint(
            ConstraintKind.POSITION,
            shape=m[2],
            color=m[1],
            relation=m[3],
            other_shape=m[5],
            other_color=m[4],
        )
    m = CLAUSE_PATTERNS["attribute"].fullmatch(clause)
    if m:
        return Constraint(ConstraintKind.ATTRIBUTE, shape=m[2], color=m[1])
    m = CLAUSE_PATTERNS["count"].fullmatch(clause)
    if m:
        count = NUMBERS.index(m[1]) + 1
        # Plural agreement is part of the canonical form
        if (count > 1) != bool(m[4]):
            raise GrammarError(f"Wrong plural agreement in `{clause}`")
        return Constraint(ConstraintKind.COUNT, shape=m[3], color=m[2], count=count)
    m = CLAUSE_PATTERNS["color"].fullmatch(clause)
    if m:
        return Constraint(ConstraintKind.COLOR, shape=m[1], color=m[2])
    m = CLAUSE_PATTERNS["text"].fullmatch(clause)
    if m:
        return Constraint(ConstraintKind.TEXT, text=m[1])
    raise GrammarError(
        f"`{clause}` is not a valid clause. Accepted productions : " + " | ".join(f'"{p}"' for p in PRODUCTIONS)
    )


def parse_prompt(text: str, category: Optional[str] = None) -> PromptSpec:
    """Parse a canonical prompt into its constraints.

    Args:
        text (str): Prompt text.
        category (Optional[str], optional): Category to attach to the prompt.

    Raises:
        GrammarError: If the text is not part of the grammar. The message
            lists the accepted productions.

    Returns:
        The prompt.
    """
    if not text.strip():
        raise GrammarError("The prompt is empty")
    constraints = tuple(_parse_clause(clause) for clause in text.strip().split(" and "))
    return PromptSpec(text.strip(), constraints, category)


def parse_instruction(text: str) -> Optional[Tuple[EditKind, Tuple[str, ...]]]:
    """Check that an editing instruction is part of the grammar.

    Args:
        text (str): Instruction.

    Raises:
        GrammarError: If the instruction is not part of the grammar. The
            message lists the accepted productions.

    Returns:
        `None` for the reconstruction prompt, otherwise the kind of edit and
        the words captured by the instruction pattern.
    """
    text = text.strip()
    if text == RECONSTRUCTION_PROMPT:
        return None
    for kind, pattern in INSTRUCTION_PATTERNS.items():
        m = pattern.fullmatch(text)
        if m:
            return kind, m.groups()
    raise GrammarError(
        f"`{text}` is not a valid instruction. Accepted productions : "
        + " | ".join(f'"{p}"' for p in INSTRUCTION_PRODUCTIONS)
    )
