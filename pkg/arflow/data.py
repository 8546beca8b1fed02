"""Module containing the synthetic data engine : sampling of scenes with their
prompts for every category, sampling of edits, and writing / reading of the
JSONL datasets used for training.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from arflow.config import CATEGORIES, GenDataConfig
from arflow.errors import DataError, EditConflictError
from arflow.grammar import RECONSTRUCTION_PROMPT, Constraint, ConstraintKind, PromptSpec, make_prompt
from arflow.render import render
from arflow.scene import (
    COLORS,
    GRID,
    LETTERS,
    MAX_OBJECTS,
    MAX_TEXT,
    SHAPES,
    EditKind,
    EditOp,
    Glyphs,
    SceneObject,
    SceneSpec,
    apply_edit,
    validate_scene,
)
from arflow.utils import PathLike, derive_seed, load_ppm, rng_from, save_ppm


logger = logging.getLogger(__name__)

INDEX_FILE = "index.jsonl"
IMAGE_DIR = "images"
MAX_DEDUP_ATTEMPTS = 100
TASK_IDS = {"t2i": 0, "recon": 1, "edit": 2}
RELATION_TESTS = {
    "left of": lambda a, b: a[1] < b[1],
    "right of": lambda a, b: a[1] > b[1],
    "above": lambda a, b: a[0] < b[0],
    "below": lambda a, b: a[0] > b[0],
}


def _cells(rng: np.random.Generator, n: int, exclude=()) -> List[Tuple[int, int]]:
    free = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in exclude]
    idx = rng.choice(len(free), size=n, replace=False)
    return [free[i] for i in idx]


def _pick(rng: np.random.Generator, values, n: int = 1) -> List:
    return [values[i] for i in rng.choice(len(values), size=n, replace=False)]


def sample_scene(seed: int, category: str) -> Tuple[SceneSpec, PromptSpec]:
    """Sample a scene and a prompt of the given category, such that the scene
    satisfies every constraint of the prompt.

    Args:
        seed (int): Seed of the draw.
        category (str): One of `CATEGORIES`.

    Raises:
        ValueError: If the category is unknown.

    Returns:
        The scene.
        The prompt.
    """
    rng = np.random.default_rng(seed)

    if category == "single":
        (shape,), (color,) = _pick(rng, SHAPES), _pick(rng, COLORS)
        (cell,) = _cells(rng, 1)
        objects = [SceneObject(*cell, shape, color)]
        constraints = [Constraint(ConstraintKind.ATTRIBUTE, shape=shape, color=color)]
    elif category == "two-object":
        shapes, colors = _pick(rng, SHAPES, 2), [_pick(rng, COLORS)[0] for _ in range(2)]
        cells = _cells(rng, 2)
        objects = [SceneObject(*cell, s, c) for cell, s, c in zip(cells, shapes, colors)]
        constraints = [Constraint(ConstraintKind.ATTRIBUTE, shape=s) for s in shapes]
    elif category == "counting":
        n_clauses = 1 + int(rng.integers(2))
        shapes, colors = _pick(rng, SHAPES, n_clauses), _pick(rng, COLORS, n_clauses)
        counts = [int(rng.integers(1, 5))]
        if n_clauses == 2:
            counts.append(int(rng.integers(1, min(4, MAX_OBJECTS - counts[0]) + 1)))
        cells = _cells(rng, sum(counts))
        objects = []
        for s, c, n in zip(shapes, colors, counts):
            objects.extend(SceneObject(*cells.pop(), s, c) for _ in range(n))
        constraints = [
            Constraint(ConstraintKind.COUNT, shape=s, color=c, count=n) for s, c, n in zip(shapes, colors, counts)
        ]
    elif category == "colors":
        shape, other_shape = _pick(rng, SHAPES, 2)
        color, other_color = _pick(rng, COLORS, 2)
        n, n_other = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        cells = _cells(rng, n + n_other)
        objects = [SceneObject(*cells.pop(), shape, color) for _ in range(n)]
        objects += [SceneObject(*cells.pop(), other_shape, other_color) for _ in range(n_other)]
        constraints = [Constraint(ConstraintKind.COLOR, shape=shape, color=color)]
    elif category == "position":
        (relation,) = _pick(rng, list(RELATION_TESTS))
        pairs = [
            (a, b)
            for a in [(r, c) for r in range(GRID) for c in range(GRID)]
            for b in [(r, c) for r in range(GRID) for c in range(GRID)]
            if RELATION_TESTS[relation](a, b)
        ]
        a, b = pairs[int(rng.integers(len(pairs)))]
        shapes, colors = _pick(rng, SHAPES, 2), _pick(rng, COLORS, 2)
        objects = [SceneObject(*a, shapes[0], colors[0]), SceneObject(*b, shapes[1], colors[1])]
        constraints = [
            Constraint(
                ConstraintKind.POSITION,
                shape=shapes[0],
                color=colors[0],
                relation=relation,
                other_shape=shapes[1],
                other_color=colors[1],
            )
        ]
    elif category == "color-attribution":
        shapes, colors = _pick(rng, SHAPES, 2), _pick(rng, COLORS, 2)
        cells = _cells(rng, 2)
        objects = [SceneObject(*cell, s, c) for cell, s, c in zip(cells, shapes, colors)]
        constraints = [Constraint(ConstraintKind.ATTRIBUTE, shape=s, color=c) for s, c in zip(shapes, colors)]
    elif category == "text":
        length = int(rng.integers(1, MAX_TEXT + 1))
        text = "".join(LETTERS[i] for i in rng.integers(len(LETTERS), size=length))
        row, col = int(rng.integers(GRID)), int(rng.integers(GRID - length + 1))
        scene = SceneSpec((), Glyphs(text, row, col))
        validate_scene(scene)
        return scene, make_prompt([Constraint(ConstraintKind.TEXT, text=text)], category)
    else:
        raise ValueError(f"Unknown category `{category}`, expected one of {CATEGORIES}")

    scene = SceneSpec(tuple(objects))
    validate_scene(scene)
    return scene, make_prompt(constraints, category)


def sample_edit(seed: int, scene: SceneSpec) -> EditOp:
    """Sample an edit applicable to the given scene.

    Args:
        seed (int): Seed of the draw.
        scene (SceneSpec): Scene to edit (with at least one object).

    Raises:
        EditConflictError: If no edit applies to the scene.

    Returns:
        The edit.
    """
    rng = np.random.default_rng(seed)
    free = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in scene.occupied()]
    unique = [o for o in scene.objects if len(scene.find(o.shape, o.color)) == 1]

    candidates = []
    if unique:
        candidates += [EditKind.REMOVE, EditKind.RECOLOR]
        if free:
            candidates.append(EditKind.MOVE)
    if free and len(scene.objects) < MAX_OBJECTS:
        candidates.append(EditKind.ADD)

    for kind in _pick(rng, candidates, len(candidates)) if candidates else []:
        if kind == EditKind.ADD:
            options = [(s, c) for s in SHAPES for c in COLORS if not scene.find(s, c)]
            s, c = options[int(rng.integers(len(options)))]
            cell = free[int(rng.integers(len(free)))]
            return EditOp(kind, SceneObject(*cell, s, c))

        target = unique[int(rng.integers(len(unique)))]
        if kind == EditKind.REMOVE:
            return EditOp(kind, target)
        elif kind == EditKind.RECOLOR:
            options = [c for c in COLORS if not scene.find(target.shape, c)]
            if options:
                return EditOp(kind, target, color=options[int(rng.integers(len(options)))])
        else:
            return EditOp(kind, target, cell=free[int(rng.integers(len(free)))])
    raise EditConflictError("No edit applies to this scene")


def sample_edit_case(seed: int) -> Tuple[SceneSpec, EditOp, SceneSpec, str]:
    """Sample a reference scene, an edit, and the edited scene.

    Args:
        seed (int): Seed of the draw.

    Returns:
        The reference scene.
        The edit.
        The edited scene.
        The instruction describing the edit.
    """
    rng = np.random.default_rng(seed)
    category = ("single", "two-object", "counting", "colors", "position", "color-attribution")[int(rng.integers(6))]
    ref, _ = sample_scene(derive_seed(seed, 1), category)
    op = sample_edit(derive_seed(seed, 2), ref)
    edited, instruction = apply_edit(ref, op)
    return ref, op, edited, instruction


@dataclass
class Record:
    """One example of a dataset.

    Args:
        task (str): `t2i`, `recon` or `edit`.
        prompt (str): Prompt or instruction.
        scene (SceneSpec): Scene of the target image.
        image (str): Path of the target image, relative to the dataset folder.
        ref_image (Optional[str], optional): Path of the reference image.
        category (Optional[str], optional): Prompt category (`t2i` only).
        ref_scene (Optional[SceneSpec], optional): Scene of the reference image.
        edit (Optional[EditOp], optional): Edit applied (`edit` only).
    """

    task: str
    prompt: str
    scene: SceneSpec
    image: str
    ref_image: Optional[str] = None
    category: Optional[str] = None
    ref_scene: Optional[SceneSpec] = None
    edit: Optional[EditOp] = None

    def to_dict(self) -> Dict:
        d = {"task": self.task, "prompt": self.prompt, "scene": self.scene.to_dict(), "image": self.image}
        if self.ref_image is not None:
            d["ref_image"] = self.ref_image
        if self.category is not None:
            d["category"] = self.category
        if self.ref_scene is not None:
            d["ref_scene"] = self.ref_scene.to_dict()
        if self.edit is not None:
            d["edit"] = self.edit.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "Record":
        try:
            return cls(
                task=d["task"],
                prompt=d["prompt"],
                scene=SceneSpec.from_dict(d["scene"]),
                image=d["image"],
                ref_image=d.get("ref_image"),
                category=d.get("category"),
                ref_scene=None if d.get("ref_scene") is None else SceneSpec.from_dict(d["ref_scene"]),
                edit=None if d.get("edit") is None else EditOp.from_dict(d["edit"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Invalid dataset record : {d!r}") from e


def _t2i_record(seed: int, index: int, mix: Dict[str, float], seen: set, dedup: bool) -> Tuple[Record, np.ndarray]:
    names, probs = list(mix), np.array(list(mix.values()))
    for attempt in range(MAX_DEDUP_ATTEMPTS):
        rng = rng_from(seed, TASK_IDS["t2i"], index, attempt)
        category = names[int(rng.choice(len(names), p=probs / probs.sum()))]
        scene, prompt = sample_scene(derive_seed(seed, TASK_IDS["t2i"], index, attempt, 1), category)
        if not dedup or scene.digest() not in seen:
            break
    seen.add(scene.digest())
    return Record("t2i", prompt.text, scene, f"{IMAGE_DIR}/t2i_{index:06d}.ppm", category=category), render(scene)


def make_dataset(config: GenDataConfig, out_dir: Optional[PathLike] = None) -> Path:
    """Generate a dataset : a JSONL index and the PPM images it references.

    Text-to-image records spread over the prompt categories following
    `config.mix`. Reconstruction records use the prompt
    `Keep the image unchanged.` with identical reference and target images.
    Editing records pair a reference image, an instruction and the edited
    target. Scenes are deduplicated within each task. Every draw is bound to
    the seed and the index of the record, so the output is deterministic.

    Args:
        config (GenDataConfig): Configuration.
        out_dir (Optional[PathLike], optional): Dataset folder (defaults to
            `config.out_dir`).

    Raises:
        DataError: If the folder is not writable.

    Returns:
        Path of the JSONL index.
    """
    out = Path(out_dir or config.out_dir)
    try:
        (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Can't write the dataset in {out} : {e}") from e

    records = []
    seen = set()
    for i in tqdm(range(config.t2i), desc="t2i", disable=config.t2i == 0):
        record, img = _t2i_record(config.seed, i, config.mix, seen, config.dedup)
        save_ppm(img, out / record.image)
        records.append(record)

    seen = set()
    for i in tqdm(range(config.recon), desc="recon", disable=config.recon == 0):
        for attempt in range(MAX_DEDUP_ATTEMPTS):
            category = CATEGORIES[int(rng_from(config.seed, TASK_IDS["recon"], i, attempt).integers(len(CATEGORIES)))]
            scene, _ = sample_scene(derive_seed(config.seed, TASK_IDS["recon"], i, attempt, 1), category)
            if not config.dedup or scene.digest() not in seen:
                break
        seen.add(scene.digest())
        image = f"{IMAGE_DIR}/recon_{i:06d}.ppm"
        save_ppm(render(scene), out / image)
        records.append(Record("recon", RECONSTRUCTION_PROMPT, scene, image, ref_image=image, ref_scene=scene))

    seen = set()
    for i in tqdm(range(config.edit), desc="edit", disable=config.edit == 0):
        for attempt in range(MAX_DEDUP_ATTEMPTS):
            ref, op, edited, instruction = sample_edit_case(derive_seed(config.seed, TASK_IDS["edit"], i, attempt))
            key = (ref.digest(), instruction)
            if not config.dedup or key not in seen:
                break
        seen.add(key)
        image, ref_image = f"{IMAGE_DIR}/edit_{i:06d}.ppm", f"{IMAGE_DIR}/edit_{i:06d}_ref.ppm"
        save_ppm(render(ref), out / ref_image)
        save_ppm(render(edited), out / image)
        records.append(Record("edit", instruction, edited, image, ref_image=ref_image, ref_scene=ref, edit=op))

    index = out / INDEX_FILE
    with open(index, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")
    logger.info(f"dataset={out} t2i={config.t2i} recon={config.recon} edit={config.edit}")
    return index


def load_dataset(data_dir: PathLike) -> List[Record]:
    """Read the records of a dataset.

    Args:
        data_dir (PathLike): Dataset folder.

    Raises:
        DataError: If the index is missing or invalid.

    Returns:
        The records, in file order.
    """
    index = Path(data_dir) / INDEX_FILE
    if not index.exists():
        raise DataError(f"No dataset index at {index}")
    with open(index, "r") as f:
        try:
            return [Record.from_dict(json.loads(line)) for line in f if line.strip()]
        except json.JSONDecodeError as e:
            raise DataError(f"Invalid dataset index {index} : {e}") from e


def load_images(data_dir: PathLike, record: Record) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Load the target (and reference) images of a record."""
    target = load_ppm(Path(data_dir) / record.image)
    ref = None if record.ref_image is None else load_ppm(Path(data_dir) / record.ref_image)
    return target, ref


def curate_dataset(records: List[Record], size: int, seed: int) -> List[Record]:
    """Select a small, high-quality subset of a dataset for fine-tuning : no
    duplicated (prompt, scene) pair, and tasks / categories balanced by
    round-robin over the groups.

    Args:
        records (List[Record]): Records to select from.
        size (int): Maximum number of records to keep.
        seed (int): Seed of the shuffling inside each group.

    Returns:
        The selected records.
    """
    rng = np.random.default_rng(seed)
    groups: Dict[str, List[Record]] = {}
    seen = set()
    for r in records:
        key = (r.prompt, r.scene.digest())
        if key in seen:
            continue
        seen.add(key)
        groups.setdefault(f"{r.task}/{r.category}", []).append(r)

    queues = []
    for name in sorted(groups):
        group = groups[name]
        queues.append([group[i] for i in rng.permutation(len(group))])

    selected = []
    while len(selected) < size and any(queues):
        for q in queues:
            if q and len(selected) < size:
                selected.append(q.pop(0))
    return selected
