"""Module containing the benchmark harness : composition accuracy per prompt
category, editing instruction-following and consistency, and glyph
rendering. Every suite evaluates a `Generator`, one image per prompt, with
seeds bound to the prompt index.
"""

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Tuple

import numpy as np

from arflow.checkpoint import load_bundle, payload_digest
from arflow.config import CATEGORIES, COMPOSITION_CATEGORIES
from arflow.data import sample_edit_case, sample_scene
from arflow.generator import Generator, PipelineGenerator
from arflow.grammar import RECONSTRUCTION_PROMPT, PromptSpec
from arflow.render import IMAGE_SIZE, cell_slice, parse, render
from arflow.rewards import score_composition, score_glyphs
from arflow.scene import EditKind, EditOp, SceneSpec, apply_edit
from arflow.utils import config_hash, derive_seed, ordered_map, psnr


logger = logging.getLogger(__name__)

EDIT_SUITE_ID = len(CATEGORIES)
GLYPH_CATEGORY = "text"


def _composition_case(generator: Generator, job: Tuple[PromptSpec, int]) -> bool:
    prompt, seed = job
    return score_composition(prompt, generator.generate(prompt.text, seed)) == 1.0


def eval_composition(generator: Generator, n: int, seed: int, threads: int = 1) -> Dict[str, float]:
    """Composition accuracy of each prompt category.

    Each category draws its own pool of prompts, and a prompt counts as a
    success when every one of its constraints holds in the generated image.

    Args:
        generator (Generator): Generator to evaluate.
        n (int): Number of prompts per category.
        seed (int): Seed of the prompts and of the generations.
        threads (int, optional): Number of threads.

    Returns:
        Accuracy of each category, and `overall` (unweighted mean of the
        categories).
    """
    table = {}
    for k, category in enumerate(COMPOSITION_CATEGORIES):
        jobs = []
        for i in range(n):
            _, prompt = sample_scene(derive_seed(seed, k, i), category)
            jobs.append((prompt, derive_seed(seed, k, i, 1)))
        successes = ordered_map(partial(_composition_case, generator), jobs, threads, desc=category)
        table[category] = float(np.mean(successes))
        logger.info(f"category={category} accuracy={table[category]:.4f}")
    table["overall"] = float(np.mean([table[c] for c in COMPOSITION_CATEGORIES]))
    return table


@dataclass
class EditCase:
    """One editing case.

    Args:
        ref (SceneSpec): Scene of the reference image.
        op (Optional[EditOp]): Edit to apply (`None` for the identity).
        instruction (str): Instruction given to the generator.
    """

    ref: SceneSpec
    op: Optional[EditOp]
    instruction: str

    def expected(self, ref_parsed: SceneSpec) -> SceneSpec:
        return ref_parsed if self.op is None else apply_edit(ref_parsed, self.op)[0]

    def edited_mask(self) -> np.ndarray:
        """Pixels outside of the cells touched by the edit."""
        mask = np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        if self.op is not None:
            for cell in self.op.touched_cells():
                mask[cell_slice(cell)] = False
        return mask


def make_edit_cases(n: int, seed: int) -> List[EditCase]:
    """Draw the editing cases of the benchmark."""
    cases = []
    for i in range(n):
        ref, op, _, instruction = sample_edit_case(derive_seed(seed, EDIT_SUITE_ID, i))
        cases.append(EditCase(ref, op, instruction))
    return cases


def identity_cases(n: int, seed: int) -> List[EditCase]:
    """Reconstruction cases : the instruction `Keep the image unchanged.`"""
    cases = []
    for i in range(n):
        category = COMPOSITION_CATEGORIES[i % len(COMPOSITION_CATEGORIES)]
        ref, _ = sample_scene(derive_seed(seed, EDIT_SUITE_ID, i, 1), category)
        cases.append(EditCase(ref, None, RECONSTRUCTION_PROMPT))
    return cases


def _edit_case(generator: Generator, mode: str, job: Tuple[EditCase, int]) -> Tuple[bool, float, int]:
    case, seed = job
    ref_image = render(case.ref)
    output = generator.edit(ref_image, case.instruction, mode, seed)
    correct = parse(output) == case.expected(parse(ref_image))
    mask = case.edited_mask()
    diff = (output.astype(np.float64) - ref_image.astype(np.float64))[mask]
    return correct, float((diff * diff).sum()), int(diff.size)


def eval_editing(
    generator: Generator,
    n: int,
    seed: int,
    mode: str = "both",
    threads: int = 1,
    cases: Optional[List[EditCase]] = None,
) -> Dict:
    """Instruction-following accuracy and consistency of the editing.

    A case is correct when the scene parsed from the output equals the edit
    applied to the scene parsed from the reference. The consistency is the
    PSNR, in dB, of the pixels outside of the edited cells, computed from the
    mean squared error pooled over every case (`inf` if they are untouched).

    Args:
        generator (Generator): Generator to evaluate.
        n (int): Number of cases.
        seed (int): Seed of the cases and of the generations.
        mode (str, optional): Conditioning mode of the diffusion model.
        threads (int, optional): Number of threads.
        cases (Optional[List[EditCase]], optional): Cases to use instead of
            drawing `n` of them.

    Returns:
        The editing table.
    """
    cases = cases if cases is not None else make_edit_cases(n, seed)
    jobs = [(case, derive_seed(seed, EDIT_SUITE_ID, i, 2)) for i, case in enumerate(cases)]
    results = ordered_map(partial(_edit_case, generator, mode), jobs, threads, desc="editing")

    per_kind = {}
    for kind in EditKind:
        outcomes = [ok for (ok, _, _), case in zip(results, cases) if case.op is not None and case.op.kind == kind]
        per_kind[kind.value] = {"accuracy": float(np.mean(outcomes)) if outcomes else None, "n": len(outcomes)}

    sq = sum(r[1] for r in results)
    count = sum(r[2] for r in results)
    consistency = psnr(sq / count) if count else math.inf
    table = {
        "instruction_accuracy": float(np.mean([r[0] for r in results])),
        "unedited_region_psnr_db": consistency,
        "per_edit_kind": per_kind,
    }
    logger.info(f"mode={mode} instruction_accuracy={table['instruction_accuracy']:.4f} psnr={consistency:.3f}")
    return table


def _glyph_case(generator: Generator, job: Tuple[PromptSpec, int]) -> float:
    prompt, seed = job
    return score_glyphs(prompt, generator.generate(prompt.text, seed))


def eval_glyphs(generator: Generator, n: int, seed: int, threads: int = 1) -> Dict[str, float]:
    """Glyph rendering quality on prompts asking for text.

    Args:
        generator (Generator): Generator to evaluate.
        n (int): Number of prompts.
        seed (int): Seed of the prompts and of the generations.
        threads (int, optional): Number of threads.

    Returns:
        `exact_match_rate`, the mean fraction of the letters rendered exactly.
    """
    k = CATEGORIES.index(GLYPH_CATEGORY)
    jobs = []
    for i in range(n):
        _, prompt = sample_scene(derive_seed(seed, k, i), GLYPH_CATEGORY)
        jobs.append((prompt, derive_seed(seed, k, i, 1)))
    scores = ordered_map(partial(_glyph_case, generator), jobs, threads, desc="glyphs")
    table = {"exact_match_rate": float(np.mean(scores))}
    logger.info(f"exact_match_rate={table['exact_match_rate']:.4f}")
    return table


SUITES = ("composition", "editing", "glyphs")


def run_suite(
    generator: Generator,
    suite: str,
    n: int,
    seed: int,
    mode: str = "both",
    threads: int = 1,
    settings: Optional[Dict] = None,
) -> Dict:
    """Run one benchmark suite and wrap its table into a report.

    The report holds the table of the suite (`composition`, `editing` or
    `glyphs`), the number of generated `samples`, and the `config_hash` of the
    run settings. The PSNR of a report is `+inf` when the unedited regions are
    bit-identical, and is written as the string `"inf"` in JSON files.

    Args:
        generator (Generator): Generator to evaluate.
        suite (str): `composition`, `editing` or `glyphs`.
        n (int): Number of prompts per category (or of cases).
        seed (int): Seed.
        mode (str, optional): Conditioning mode (editing suite).
        threads (int, optional): Number of threads.
        settings (Optional[Dict], optional): Extra settings identifying the
            run (checkpoint, sampler), hashed into `config_hash`.

    Returns:
        The report.
    """
    assert suite in SUITES, f"Unknown suite `{suite}`, accepted suites are {SUITES}"
    if suite == "composition":
        report = {"composition": eval_composition(generator, n, seed, threads)}
        report["samples"] = n * len(COMPOSITION_CATEGORIES)
    elif suite == "editing":
        report = {"editing": eval_editing(generator, n, seed, mode, threads), "samples": n}
    else:
        report = {"glyphs": eval_glyphs(generator, n, seed, threads), "samples": n}
    report["config_hash"] = config_hash({"suite": suite, "n": n, "seed": seed, "mode": mode, **(settings or {})})
    return report


def evaluate(
    checkpoint: str,
    suite: str = "composition",
    n: int = 10,
    seed: int = 0,
    mode: str = "both",
    ode_steps: int = 20,
    threads: int = 1,
) -> Dict:
    """Main function of the evaluation : it loads a checkpoint and runs one
    benchmark suite on it, with greedy AR decoding and the flow ODE.

    Args:
        checkpoint (str): Checkpoint folder.
        suite (str, optional): `composition`, `editing` or `glyphs`.
        n (int, optional): Number of prompts per category (or of cases).
        seed (int, optional): Seed of the prompts and of the generations.
        mode (str, optional): Conditioning mode of the editing suite.
        ode_steps (int, optional): Number of Euler steps.
        threads (int, optional): Number of threads.

    Raises:
        CheckpointError: If the checkpoint can't be loaded.

    Returns:
        The report, in a dictionary.
    """
    generator = PipelineGenerator(load_bundle(checkpoint), ode_steps=ode_steps, greedy=True)
    settings = {"checkpoint": payload_digest(checkpoint), "ode_steps": ode_steps}
    return run_suite(generator, suite, n, seed, mode, threads, settings)
