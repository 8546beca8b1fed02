import json
import math

import numpy as np
import pytest

from arflow.checkpoint import save_bundle
from arflow.config import CATEGORIES, COMPOSITION_CATEGORIES
from arflow.data import sample_scene
from arflow.evaluation import (
    GLYPH_CATEGORY,
    eval_composition,
    eval_editing,
    eval_glyphs,
    evaluate,
    identity_cases,
    make_edit_cases,
    run_suite,
)
from arflow.generator import Generator
from arflow.render import parse, render
from arflow.scene import EditKind
from arflow.utils import derive_seed, write_json


N = 3
SEED = 7


class Oracle(Generator):
    """Generator that knows the answer of every case of the benchmark."""

    def __init__(self, n, seed):
        self.scenes = {}
        for k, category in enumerate(CATEGORIES):
            for i in range(n):
                scene, prompt = sample_scene(derive_seed(seed, k, i), category)
                self.scenes[prompt.text] = scene

        self.edits = {}
        for case in make_edit_cases(n, seed):
            ref_image = render(case.ref)
            self.edits[(case.instruction, ref_image.tobytes())] = render(case.expected(parse(ref_image)))

    def generate(self, prompt, seed):
        return render(self.scenes[prompt])

    def edit(self, image, instruction, mode, seed):
        return self.edits[(instruction, image.tobytes())]


class EveryOther(Generator):
    """Generator that succeeds only for even seeds."""

    def __init__(self, oracle):
        self.oracle = oracle

    def generate(self, prompt, seed):
        return self.oracle.generate(prompt, seed) if seed % 2 == 0 else super().generate(prompt, seed)


@pytest.fixture(scope="module")
def oracle():
    return Oracle(N, SEED)


def test_perfect_composition(oracle):
    table = eval_composition(oracle, N, SEED)
    assert set(table) == set(COMPOSITION_CATEGORIES) | {"overall"}
    assert all(v == 1.0 for v in table.values())


def test_black_images_fail_the_composition():
    table = eval_composition(Generator(), N, SEED)
    assert table["overall"] == 0.0


def test_composition_does_not_depend_on_threads(oracle):
    generator = EveryOther(oracle)
    assert eval_composition(generator, N, SEED, threads=1) == eval_composition(generator, N, SEED, threads=3)


def test_perfect_editing(oracle):
    table = eval_editing(oracle, N, SEED)
    assert set(table) == {"instruction_accuracy", "unedited_region_psnr_db", "per_edit_kind"}
    assert table["instruction_accuracy"] == 1.0
    assert math.isinf(table["unedited_region_psnr_db"])

    per_kind = table["per_edit_kind"]
    assert set(per_kind) == {k.value for k in EditKind}
    assert sum(v["n"] for v in per_kind.values()) == N
    for v in per_kind.values():
        assert v["accuracy"] == (1.0 if v["n"] else None)


def test_unchanged_images_fail_the_editing():
    # The default generator returns the reference : nothing is edited, but nothing else changes
    table = eval_editing(Generator(), N, SEED, mode="none")
    assert table["instruction_accuracy"] == 0.0
    assert math.isinf(table["unedited_region_psnr_db"])


def test_identity_cases():
    cases = identity_cases(4, SEED)
    assert all(c.op is None and c.instruction == "Keep the image unchanged." for c in cases)
    table = eval_editing(Generator(), 4, SEED, cases=cases)
    assert table["instruction_accuracy"] == 1.0
    assert math.isinf(table["unedited_region_psnr_db"])
    assert all(v["n"] == 0 for v in table["per_edit_kind"].values())


class Brighter(Generator):
    def edit(self, image, instruction, mode, seed):
        return np.clip(image + 0.1, 0, 1)


def test_consistency_of_a_changed_background():
    table = eval_editing(Brighter(), 2, SEED, cases=identity_cases(2, SEED))
    # Every channel moves by 0.1 except the saturated ones
    assert 20.0 - 1e-4 < table["unedited_region_psnr_db"] < 30.0


def test_perfect_glyphs(oracle):
    table = eval_glyphs(oracle, N, SEED)
    assert table == {"exact_match_rate": 1.0}


def test_black_glyphs():
    assert eval_glyphs(Generator(), N, SEED) == {"exact_match_rate": 0.0}


def test_glyph_category_exists():
    assert GLYPH_CATEGORY in CATEGORIES


@pytest.mark.parametrize(
    "suite, samples", [("composition", N * len(COMPOSITION_CATEGORIES)), ("editing", N), ("glyphs", N)]
)
def test_run_suite(oracle, suite, samples):
    report = run_suite(oracle, suite, N, SEED)
    assert set(report) == {suite, "samples", "config_hash"}
    assert report["samples"] == samples


def test_run_unknown_suite(oracle):
    with pytest.raises(AssertionError):
        run_suite(oracle, "speed", N, SEED)


def test_evaluate_checkpoint(bundle, tmp_path):
    path = save_bundle(bundle, tmp_path / "ckpt")
    report = evaluate(str(path), "glyphs", n=2, seed=1, ode_steps=2)
    assert set(report) == {"glyphs", "samples", "config_hash"}
    assert 0.0 <= report["glyphs"]["exact_match_rate"] <= 1.0

    again = evaluate(str(path), "glyphs", n=2, seed=1, ode_steps=2)
    assert again == report
    other = evaluate(str(path), "glyphs", n=2, seed=2, ode_steps=2)
    assert other["config_hash"] != report["config_hash"]


def test_identity_report_is_strict_json(tmp_path):
    report = run_suite(Generator(), "editing", 2, SEED)
    assert math.isinf(report["editing"]["unedited_region_psnr_db"])

    write_json(report, tmp_path / "report.json")

    def reject(token):
        raise ValueError(f"Non-standard JSON token {token}")

    loaded = json.loads((tmp_path / "report.json").read_text(), parse_constant=reject)
    assert loaded["editing"]["unedited_region_psnr_db"] == "inf"
    assert float(loaded["editing"]["unedited_region_psnr_db"]) == math.inf
