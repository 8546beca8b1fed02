import json
import sys

import numpy as np
import pytest

from arflow.checkpoint import save_bundle
from arflow.cmd import cli, format_error, main
from arflow.config import RESOLVED_CONFIG
from arflow.data import INDEX_FILE
from arflow.errors import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_USAGE, UsageError
from arflow.pipeline import REPORT_FILE
from arflow.render import render
from arflow.scene import SceneObject, SceneSpec
from arflow.utils import load_ppm, save_ppm


@pytest.fixture
def ckpt(bundle, tmp_path):
    return str(save_bundle(bundle, tmp_path / "ckpt"))


@pytest.fixture
def ref_image(tmp_path):
    path = tmp_path / "ref.ppm"
    save_ppm(render(SceneSpec((SceneObject(1, 2, "circle", "red"),))), path)
    return str(path)


def error_line(capsys):
    return capsys.readouterr().err.strip()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["deploy"],
        ["sample", "--prompt", "a circle", "--out", "x.ppm"],
        ["gen-data", "--t2i", "many"],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert error_line(capsys).startswith(f"error code={EXIT_USAGE} type=UsageError")


def test_sample_invalid_prompt(tmp_path, capsys):
    out = tmp_path / "out.ppm"
    # The prompt is checked before the checkpoint is loaded
    code = main(["sample", "--ckpt", str(tmp_path / "missing"), "--prompt", "a purple circle", "--out", str(out)])
    assert code == EXIT_USAGE
    assert "type=GrammarError" in error_line(capsys)
    assert not out.exists()


def test_edit_invalid_instruction(ref_image, tmp_path, capsys):
    out = tmp_path / "out.ppm"
    # The instruction is checked before the checkpoint is loaded
    argv = ["edit", "--ckpt", str(tmp_path / "missing"), "--image", ref_image, "--instruction", "shake the red circle"]
    assert main(argv + ["--out", str(out)]) == EXIT_USAGE
    assert "type=GrammarError" in error_line(capsys)
    assert not out.exists()


def test_sample_missing_checkpoint(tmp_path, capsys):
    code = main(["sample", "--ckpt", str(tmp_path / "missing"), "--prompt", "a circle", "--out", str(tmp_path / "o")])
    assert code == EXIT_CHECKPOINT
    assert "type=CorruptManifestError" in error_line(capsys)


def test_sample(ckpt, tmp_path):
    out = tmp_path / "out.ppm"
    argv = ["sample", "--ckpt", ckpt, "--prompt", "a red circle", "--out", str(out), "--ode_steps", "2"]
    assert main(argv) == EXIT_OK
    first = load_ppm(out)
    assert main(argv) == EXIT_OK
    np.testing.assert_array_equal(load_ppm(out), first)


def test_edit_without_image(ckpt, tmp_path, capsys):
    out = tmp_path / "out.ppm"
    assert main(["edit", "--ckpt", ckpt, "--instruction", "remove the circle", "--out", str(out)]) == EXIT_USAGE
    assert "--image" in error_line(capsys)
    assert not out.exists()


def test_edit_missing_image(ckpt, tmp_path):
    argv = ["edit", "--ckpt", ckpt, "--image", str(tmp_path / "nope.ppm"), "--instruction", "remove the circle"]
    assert main(argv + ["--out", str(tmp_path / "o.ppm")]) == EXIT_USAGE


def test_edit(ckpt, ref_image, tmp_path):
    out = tmp_path / "edited.ppm"
    argv = ["edit", "--ckpt", ckpt, "--image", ref_image, "--instruction", "remove the red circle"]
    assert main(argv + ["--mode", "cross_attn", "--out", str(out), "--ode_steps", "2"]) == EXIT_OK
    assert load_ppm(out).shape == (32, 32, 3)

    metadata = json.loads(out.with_suffix(".json").read_text())
    assert metadata["mode"] == "cross_attn"
    assert metadata["instruction"] == "remove the red circle"
    assert metadata["seed"] == 0


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "-O", str(out), "--t2i", "3", "--edit", "1"]) == EXIT_OK
    assert (out / INDEX_FILE).exists()
    assert len((out / INDEX_FILE).read_text().splitlines()) == 4
    assert json.loads((out / RESOLVED_CONFIG).read_text())["t2i"] == 3


def test_flags_override_the_config_file(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"t2i": 5, "seed": 4}))
    out = tmp_path / "data"
    assert main(["gen-data", "-c", str(config), "-O", str(out), "--t2i", "2"]) == EXIT_OK
    resolved = json.loads((out / RESOLVED_CONFIG).read_text())
    assert resolved["t2i"] == 2 and resolved["seed"] == 4


@pytest.mark.parametrize("content", ["{not json", "[1, 2]", json.dumps({"t2i": 1, "colour": "red"})])
def test_invalid_config_file(tmp_path, capsys, content):
    config = tmp_path / "config.json"
    config.write_text(content)
    assert main(["gen-data", "-c", str(config), "-O", str(tmp_path / "data")]) == EXIT_CONFIG
    assert error_line(capsys).startswith(f"error code={EXIT_CONFIG} type=ConfigError")


def test_train_codec_without_data(tmp_path):
    argv = ["train-codec", "--data_dir", str(tmp_path / "nothing"), "-O", str(tmp_path / "codec")]
    assert main(argv) == EXIT_DATA


def test_eval(ckpt, tmp_path, capsys):
    out = tmp_path / "eval"
    argv = ["eval", "--ckpt", ckpt, "--suite", "glyphs", "--n", "1", "-O", str(out)]
    assert main(argv) == EXIT_OK
    report = json.loads((out / REPORT_FILE).read_text())
    assert set(report) == {"glyphs", "samples", "config_hash"}
    assert "exact_match_rate" in capsys.readouterr().out


def test_format_error():
    line = format_error(UsageError('a "quoted"\nmessage'), EXIT_USAGE)
    assert line == 'error code=2 type=UsageError message="a \\"quoted\\" message"'
    assert "\n" not in line


def test_cli_exit_code(monkeypatch):
    monkeypatch.setattr(sys, "argv", ["arflow"])
    with pytest.raises(SystemExit) as excinfo:
        cli()
    assert excinfo.value.code == EXIT_USAGE
