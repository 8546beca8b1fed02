import csv
import json
import math
import threading
import time

import numpy as np
import pytest

from arflow.errors import DataError
from arflow.utils import (
    config_hash,
    derive_seed,
    load_ppm,
    ordered_map,
    psnr,
    quantize,
    rng_from,
    save_ppm,
    sha256_file,
    write_csv,
    write_json,
)


def test_derive_seed():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert derive_seed(0, 1) != derive_seed(1, 0)
    assert 0 <= derive_seed(123456789, 5) < 2**32


def test_rng_from():
    assert rng_from(3, 4).integers(1000) == rng_from(3, 4).integers(1000)


def test_ppm_round_trip(tmp_path):
    image = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    save_ppm(image, tmp_path / "sub" / "img.ppm")
    loaded = load_ppm(tmp_path / "sub" / "img.ppm")
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(loaded, quantize(image))


def test_ppm_clips_values(tmp_path):
    save_ppm(np.full((32, 32, 3), 2.0), tmp_path / "img.ppm")
    assert (load_ppm(tmp_path / "img.ppm") == 1.0).all()


def test_load_ppm_wrong_size(tmp_path):
    save_ppm(np.zeros((16, 16, 3)), tmp_path / "img.ppm")
    with pytest.raises(DataError):
        load_ppm(tmp_path / "img.ppm")
    assert load_ppm(tmp_path / "img.ppm", size=16).shape == (16, 16, 3)


def test_load_ppm_not_an_image(tmp_path):
    (tmp_path / "img.ppm").write_text("hello")
    with pytest.raises(DataError):
        load_ppm(tmp_path / "img.ppm")
    with pytest.raises(DataError):
        load_ppm(tmp_path / "missing.ppm")


def test_quantize_is_idempotent():
    image = quantize(np.random.default_rng(1).random((4, 4, 3)))
    np.testing.assert_array_equal(quantize(image), image)


def test_write_json(tmp_path):
    write_json({"a": [1, 2], "é": 0.5}, tmp_path / "a" / "b.json")
    assert (tmp_path / "a" / "b.json").read_text(encoding="utf-8").count("é") == 1


def test_write_json_is_strict(tmp_path):
    write_json({"psnr": math.inf, "low": [-math.inf, float("nan"), 1.5]}, tmp_path / "r.json")
    text = (tmp_path / "r.json").read_text()
    assert "Infinity" not in text and "NaN" not in text
    assert json.loads(text) == {"psnr": "inf", "low": ["-inf", "nan", 1.5]}


def test_write_csv(tmp_path):
    write_csv([{"x": 1, "y": 2, "z": 3}, {"x": 4, "y": 5}], tmp_path / "out.csv", ("y", "x"))
    with open(tmp_path / "out.csv") as f:
        rows = list(csv.reader(f))
    assert rows == [["y", "x"], ["2", "1"], ["5", "4"]]


@pytest.mark.parametrize("mse, expected", [(0.0, math.inf), (1.0, 0.0), (0.01, 20.0), (1e-4, 40.0)])
def test_psnr(mse, expected):
    assert psnr(mse) == pytest.approx(expected)


def test_sha256_file(tmp_path):
    (tmp_path / "f").write_bytes(b"abc")
    assert sha256_file(tmp_path / "f") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_config_hash():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16


@pytest.mark.parametrize("threads", [1, 4])
def test_ordered_map_keeps_the_order(threads):
    def slow_square(x):
        # The first items finish last
        time.sleep(0.002 * (10 - x))
        return x * x

    assert ordered_map(slow_square, list(range(10)), threads=threads) == [x * x for x in range(10)]


def test_ordered_map_uses_threads():
    names = ordered_map(lambda _: (time.sleep(0.01), threading.current_thread().name)[1], list(range(8)), threads=4)
    assert len(set(names)) > 1
