import json

import numpy as np
import pytest

from arflow.checkpoint import (
    MANIFEST,
    PAYLOAD,
    Bundle,
    Checkpoint,
    checkpoint_metadata,
    load_bundle,
    load_checkpoint,
    payload_digest,
    save_bundle,
    save_checkpoint,
)
from arflow.errors import (
    CheckpointError,
    CorruptManifestError,
    OffsetOverlapError,
    PayloadBoundsError,
    ShapeMismatchError,
    UntrainedError,
    VersionMismatchError,
)
from arflow.utils import sha256_file


@pytest.fixture
def ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a.steps": np.arange(5, dtype=np.int64),
            "b.scale": np.array([0.5], dtype=np.float64),
            "b.flags": np.array([True, False]),
        },
        config={"lr": 0.1},
        rng_state={"state": 42},
        metadata={"stage": "test"},
    )


@pytest.fixture
def saved(ckpt, tmp_path):
    return save_checkpoint(ckpt, tmp_path / "ckpt")


def edit_manifest(path, fn):
    manifest = json.loads((path / MANIFEST).read_text())
    fn(manifest)
    (path / MANIFEST).write_text(json.dumps(manifest))


def test_round_trip_is_bitwise(ckpt, saved):
    loaded = load_checkpoint(saved)
    assert list(loaded.tensors) == list(ckpt.tensors)
    for name, tensor in ckpt.tensors.items():
        assert loaded.tensors[name].dtype == tensor.dtype
        assert loaded.tensors[name].tobytes() == tensor.tobytes()
    assert loaded.config == ckpt.config
    assert loaded.rng_state == ckpt.rng_state
    assert loaded.metadata == ckpt.metadata


def test_resave_is_identical(saved, tmp_path):
    again = save_checkpoint(load_checkpoint(saved), tmp_path / "again")
    for name in (MANIFEST, PAYLOAD):
        assert sha256_file(saved / name) == sha256_file(again / name)


def test_missing_manifest(tmp_path):
    with pytest.raises(CorruptManifestError):
        load_checkpoint(tmp_path)


def test_unparsable_manifest(saved):
    (saved / MANIFEST).write_text("{not json")
    with pytest.raises(CorruptManifestError):
        load_checkpoint(saved)


def test_manifest_without_tensors(saved):
    edit_manifest(saved, lambda m: m.pop("tensors"))
    with pytest.raises(CorruptManifestError):
        load_checkpoint(saved)


def test_version_mismatch(saved):
    edit_manifest(saved, lambda m: m.update(format_version=99))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(saved)


def test_overlapping_tensors(saved):
    def overlap(m):
        m["tensors"][1]["offset"] = m["tensors"][0]["offset"] + 4

    edit_manifest(saved, overlap)
    with pytest.raises(OffsetOverlapError):
        load_checkpoint(saved)


def test_truncated_payload(saved):
    data = (saved / PAYLOAD).read_bytes()
    (saved / PAYLOAD).write_bytes(data[:-1])
    with pytest.raises(PayloadBoundsError):
        load_checkpoint(saved)


def test_length_not_matching_the_shape(saved):
    def wrong_length(m):
        m["tensors"][0]["length"] += 4

    edit_manifest(saved, wrong_length)
    with pytest.raises(CorruptManifestError):
        load_checkpoint(saved)


def test_errors_share_a_base_class(saved):
    (saved / PAYLOAD).unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


def test_payload_digest_by_component(saved, ckpt, tmp_path):
    ckpt.tensors["b.scale"] = np.array([0.25])
    other = save_checkpoint(ckpt, tmp_path / "other")
    assert payload_digest(saved, ["a."]) == payload_digest(other, ["a."])
    assert payload_digest(saved, ["b."]) != payload_digest(other, ["b."])
    assert payload_digest(saved) != payload_digest(other)


def test_bundle_round_trip(bundle, tmp_path):
    path = save_bundle(bundle, tmp_path / "bundle", {"seed": 1}, stage="pretrain", step=3)
    loaded = load_bundle(path)

    for name, tensor in bundle.tensors().items():
        np.testing.assert_array_equal(loaded.tensors()[name], tensor, err_msg=name)
    assert loaded.ar.config == bundle.ar.config
    assert loaded.dit.config == bundle.dit.config
    assert loaded.vae.trained and loaded.vae.latent_scale == bundle.vae.latent_scale

    metadata = checkpoint_metadata(path)
    assert metadata["stage"] == "pretrain" and metadata["step"] == 3
    assert metadata["config"] == {"seed": 1}


def test_bundle_save_load_save(bundle, tmp_path):
    first = save_bundle(bundle, tmp_path / "first")
    second = save_bundle(load_bundle(first), tmp_path / "second")
    assert sha256_file(first / PAYLOAD) == sha256_file(second / PAYLOAD)


def test_codec_only_bundle(codebook, vae, tmp_path):
    loaded = load_bundle(save_bundle(Bundle(codebook, vae), tmp_path / "codec"))
    assert loaded.ar is None and loaded.dit is None
    np.testing.assert_array_equal(loaded.codec.codebook.codes, codebook.codes)


def test_bundle_with_unknown_components(ckpt, tmp_path):
    # `a.` and `b.` aren't components of a bundle
    path = save_checkpoint(ckpt, tmp_path / "ckpt")
    with pytest.raises(CorruptManifestError):
        load_bundle(path)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(Checkpoint({"ar.x": np.zeros(3, dtype=np.complex64)}), tmp_path / "ckpt")


def test_bundle_without_codecs():
    with pytest.raises(UntrainedError):
        Bundle().codec


def test_bundle_shape_mismatch(bundle, tmp_path):
    path = save_bundle(bundle, tmp_path / "bundle")

    def wider(m):
        m["metadata"]["models"]["ar"]["d_model"] = 32

    edit_manifest(path, wider)
    with pytest.raises(ShapeMismatchError):
        load_bundle(path)
