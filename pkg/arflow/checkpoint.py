"""Module containing the checkpoint format, and the bundle of models it stores.

A checkpoint is a folder with two files :

* `manifest.json` : format version, and for every tensor its name, shape,
  dtype, byte offset and byte length in the payload, plus a snapshot of the
  configuration, the model shapes and the state of the random generator.
* `payload.bin` : the raw little-endian bytes of every tensor, back to back.

Tensor names are prefixed by the component they belong to (`ar.`, `dit.`,
`vae.`, `codebook.`), so a digest of the payload can be restricted to one
component (to check that frozen models stay untouched).
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from arflow.arlm import ARConfig, ARModel
from arflow.codec import Codebook, Codec, VAE, VAEConfig
from arflow.dit import DiTConfig, DiTModel
from arflow.errors import (
    CheckpointError,
    CorruptManifestError,
    OffsetOverlapError,
    PayloadBoundsError,
    UntrainedError,
    VersionMismatchError,
)
from arflow.utils import PathLike, write_json


FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"
PREFIXES = ("ar.", "dit.", "vae.", "codebook.")
SUPPORTED_DTYPES = ("<f4", "<f8", "<i8", "<i4", "|b1")


@dataclass
class Checkpoint:
    """Content of a checkpoint folder.

    Args:
        tensors (Dict[str, np.ndarray]): Tensors by name, in payload order.
        config (Dict[str, Any], optional): Snapshot of the configuration.
        rng_state (Optional[Dict], optional): State of the random generator
            of the run.
        metadata (Dict[str, Any], optional): Anything else (model shapes,
            stage, step...).
    """

    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[Dict] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    """Write a checkpoint folder.

    Args:
        ckpt (Checkpoint): Content to write.
        path (PathLike): Folder to write (created if needed, files
            overwritten).

    Raises:
        CheckpointError: If the folder is not writable or a tensor has an
            unsupported dtype.

    Returns:
        The folder.
    """
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for name, array in ckpt.tensors.items():
        le = _little_endian(array)
        if le.dtype.str not in SUPPORTED_DTYPES:
            raise CheckpointError(f"Tensor `{name}` has the unsupported dtype {array.dtype}")
        data = le.tobytes()
        entries.append(
            {"name": name, "shape": list(le.shape), "dtype": le.dtype.str, "offset": offset, "length": len(data)}
        )
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "metadata": ckpt.metadata,
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / PAYLOAD, "wb") as f:
            for data in chunks:
                f.write(data)
        write_json(manifest, path / MANIFEST)
    except OSError as e:
        raise CheckpointError(f"Can't write the checkpoint {path} : {e}") from e
    return path


def read_manifest(path: PathLike) -> Dict[str, Any]:
    """Read and validate the manifest of a checkpoint folder.

    Args:
        path (PathLike): Checkpoint folder.

    Raises:
        CorruptManifestError: If the manifest is missing, unparsable, or
            misses required fields.
        VersionMismatchError: If the format version is not supported.
        OffsetOverlapError: If two tensors share payload bytes.
        PayloadBoundsError: If a tensor lies outside of the payload.

    Returns:
        The manifest.
    """
    path = Path(path)
    try:
        with open(path / MANIFEST, "r") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise CorruptManifestError(f"No checkpoint manifest at {path / MANIFEST}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptManifestError(f"Can't parse the checkpoint manifest {path / MANIFEST} : {e}") from e

    if not isinstance(manifest, dict) or "format_version" not in manifest or "tensors" not in manifest:
        raise CorruptManifestError(f"The manifest {path / MANIFEST} misses `format_version` or `tensors`")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"Checkpoint format version {manifest['format_version']} is not supported (expected {FORMAT_VERSION})"
        )

    entries = manifest["tensors"]
    try:
        for e in entries:
            expected = int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize
            if e["length"] != expected or e["offset"] < 0:
                raise CorruptManifestError(
                    f"Tensor `{e['name']}` : {e['length']} bytes don't fit shape {e['shape']} and dtype {e['dtype']}"
                )
    except (KeyError, TypeError) as err:
        raise CorruptManifestError(f"Invalid tensor entry in {path / MANIFEST} : {err}") from err

    ordered = sorted(entries, key=lambda e: e["offset"])
    for a, b in zip(ordered, ordered[1:]):
        if a["offset"] + a["length"] > b["offset"]:
            raise OffsetOverlapError(f"Tensors `{a['name']}` and `{b['name']}` overlap in the payload")

    payload = path / PAYLOAD
    size = payload.stat().st_size if payload.exists() else 0
    for e in entries:
        if e["offset"] + e["length"] > size:
            raise PayloadBoundsError(
                f"Tensor `{e['name']}` ends at byte {e['offset'] + e['length']} but the payload has {size} bytes"
            )
    return manifest


def load_checkpoint(path: PathLike) -> Checkpoint:
    """Read a checkpoint folder.

    Args:
        path (PathLike): Checkpoint folder.

    Raises:
        CheckpointError: If the checkpoint is invalid (see `read_manifest`
            for the distinct failures).

    Returns:
        The checkpoint, tensors in payload order.
    """
    path = Path(path)
    manifest = read_manifest(path)
    with open(path / PAYLOAD, "rb") as f:
        payload = f.read()

    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["length"]]
        array = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = array.astype(array.dtype.newbyteorder("="), copy=True)
    return Checkpoint(tensors, manifest.get("config") or {}, manifest.get("rng_state"), manifest.get("metadata") or {})


def payload_digest(path: PathLike, prefixes: Optional[List[str]] = None) -> str:
    """SHA-256 of the payload bytes of the tensors whose name starts with one
    of the prefixes (every tensor if not given), in payload order.
    """
    manifest = read_manifest(path)
    h = hashlib.sha256()
    with open(Path(path) / PAYLOAD, "rb") as f:
        payload = f.read()
    for e in sorted(manifest["tensors"], key=lambda e: e["offset"]):
        if prefixes is None or any(e["name"].startswith(p) for p in prefixes):
            h.update(e["name"].encode())
            h.update(payload[e["offset"] : e["offset"] + e["length"]])
    return h.hexdigest()


@dataclass
class Bundle:
    """Models of a run. Every part is optional : the codec stage only fills
    the codebook and the VAE, the training stages fill everything.
    """

    codebook: Optional[Codebook] = None
    vae: Optional[VAE] = None
    ar: Optional[ARModel] = None
    dit: Optional[DiTModel] = None

    @property
    def codec(self) -> Codec:
        if self.codebook is None or self.vae is None:
            raise UntrainedError("The checkpoint doesn't contain the image codecs")
        return Codec(self.codebook, self.vae)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Every tensor of the bundle, prefixed by its component."""
        tensors = {}
        if self.codebook is not None:
            tensors["codebook.codes"] = self.codebook.codes
        if self.vae is not None:
            tensors.update({f"vae.{k}": v for k, v in self.vae.state_dict().items()})
            tensors["vae.latent_scale"] = np.array([self.vae.latent_scale], dtype=np.float64)
        if self.ar is not None:
            tensors.update({f"ar.{k}": v for k, v in self.ar.state_dict().items()})
        if self.dit is not None:
            tensors.update({f"dit.{k}": v for k, v in self.dit.state_dict().items()})
        return tensors

    def shapes(self) -> Dict[str, Dict]:
        """Configurations needed to rebuild the models."""
        shapes = {}
        if self.vae is not None:
            config = self.vae.config
            shapes["vae"] = {"hidden_channels": config.hidden_channels, "latent_channels": config.latent_channels}
        if self.ar is not None:
            shapes["ar"] = self.ar.config.to_dict()
        if self.dit is not None:
            shapes["dit"] = self.dit.config.to_dict()
        return shapes


def save_bundle(
    bundle: Bundle,
    path: PathLike,
    config: Optional[Dict[str, Any]] = None,
    rng_state: Optional[Dict] = None,
    **metadata,
) -> Path:
    """Save the models of a run as a checkpoint.

    Args:
        bundle (Bundle): Models to save.
        path (PathLike): Checkpoint folder.
        config (Optional[Dict[str, Any]], optional): Configuration snapshot.
        rng_state (Optional[Dict], optional): State of the run generator.
        **metadata: Extra metadata (stage, step...).

    Returns:
        The folder.
    """
    metadata = {"models": bundle.shapes(), **metadata}
    return save_checkpoint(Checkpoint(bundle.tensors(), config or {}, rng_state, metadata), path)


def _component(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_bundle(path: PathLike) -> Bundle:
    """Load the models stored in a checkpoint.

    Args:
        path (PathLike): Checkpoint folder.

    Raises:
        CheckpointError: If the checkpoint is invalid.
        ShapeMismatchError: If the tensors don't match the stored model
            shapes.

    Returns:
        The models (trained flags set).
    """
    ckpt = load_checkpoint(path)
    unknown = [k for k in ckpt.tensors if not k.startswith(PREFIXES)]
    if unknown:
        raise CorruptManifestError(f"The checkpoint {path} contains tensors of unknown components : {unknown}")
    shapes = ckpt.metadata.get("models", {})
    rng = np.random.default_rng(0)
    bundle = Bundle()

    if "codebook.codes" in ckpt.tensors:
        bundle.codebook = Codebook(ckpt.tensors["codebook.codes"].astype(np.float32))
    if "vae" in shapes:
        vae_tensors = _component(ckpt.tensors, "vae.")
        scale = vae_tensors.pop("latent_scale", None)
        if scale is None:
            raise CorruptManifestError(f"The checkpoint {path} misses `vae.latent_scale`")
        bundle.vae = VAE(VAEConfig(**shapes["vae"]), rng)
        bundle.vae.load_state_dict(vae_tensors)
        bundle.vae.latent_scale = float(scale[0])
        bundle.vae.trained = True
    try:
        if "ar" in shapes:
            bundle.ar = ARModel(ARConfig(**shapes["ar"]), rng)
            bundle.ar.load_state_dict(_component(ckpt.tensors, "ar."))
        if "dit" in shapes:
            bundle.dit = DiTModel(DiTConfig(**shapes["dit"]), rng)
            bundle.dit.load_state_dict(_component(ckpt.tensors, "dit."))
    except TypeError as e:
        raise CorruptManifestError(f"Invalid model shapes in the checkpoint {path} : {e}") from e
    return bundle


def checkpoint_metadata(path: PathLike) -> Dict[str, Any]:
    """Metadata and configuration snapshot of a checkpoint, without loading
    the payload.
    """
    manifest = read_manifest(path)
    metadata = manifest.get("metadata") or {}
    return {"config": manifest.get("config") or {}, "rng_state": manifest.get("rng_state"), **metadata}
