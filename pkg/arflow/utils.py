"""Various utils function used by `arflow`."""

import csv
import hashlib
import json
import math
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar, Union

import numpy as np
from PIL import Image
from tqdm import tqdm

from arflow.errors import DataError


PathLike = Union[str, Path]
T = TypeVar("T")
R = TypeVar("R")


def derive_seed(*keys: int) -> int:
    """Derive a 32-bit seed from a sequence of integers (a base seed, then
    indices). The result only depends on the keys, so work bound to an index
    gets the same randomness whichever thread runs it.

    Args:
        *keys (int): Integers identifying the work item.

    Returns:
        Seed.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def rng_from(*keys: int) -> np.random.Generator:
    """Random generator seeded with `derive_seed(*keys)`."""
    return np.random.default_rng(derive_seed(*keys))


def save_ppm(image: np.ndarray, path: PathLike):
    """Save an image as a binary PPM (P6) file, 8 bits per channel.

    Args:
        image (np.ndarray): Image of shape (H, W, 3), values in [0, 1].
        path (PathLike): Where to write the file.
    """
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PPM")


def load_ppm(path: PathLike, size: int = 32) -> np.ndarray:
    """Load a PPM image.

    Args:
        path (PathLike): File to read.
        size (int, optional): Expected width and height.

    Raises:
        DataError: If the file can't be read or doesn't have the expected
            size.

    Returns:
        Image of shape (size, size, 3), float32 values in [0, 1].
    """
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DataError(f"Can't read the image {path} : {e}") from e
    if data.shape != (size, size, 3):
        raise DataError(f"The image {path} should be {size}x{size} pixels (got {data.shape[1]}x{data.shape[0]})")
    return (data.astype(np.float32) / 255).astype(np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    """Apply the 8-bit quantization of the image files to an image."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255) / 255).astype(np.float32)


def to_strict_json(data: Any) -> Any:
    """Replace the non-finite floats of a JSON-like structure by the strings
    `"inf"`, `"-inf"` and `"nan"`, which strict JSON can represent.
    """
    if isinstance(data, float) and not math.isfinite(data):
        return "nan" if math.isnan(data) else ("inf" if data > 0 else "-inf")
    if isinstance(data, dict):
        return {k: to_strict_json(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_strict_json(v) for v in data]
    return data


def write_json(data: Any, path: PathLike):
    """Write pretty, strict JSON to a file (creating the parent folders).

    Non-finite floats are written as strings (see `to_strict_json`).
    """
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_strict_json(data), f, ensure_ascii=False, indent=4, allow_nan=False)


def write_csv(rows: List[Dict[str, Any]], path: PathLike, header: Iterable[str]):
    """Write a list of records as a CSV file.

    Args:
        rows (List[Dict[str, Any]]): Records to write.
        path (PathLike): Where to write the file.
        header (Iterable[str]): Columns, in order.
    """
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(header), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def psnr(mse: float) -> float:
    """Peak signal-to-noise ratio (in dB) of images in [0, 1].

    Args:
        mse (float): Mean squared error.

    Returns:
        PSNR, `+inf` for identical images.
    """
    if mse <= 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def sha256_file(path: PathLike) -> str:
    """Hex SHA-256 of a file content."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: Dict) -> str:
    """Short stable hash of a configuration dictionary."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1, desc: Optional[str] = None) -> List[R]:
    """Apply a function to every item, in a pool of threads if `threads > 1`.
    Results are returned in the order of the items, whatever thread ran them.

    Args:
        fn (Callable[[T], R]): Function to apply.
        items (Sequence[T]): Items.
        threads (int, optional): Number of threads.
        desc (Optional[str], optional): Description of the progress bar (no
            progress bar if not given).

    Returns:
        The results.
    """
    with tqdm(total=len(items), desc=desc, disable=desc is None) as pbar:
        if threads <= 1:
            return [_tick(pbar, fn(item)) for item in items]
        with ThreadPool(processes=threads) as pool:
            return [_tick(pbar, r) for r in pool.imap(fn, items)]


def _tick(pbar: tqdm, result: R) -> R:
    pbar.update(1)
    return result
