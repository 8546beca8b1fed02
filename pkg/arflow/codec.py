"""Module containing the image codecs :

* `Codebook` : k-means quantizer turning each 4x4 patch of an image into a
  discrete token (the tokens predicted by the autoregressive model).
* `VAE` : small deterministic autoencoder turning an image into an 8x8x4
  latent grid (the target of the diffusion model, and the detail-preserving
  condition of the editing tasks).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import cdist
from tqdm import tqdm

from arflow.errors import DataError, UntrainedError
from arflow.nn import Linear, Module
from arflow.optim import Adam
from arflow.tensor import Tensor, backward, mean_squared_error, no_grad, silu


logger = logging.getLogger(__name__)

PATCH = 4
GRID_TOKENS = 8
N_TOKENS = GRID_TOKENS * GRID_TOKENS
PATCH_DIM = PATCH * PATCH * 3
DEFAULT_CODEBOOK_SIZE = 256
KMEANS_ITERS = 25
LOG_EVERY = 50


def patchify(images: np.ndarray, p: int = PATCH) -> np.ndarray:
    """Split images into flattened non-overlapping patches.

    Args:
        images (np.ndarray): Images of shape (N, H, W, C).
        p (int, optional): Patch size.

    Returns:
        Array of shape (N, H / p, W / p, p * p * C), row-major inside each
        patch.
    """
    n, h, w, c = images.shape
    x = images.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h // p, w // p, p * p * c)


def unpatchify(patches: np.ndarray, p: int = PATCH) -> np.ndarray:
    """Inverse of `patchify`."""
    n, gh, gw, d = patches.shape
    c = d // (p * p)
    x = patches.reshape(n, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, gh * p, gw * p, c)


@dataclass
class Codebook:
    """Code vectors of the image tokenizer.

    Args:
        codes (np.ndarray): Array of shape (K, 48).
        trained (bool, optional): Whether the codes were fitted.
    """

    codes: np.ndarray
    trained: bool = True

    @property
    def size(self) -> int:
        return self.codes.shape[0]


def _distinct_codes(codes: np.ndarray, data: np.ndarray) -> np.ndarray:
    # Replace duplicated codes by the data points quantized the worst
    _, first = np.unique(codes, axis=0, return_index=True)
    duplicated = sorted(set(range(len(codes))) - set(first.tolist()))
    if not duplicated:
        return codes
    errors = cdist(data, codes, "sqeuclidean").min(axis=1)
    candidates = [i for i in np.argsort(-errors, kind="stable")]
    taken = {tuple(c) for c in codes}
    for k in duplicated:
        while candidates and tuple(data[candidates[0]]) in taken:
            candidates.pop(0)
        if not candidates:
            break
        codes[k] = data[candidates.pop(0)]
        taken.add(tuple(codes[k]))
    return codes


def train_codebook(
    images: np.ndarray, seed: int, size: int = DEFAULT_CODEBOOK_SIZE, iters: int = KMEANS_ITERS
) -> Codebook:
    """Fit the codebook with k-means on the 4x4 patches of the images.

    Args:
        images (np.ndarray): Images of shape (N, 32, 32, 3).
        seed (int): Seed of the k-means++ initialization.
        size (int, optional): Number of codes K.
        iters (int, optional): Number of k-means iterations.

    Raises:
        DataError: If the images contain fewer than K distinct patches.

    Returns:
        The trained codebook.
    """
    data = patchify(images).reshape(-1, PATCH_DIM).astype(np.float64)
    distinct = np.unique(data, axis=0)
    if len(distinct) < size:
        raise DataError(f"The images contain {len(distinct)} distinct patches, fewer than the {size} codes to fit")

    codes, _ = kmeans2(data, size, iter=iters, minit="++", seed=np.random.default_rng(seed), missing="warn")
    codes = _distinct_codes(codes, distinct)
    return Codebook(codes.astype(np.float32))


def encode_tokens(images: np.ndarray, cb: Codebook) -> np.ndarray:
    """Quantize every 4x4 patch to the closest code (ties go to the lowest id).

    Args:
        images (np.ndarray): One image (32, 32, 3) or a batch (N, 32, 32, 3).
        cb (Codebook): Trained codebook.

    Raises:
        UntrainedError: If the codebook is not trained.

    Returns:
        Token grid(s) of shape (8, 8) or (N, 8, 8).
    """
    if not cb.trained:
        raise UntrainedError("The codebook is not trained")
    single = images.ndim == 3
    batch = images[None] if single else images
    patches = patchify(batch)
    d = cdist(patches.reshape(-1, PATCH_DIM).astype(np.float64), cb.codes.astype(np.float64), "sqeuclidean")
    tokens = d.argmin(axis=1).reshape(patches.shape[:3])
    return tokens[0] if single else tokens


def decode_tokens(tokens: np.ndarray, cb: Codebook) -> np.ndarray:
    """Rebuild an image from its tokens (each patch replaced by its code)."""
    single = tokens.ndim == 2
    batch = tokens[None] if single else tokens
    images = np.clip(unpatchify(cb.codes[batch]), 0.0, 1.0)
    return images[0] if single else images


def quantization_error(images: np.ndarray, cb: Codebook) -> float:
    """Mean squared error between the patches and their codes."""
    data = patchify(images).reshape(-1, PATCH_DIM).astype(np.float64)
    return float(cdist(data, cb.codes.astype(np.float64), "sqeuclidean").min(axis=1).mean() / PATCH_DIM)


def codebook_utilization(images: np.ndarray, cb: Codebook) -> float:
    """Fraction of the codes used at least once to encode the images."""
    return len(np.unique(encode_tokens(images, cb))) / cb.size


@dataclass(frozen=True)
class VAEConfig:
    """Shape of the autoencoder.

    Args:
        hidden_channels (int, optional): Channels after the first layer.
        latent_channels (int, optional): Channels C of the latent grid.
    """

    hidden_channels: int = 32
    latent_channels: int = 4


def space_to_depth(x: Tensor) -> Tensor:
    """Gather each 2x2 block of pixels into the channels (N, H, W, C) →
    (N, H / 2, W / 2, 4C).
    """
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4 * c)


def depth_to_space(x: Tensor) -> Tensor:
    """Inverse of `space_to_depth`."""
    n, h, w, c4 = x.shape
    c = c4 // 4
    return x.reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c)


class VAE(Module):
    """Deterministic autoencoder with a downsampling ratio of 4.

    The encoder is made of two 2x2 convolutions with stride 2 (a 2x2
    space-to-depth followed by a linear layer), the decoder of two transposed
    convolutions (a linear layer followed by a depth-to-space).

    Args:
        config (VAEConfig): Shape of the autoencoder.
        rng (np.random.Generator): Generator used for the initialization.
    """

    def __init__(self, config: VAEConfig, rng: np.random.Generator):
        self.config = config
        h, c = config.hidden_channels, config.latent_channels
        self.enc1 = Linear(4 * 3, h, rng)
        self.enc2 = Linear(4 * h, c, rng)
        self.dec1 = Linear(c, 4 * h, rng)
        self.dec2 = Linear(h, 4 * 3, rng)
        self.trained = False
        self.latent_scale = 1.0

    def encode(self, images: Tensor) -> Tensor:
        """Images (N, 32, 32, 3) → unscaled latents (N, 8, 8, C)."""
        return self.enc2(space_to_depth(silu(self.enc1(space_to_depth(images)))))

    def decode(self, latents: Tensor) -> Tensor:
        """Unscaled latents (N, 8, 8, C) → raw images (N, 32, 32, 3)."""
        return depth_to_space(self.dec2(silu(depth_to_space(self.dec1(latents)))))


def vae_encode(vae: VAE, images: np.ndarray) -> np.ndarray:
    """Encode images into latent grids.

    Args:
        vae (VAE): Trained autoencoder.
        images (np.ndarray): One image (32, 32, 3) or a batch (N, 32, 32, 3).

    Raises:
        UntrainedError: If the autoencoder is not trained.

    Returns:
        Latent grid(s) of shape (8, 8, C) or (N, 8, 8, C), scaled to unit
        variance over the training images.
    """
    if not vae.trained:
        raise UntrainedError("The VAE is not trained")
    single = images.ndim == 3
    with no_grad():
        z = vae.encode(Tensor(images[None] if single else images)).data * vae.latent_scale
    return z[0] if single else z


def vae_decode(vae: VAE, latents: np.ndarray) -> np.ndarray:
    """Decode latent grids into images, clamped to [0, 1].

    Args:
        vae (VAE): Trained autoencoder.
        latents (np.ndarray): One latent grid (8, 8, C) or a batch.

    Raises:
        UntrainedError: If the autoencoder is not trained.

    Returns:
        Image(s) of shape (32, 32, 3) or (N, 32, 32, 3).
    """
    if not vae.trained:
        raise UntrainedError("The VAE is not trained")
    single = latents.ndim == 3
    z = (latents[None] if single else latents) / vae.latent_scale
    with no_grad():
        images = np.clip(vae.decode(Tensor(z)).data, 0.0, 1.0)
    return images[0] if single else images


def train_vae(
    images: np.ndarray,
    config: VAEConfig,
    seed: int,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 64,
) -> Tuple[VAE, List[Dict[str, float]]]:
    """Train the autoencoder to reconstruct the images (MSE, Adam).

    Args:
        images (np.ndarray): Training images, shape (N, 32, 32, 3).
        config (VAEConfig): Shape of the autoencoder.
        seed (int): Seed of the initialization and of the batches.
        steps (int): Number of optimization steps.
        lr (float, optional): Learning rate.
        batch_size (int, optional): Number of images per step.

    Returns:
        The trained autoencoder (with its latent scale set).
        The loss of each step.
    """
    rng = np.random.default_rng(seed)
    vae = VAE(config, rng)
    opt = Adam(vae.parameters(), lr=lr)

    history = []
    pbar = tqdm(range(steps), desc="VAE", disable=steps == 0)
    for step in pbar:
        batch = images[rng.choice(len(images), size=min(batch_size, len(images)), replace=False)]
        x = Tensor(batch)
        loss = mean_squared_error(vae.decode(vae.encode(x)), x)
        backward(loss)
        opt.step()

        history.append({"step": step, "loss": loss.item()})
        pbar.set_postfix(loss=f"{loss.item():.5f}")
        if step % LOG_EVERY == 0 or step == steps - 1:
            logger.info(f"step={step} loss_vae={loss.item():.6f}")

    vae.trained = True
    with no_grad():
        z = np.concatenate([vae.encode(Tensor(images[i : i + 256])).data for i in range(0, len(images), 256)])
    vae.latent_scale = float(1.0 / (z.std() + 1e-8))
    return vae, history


@dataclass
class Codec:
    """Frozen image codecs used by the generation pipeline."""

    codebook: Codebook
    vae: VAE

    def tokens(self, images: np.ndarray) -> np.ndarray:
        return encode_tokens(images, self.codebook)

    def latents(self, images: np.ndarray) -> np.ndarray:
        return vae_encode(self.vae, images)

    def images(self, latents: np.ndarray) -> np.ndarray:
        return vae_decode(self.vae, latents)


def load_image_array(images: List[np.ndarray], limit: Optional[int] = None) -> np.ndarray:
    """Stack a list of images into one float32 array."""
    if not images:
        raise DataError("No image to train the codecs on")
    return np.stack(images[:limit]).astype(np.float32)
