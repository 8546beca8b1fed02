"""Module containing the training stages : fitting of the image codecs, and the
joint optimization of the autoregressive model and the diffusion model
(`L = L_CE + lambda * L_diff`) over a mix of text-to-image, reconstruction and
editing examples.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from arflow.arlm import ARConfig, ARModel, build_sequence, ce_loss, pad_batch, target_start
from arflow.checkpoint import Bundle, checkpoint_metadata, load_bundle, save_bundle
from arflow.codec import (
    Codec,
    VAEConfig,
    codebook_utilization,
    load_image_array,
    quantization_error,
    train_codebook,
    train_vae,
)
from arflow.config import TASKS, CodecConfig, TrainConfig, dump_config
from arflow.data import Record, curate_dataset, load_dataset, load_images
from arflow.dit import (
    ConditioningMode,
    DiTConfig,
    DiTModel,
    build_condition,
    composite,
    flow_loss,
    noise_region_mask,
)
from arflow.errors import CorruptManifestError, DataError, ShapeMismatchError
from arflow.optim import Adam
from arflow.tensor import Tensor, add, backward, concat, index, mul, reshape
from arflow.utils import derive_seed, write_csv


logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
LOSSES_FILE = "losses.csv"
LOSS_COLUMNS = ("step", "task", "loss_total", "loss_ce", "loss_diff")
LOG_EVERY = 50
ENCODE_CHUNK = 256


@dataclass
class Example:
    """One training example, with its images already encoded.

    Args:
        task (str): `t2i`, `recon` or `edit`.
        prompt (str): Prompt or instruction.
        target_tokens (np.ndarray): Token grid of the target image (8, 8).
        target_latent (np.ndarray): Latent of the target image (8, 8, C).
        ref_tokens (Optional[np.ndarray], optional): Token grid of the
            reference image.
        ref_latent (Optional[np.ndarray], optional): Latent of the reference
            image.
    """

    task: str
    prompt: str
    target_tokens: np.ndarray
    target_latent: np.ndarray
    ref_tokens: Optional[np.ndarray] = None
    ref_latent: Optional[np.ndarray] = None


def _encode(codec: Codec, images: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    tokens, latents = [], []
    for i in range(0, len(images), ENCODE_CHUNK):
        chunk = np.stack(images[i : i + ENCODE_CHUNK])
        tokens.append(codec.tokens(chunk))
        latents.append(codec.latents(chunk))
    return np.concatenate(tokens), np.concatenate(latents)


def prepare_examples(records: List[Record], data_dir, codec: Codec) -> List[Example]:
    """Load and encode the images of the records.

    Args:
        records (List[Record]): Dataset records.
        data_dir: Dataset folder.
        codec (Codec): Trained codecs.

    Returns:
        One example per record.
    """
    if not records:
        return []
    loaded = [load_images(data_dir, r) for r in records]
    tokens, latents = _encode(codec, [target for target, _ in loaded])
    with_ref = [i for i, (_, ref) in enumerate(loaded) if ref is not None]
    ref_tokens, ref_latents = _encode(codec, [loaded[i][1] for i in with_ref]) if with_ref else ([], [])
    refs = {i: (ref_tokens[j], ref_latents[j]) for j, i in enumerate(with_ref)}

    examples = []
    for i, r in enumerate(records):
        rt, rl = refs.get(i, (None, None))
        examples.append(Example(r.task, r.prompt, tokens[i], latents[i], rt, rl))
    return examples


def task_mode(task: str, edit_mode: str) -> ConditioningMode:
    """Conditioning mode of the diffusion model for a task."""
    return ConditioningMode.NONE if task == "t2i" else ConditioningMode(edit_mode)


def image_hidden(hidden: Tensor, ids: np.ndarray) -> Tensor:
    """Hidden states at the 64 target image positions of every row.

    Args:
        hidden (Tensor): Hidden states of shape (B, T, d).
        ids (np.ndarray): Token ids of shape (B, T).

    Returns:
        Tensor of shape (B, 64, d).
    """
    b, _, d = hidden.shape
    starts = [target_start(row) for row in ids]
    if len(set(starts)) == 1:
        return index(hidden, (slice(None), slice(starts[0], starts[0] + 64)))
    rows = [reshape(index(hidden, (i, slice(s, s + 64))), (1, 64, d)) for i, s in enumerate(starts)]
    return concat(rows, axis=0)


def diffusion_loss(
    dit: DiTModel, hidden: Tensor, batch: List[Example], mode: ConditioningMode, rng: np.random.Generator
) -> Tensor:
    """Flow-matching loss of a batch sharing one conditioning mode.

    Args:
        dit (DiTModel): Diffusion model.
        hidden (Tensor): AR hidden states at the target image positions,
            shape (B, 64, d).
        batch (List[Example]): Examples of the batch.
        mode (ConditioningMode): Conditioning mode.
        rng (np.random.Generator): Generator of the times and of the noise.

    Raises:
        DataError: If the mode needs reference latents and an example has
            none.

    Returns:
        Scalar tensor.
    """
    ref = None
    if mode != ConditioningMode.NONE:
        if any(ex.ref_latent is None for ex in batch):
            raise DataError(f"Conditioning mode `{mode.value}` needs a reference image for every example")
        ref = np.stack([ex.ref_latent for ex in batch])

    x1 = np.stack([ex.target_latent for ex in batch])
    t = rng.random(len(batch)).astype(np.float32)
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    cond = build_condition(dit, hidden, ref, mode)
    if mode.uses_concat:
        x0 = composite(np.zeros_like(ref), x0)
        return flow_loss(dit, composite(ref, x1), cond, t, x0, noise_region_mask(len(batch)))
    return flow_loss(dit, x1, cond, t, x0)


def joint_step(
    ar: ARModel,
    dit: DiTModel,
    optimizer: Adam,
    batch: List[Example],
    lambda_: float,
    edit_mode: str,
    rng: np.random.Generator,
) -> Dict[str, float]:
    """One joint optimization step of both models.

    The AR model runs teacher-forced on the whole sequences, its hidden states
    at the target image positions condition the diffusion model, and the
    total loss `loss_ce + lambda * loss_diff` is minimized with one Adam
    update over the parameters of both models.

    Args:
        ar (ARModel): Autoregressive model.
        dit (DiTModel): Diffusion model.
        optimizer (Adam): Optimizer over the parameters of both models.
        batch (List[Example]): Examples (tasks may be mixed).
        lambda_ (float): Weight of the diffusion loss.
        edit_mode (str): Conditioning mode of the reconstruction and editing
            examples.
        rng (np.random.Generator): Generator of the diffusion times and noise.

    Raises:
        DataError: If an editing or reconstruction example has no reference.

    Returns:
        The losses of the step (`loss_total`, `loss_ce`, `loss_diff`).
    """
    for ex in batch:
        if ex.task != "t2i" and ex.ref_tokens is None:
            raise DataError(f"The `{ex.task}` example `{ex.prompt}` has no reference image")

    optimizer.zero_grad()
    ids, mask = pad_batch([build_sequence(ex.prompt, ex.ref_tokens, ex.target_tokens) for ex in batch])
    logits, hidden = ar.forward(ids)
    loss_ce = ce_loss(logits, ids, mask)

    h = image_hidden(hidden, ids)
    loss_diff = None
    groups: Dict[ConditioningMode, List[int]] = {}
    for i, ex in enumerate(batch):
        groups.setdefault(task_mode(ex.task, edit_mode), []).append(i)
    for mode, rows in groups.items():
        h_rows = h if len(rows) == len(batch) else index(h, np.array(rows))
        loss = diffusion_loss(dit, h_rows, [batch[i] for i in rows], mode, rng)
        weighted = mul(loss, len(rows) / len(batch))
        loss_diff = weighted if loss_diff is None else add(loss_diff, weighted)

    loss_total = add(loss_ce, mul(loss_diff, lambda_))
    backward(loss_total)
    optimizer.step()
    return {"loss_total": loss_total.item(), "loss_ce": loss_ce.item(), "loss_diff": loss_diff.item()}


def build_models(config: TrainConfig, bundle: Bundle, seed: int) -> Tuple[ARModel, DiTModel]:
    """Initialize the two models matching the configuration and the codecs."""
    rng = np.random.default_rng(seed)
    ar = ARModel(
        ARConfig(
            d_model=config.ar.d_model,
            layers=config.ar.layers,
            heads=config.ar.heads,
            codebook_size=bundle.codebook.size,
        ),
        rng,
    )
    dit = DiTModel(
        DiTConfig(
            latent_channels=bundle.vae.config.latent_channels,
            d_model=config.dit.d_model,
            layers=config.dit.layers,
            heads=config.dit.heads,
            cond_dim=config.ar.d_model,
        ),
        rng,
    )
    return ar, dit


def check_tasks(examples: List[Example], mix: Dict[str, float]):
    """Make sure every task with a nonzero ratio has data.

    Raises:
        DataError: If a task is missing.
    """
    available = {ex.task for ex in examples}
    missing = [t for t in TASKS if mix.get(t, 0) > 0 and t not in available]
    if missing:
        raise DataError(f"The dataset has no example for the tasks {missing} of the mix {mix}")


def restore_rng(rng: np.random.Generator, state: Dict):
    """Set the state of a generator to a state saved in a checkpoint.

    Raises:
        CorruptManifestError: If the state doesn't belong to the same kind of
            bit generator.
    """
    expected = rng.bit_generator.state["bit_generator"]
    if not isinstance(state, dict) or state.get("bit_generator") != expected:
        raise CorruptManifestError(f"The saved random state isn't a `{expected}` state : {state}")
    try:
        rng.bit_generator.state = state
    except (TypeError, ValueError, KeyError) as e:
        raise CorruptManifestError(f"The saved random state can't be restored : {e}") from e


def train_loop(
    config: TrainConfig,
    bundle: Bundle,
    examples: List[Example],
    stage: str,
    out_dir: Optional[Path] = None,
    rng_state: Optional[Dict] = None,
) -> Tuple[Path, List[Dict]]:
    """Jointly train the models of a bundle.

    Each step draws a task from the mix (seeded categorical draw), then a
    batch of examples of that task. Checkpoints are written every
    `config.checkpoint_every` steps and at the end.

    Args:
        config (TrainConfig): Configuration.
        bundle (Bundle): Codecs and initial models (modified in place).
        examples (List[Example]): Encoded examples.
        stage (str): Name of the stage (stored in the checkpoint metadata).
        out_dir (Optional[Path], optional): Output folder (defaults to
            `config.out_dir`).
        rng_state (Optional[Dict], optional): State of the run generator to
            continue from (as saved in the checkpoints), instead of seeding a
            new one from `config.seed`.

    Raises:
        DataError: If a task of the mix has no example.
        CorruptManifestError: If `rng_state` is not a state of the run
            generator.

    Returns:
        Path of the final checkpoint.
        The losses of each step.
    """
    out = Path(out_dir or config.out_dir)
    check_tasks(examples, config.mix)
    by_task = {t: [ex for ex in examples if ex.task == t] for t in TASKS}
    tasks = [t for t in TASKS if config.mix.get(t, 0) > 0]
    probs = np.array([config.mix[t] for t in tasks])

    rng = np.random.default_rng(derive_seed(config.seed, 1))
    if rng_state is not None:
        restore_rng(rng, rng_state)
    params = {**bundle.ar.parameters("ar."), **bundle.dit.parameters("dit.")}
    optimizer = Adam(params, lr=config.lr, max_grad_norm=config.max_grad_norm)
    snapshot = dump_config(config)

    history = []
    pbar = tqdm(range(config.steps), desc=stage, disable=config.steps == 0)
    for step in pbar:
        task = tasks[int(rng.choice(len(tasks), p=probs / probs.sum()))]
        pool = by_task[task]
        picks = rng.choice(len(pool), size=config.batch_size, replace=len(pool) < config.batch_size)
        batch = [pool[i] for i in picks]
        losses = joint_step(bundle.ar, bundle.dit, optimizer, batch, config.lambda_, config.edit_mode, rng)

        history.append({"step": step, "task": task, **losses})
        pbar.set_postfix(task=task, loss=f"{losses['loss_total']:.4f}")
        if step % LOG_EVERY == 0 or step == config.steps - 1:
            logger.info(
                f"step={step} task={task} loss_total={losses['loss_total']:.6f} "
                f"loss_ce={losses['loss_ce']:.6f} loss_diff={losses['loss_diff']:.6f}"
            )
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 and step + 1 < config.steps:
            path = out / "checkpoints" / f"step_{step + 1:06d}"
            save_bundle(bundle, path, snapshot, rng.bit_generator.state, stage=stage, step=step + 1)

    for task in tasks:
        rows = [h for h in history if h["task"] == task]
        if rows:
            logger.info(f"stage={stage} task={task} steps={len(rows)} final_loss_ce={rows[-1]['loss_ce']:.6f}")

    write_csv(history, out / LOSSES_FILE, LOSS_COLUMNS)
    path = save_bundle(bundle, out / CHECKPOINT_DIR, snapshot, rng.bit_generator.state, stage=stage, step=config.steps)
    return path, history


def _load_examples(data_dir: str, codec: Codec, curate: Optional[int] = None, seed: int = 0) -> List[Example]:
    records = load_dataset(data_dir)
    if curate is not None:
        records = curate_dataset(records, curate, seed)
        logger.info(f"curated={len(records)}")
    return prepare_examples(records, data_dir, codec)


def pretrain(config: TrainConfig) -> Path:
    """Multitask pretraining of fresh models on top of trained codecs.

    Args:
        config (TrainConfig): Configuration (`codec_ckpt` points to the output
            of `train-codec`).

    Raises:
        DataError: If the dataset misses a task of the mix.
        CheckpointError: If the codec checkpoint is invalid.

    Returns:
        Path of the final checkpoint.
    """
    bundle = load_bundle(config.codec_ckpt)
    examples = _load_examples(config.data_dir, bundle.codec)
    check_tasks(examples, config.mix)
    bundle.ar, bundle.dit = build_models(config, bundle, derive_seed(config.seed, 0))
    path, _ = train_loop(config, bundle, examples, "pretrain")
    return path


def check_sizes(config: TrainConfig, bundle: Bundle):
    """Make sure the models of a checkpoint match the sizes of a configuration.

    Raises:
        ShapeMismatchError: If a size differs.
    """
    if bundle.ar is None or bundle.dit is None:
        raise ShapeMismatchError("The checkpoint to resume from doesn't contain both models")
    for name, sizes, model in (("ar", config.ar, bundle.ar), ("dit", config.dit, bundle.dit)):
        actual = {"d_model": model.config.d_model, "layers": model.config.layers, "heads": model.config.heads}
        if actual != sizes.model_dump():
            raise ShapeMismatchError(
                f"The `{name}` model of the checkpoint has sizes {actual}, the configuration {sizes.model_dump()}"
            )


def sft(config: TrainConfig, resume: str) -> Path:
    """Fine-tuning of a pretrained checkpoint, on an optionally curated
    dataset. Same mechanics as `pretrain`, but the random stream (task and
    batch draws, diffusion noise) continues from the state saved in the
    checkpoint, when there is one.

    Args:
        config (TrainConfig): Configuration.
        resume (str): Checkpoint to resume from.

    Raises:
        ShapeMismatchError: If the checkpoint doesn't match the model sizes of
            the configuration.
        CorruptManifestError: If the saved random state can't be restored.

    Returns:
        Path of the final checkpoint.
    """
    bundle = load_bundle(resume)
    check_sizes(config, bundle)
    examples = _load_examples(config.data_dir, bundle.codec, config.curate, config.seed)
    # The random stream continues where the resumed run stopped
    rng_state = checkpoint_metadata(resume)["rng_state"]
    path, _ = train_loop(config, bundle, examples, "sft", rng_state=rng_state)
    return path


def train_codecs(config: CodecConfig) -> Path:
    """Fit the k-means codebook and the VAE on the images of a dataset.

    Args:
        config (CodecConfig): Configuration.

    Raises:
        DataError: If the dataset is missing or has too few distinct patches.

    Returns:
        Path of the codec checkpoint.
    """
    records = load_dataset(config.data_dir)
    images = []
    for r in records:
        target, ref = load_images(config.data_dir, r)
        images.append(target)
        if ref is not None and r.ref_image != r.image:
            images.append(ref)
    images = load_image_array(images)

    codebook = train_codebook(
        images, derive_seed(config.seed, 0), size=config.codebook_size, iters=config.kmeans_iters
    )
    logger.info(
        f"codebook_size={codebook.size} quantization_error={quantization_error(images, codebook):.6f} "
        f"utilization={codebook_utilization(images, codebook):.3f}"
    )
    vae, history = train_vae(
        images,
        VAEConfig(config.hidden_channels, config.latent_channels),
        derive_seed(config.seed, 1),
        config.vae_steps,
        lr=config.vae_lr,
        batch_size=config.batch_size,
    )
    out = Path(config.out_dir)
    write_csv(history, out / LOSSES_FILE, ("step", "loss"))
    return save_bundle(Bundle(codebook, vae), out / CHECKPOINT_DIR, dump_config(config), stage="train-codec")
