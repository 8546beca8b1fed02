"""Module containing the reinforcement learning stage : GRPO on the
autoregressive model with the diffusion decoder frozen, and Flow-GRPO on the
diffusion model (through SDE trajectories) with the autoregressive model
frozen. Both use the verifiable rewards of `arflow.rewards`.
"""

import logging
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from arflow.arlm import ARModel, image_logprobs, sample_batch, sample_tokens
from arflow.checkpoint import Bundle, load_bundle, save_bundle
from arflow.codec import Codec
from arflow.config import GRPOConfig, dump_config
from arflow.data import sample_scene
from arflow.dit import (
    LATENT_GRID,
    ConditioningMode,
    DiTModel,
    SDETrajectory,
    build_condition,
    euler_sample,
    sde_sample,
    transition_kl,
    transition_logprobs,
)
from arflow.errors import RatioError
from arflow.grammar import PromptSpec
from arflow.optim import Adam
from arflow.rewards import REWARDS
from arflow.tensor import Tensor, add, backward, exp, gather, mean, mul, no_grad, reset_tape, sub, sum_
from arflow.utils import derive_seed, ordered_map, rng_from, save_ppm, write_csv


logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
REWARDS_FILE = "rewards.csv"
REWARD_COLUMNS = ("iter", "mean_reward", "kl", "clip_fraction")
DEGENERATE_STD = 1e-8


@dataclass
class PolicyHandles:
    """Models involved in a GRPO run.

    Args:
        policy: Trained model (`ARModel` for GRPO, `DiTModel` for Flow-GRPO).
        old: Frozen snapshot of the policy, refreshed every iteration.
        ref: Frozen copy of the policy at the start of the run.
        ar (ARModel): Autoregressive model (the policy, or frozen).
        dit (DiTModel): Diffusion model (the policy, or frozen).
        codec (Codec): Frozen codecs.
    """

    policy: object
    old: object
    ref: object
    ar: ARModel
    dit: DiTModel
    codec: Codec

    @classmethod
    def create(cls, bundle: Bundle, flow: bool = False) -> "PolicyHandles":
        """Set up the handles of a run : the policy is the diffusion model if
        `flow` is `True`, the autoregressive model otherwise. The other model
        is frozen.
        """
        policy, frozen = (bundle.dit, bundle.ar) if flow else (bundle.ar, bundle.dit)
        frozen.freeze()
        policy.unfreeze()
        old, ref = policy.clone(), policy.clone()
        old.freeze()
        ref.freeze()
        return cls(policy, old, ref, bundle.ar, bundle.dit, bundle.codec)

    def refresh(self):
        """Copy the current policy into the old policy."""
        self.old.load_state_dict(self.policy.state_dict())


@dataclass
class RolloutGroup:
    """Group of G trajectories sampled for one prompt.

    Args:
        prompt (PromptSpec): Prompt.
        ids (np.ndarray): Token sequences (GRPO) of shape (G, T).
        loss_mask (np.ndarray): Loss masks of the sequences.
        tokens (np.ndarray): Sampled image tokens, shape (G, 64).
        old_logprobs (np.ndarray): Per-token (GRPO) or per-transition
            (Flow-GRPO) log-probabilities under the old policy.
        images (np.ndarray): Decoded images, shape (G, 32, 32, 3).
        rewards (np.ndarray): Rewards, shape (G,).
        advantages (np.ndarray): Normalized advantages, shape (G,).
        trajectory (Optional[SDETrajectory], optional): SDE trajectories
            (Flow-GRPO).
        hidden (Optional[np.ndarray], optional): AR hidden states conditioning
            the trajectories (Flow-GRPO).
    """

    prompt: PromptSpec
    ids: np.ndarray
    loss_mask: np.ndarray
    tokens: np.ndarray
    old_logprobs: np.ndarray
    images: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    trajectory: Optional[SDETrajectory] = None
    hidden: Optional[np.ndarray] = None

    @property
    def degenerate(self) -> bool:
        return not np.any(self.advantages)


def compute_advantages(rewards) -> np.ndarray:
    """Normalize the rewards of a group : `(r - mean) / std`. A group whose
    rewards are all equal gets zero advantages.

    Args:
        rewards: Rewards of the group.

    Returns:
        Advantages, shape (G,).
    """
    r = np.asarray(rewards, dtype=np.float64)
    std = r.std()
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def _score(prompt: PromptSpec, images: np.ndarray, config: GRPOConfig) -> np.ndarray:
    reward_fn = REWARDS[config.reward]
    return np.array([reward_fn(prompt, img, binary=config.binary) for img in images])


def _dump(images: np.ndarray, dump_dir: Optional[str], name: str):
    if dump_dir is None:
        return
    for i, img in enumerate(images):
        save_ppm(img, Path(dump_dir) / f"{name}_g{i}.ppm")


def rollout(
    prompt: PromptSpec, handles: PolicyHandles, config: GRPOConfig, seed: int, dump_name: Optional[str] = None
) -> RolloutGroup:
    """Sample and score G images for a prompt with the old policy.

    Each trajectory draws its tokens with its own seed (bound to its index),
    the decoder noise is shared by the group so rewards only differ because of
    the tokens.

    Args:
        prompt (PromptSpec): Prompt.
        handles (PolicyHandles): Models of the run.
        config (GRPOConfig): Configuration.
        seed (int): Seed of the group.
        dump_name (Optional[str], optional): Prefix of the dumped images (if
            `config.dump` is set).

    Returns:
        The group, with its rewards and advantages.
    """
    g = config.group_size
    seeds = [derive_seed(seed, i) for i in range(g)]
    samples = sample_batch(handles.old, prompt.text, None, config.temperature, seeds)
    ids = np.stack([s.ids for s in samples])
    mask = np.stack([s.loss_mask for s in samples])

    with no_grad():
        logp, _ = image_logprobs(handles.old, ids, config.temperature)
        tokens = np.stack([s.tokens.reshape(-1) for s in samples])
        old_logprobs = gather(logp, tokens).data.astype(np.float64)

        dit = handles.dit
        c = dit.config.latent_channels
        noise = rng_from(seed, g).standard_normal((1, LATENT_GRID, LATENT_GRID, c)).astype(np.float32)
        cond = build_condition(dit, np.stack([s.hidden for s in samples]), None, ConditioningMode.NONE)
        latents = euler_sample(dit, cond, config.ode_steps, seed, x0=np.repeat(noise, g, axis=0), channels=c)
    images = handles.codec.images(latents)

    rewards = _score(prompt, images, config)
    if dump_name is not None:
        _dump(images, config.dump, dump_name)
    return RolloutGroup(prompt, ids, mask, tokens, old_logprobs, images, rewards, compute_advantages(rewards))


def clipped_surrogate(
    log_ratio: Tensor, advantages: np.ndarray, clip_eps: float, sequence: bool = False
) -> Tuple[Tensor, float, np.ndarray]:
    """Clipped surrogate objective `min(r A, clip(r, 1 - eps, 1 + eps) A)`.

    Args:
        log_ratio (Tensor): Log-ratios of shape (G, n), per token or per
            transition.
        advantages (np.ndarray): Advantages of shape (G,).
        clip_eps (float): Clipping range.
        sequence (bool, optional): Use one ratio per trajectory
            (`exp(sum log_ratio)`) instead of one per element.

    Returns:
        The objective, averaged over the trajectories (and elements).
        The fraction of ratios outside of the clipping range.
        The ratios.
    """
    if sequence:
        log_ratio = sum_(log_ratio, axis=1)
        a = advantages
    else:
        a = np.broadcast_to(advantages[:, None], log_ratio.shape)
    ratio = exp(log_ratio)
    r = ratio.data
    if np.isnan(r).any():
        return ratio, float("nan"), r

    # Where the clipped branch is the minimum, the objective is constant
    clipped = ((a > 0) & (r > 1 + clip_eps)) | ((a < 0) & (r < 1 - clip_eps))
    constant = np.where(clipped, np.clip(r, 1 - clip_eps, 1 + clip_eps) * a, 0.0)
    surrogate = add(mul(ratio, np.where(clipped, 0.0, a)), Tensor(constant))
    clip_fraction = float(np.mean(np.abs(r - 1) > clip_eps))
    return mean(surrogate), clip_fraction, r


def _check_ratios(ratios: np.ndarray, step: int, group: RolloutGroup):
    if np.isnan(ratios).any():
        bad = sorted(set(np.argwhere(np.isnan(ratios))[:, 0].tolist()))
        raise RatioError(f"NaN importance ratio at step={step} prompt=`{group.prompt.text}` trajectories={bad}")


def _categorical_kl(logp: Tensor, ref_logp: np.ndarray) -> Tensor:
    # Exact KL(p || ref) per position, summed over the categories
    return sum_(mul(exp(logp), sub(logp, Tensor(ref_logp))), axis=-1)


def grpo_step(
    groups: List[RolloutGroup], handles: PolicyHandles, optimizer: Adam, config: GRPOConfig, step: int = 0
) -> Dict[str, float]:
    """One GRPO update of the autoregressive policy.

    The objective of each group is the clipped surrogate of the ratios between
    the current and the old policy, minus `beta` times the exact categorical
    KL divergence to the reference policy (averaged over the image positions).
    Degenerate groups (all rewards equal) contribute no surrogate gradient. If
    every group is degenerate, no update is applied.

    Args:
        groups (List[RolloutGroup]): Groups sampled with the old policy.
        handles (PolicyHandles): Models of the run.
        optimizer (Adam): Optimizer over the parameters of the policy.
        config (GRPOConfig): Configuration.
        step (int, optional): Index of the step (for the diagnostics).

    Raises:
        RatioError: If a ratio is NaN.

    Returns:
        Metrics : `objective`, `mean_reward`, `kl`, `clip_fraction`.
    """
    optimizer.zero_grad()
    total, kls, clip_fractions = None, [], []
    for group in groups:
        logp, _ = image_logprobs(handles.policy, group.ids, config.temperature)
        new_logprobs = gather(logp, group.tokens)
        surrogate, clip_fraction, ratios = clipped_surrogate(
            sub(new_logprobs, Tensor(group.old_logprobs)), group.advantages, config.clip_eps, config.sequence_ratio
        )
        _check_ratios(ratios, step, group)

        with no_grad():
            ref_logp, _ = image_logprobs(handles.ref, group.ids, config.temperature)
        kl = mean(_categorical_kl(logp, ref_logp.data))
        objective = sub(surrogate, mul(kl, config.beta))
        total = objective if total is None else add(total, objective)
        kls.append(kl.item())
        clip_fractions.append(clip_fraction)

    objective = mul(total, 1.0 / len(groups))
    if any(not g.degenerate for g in groups):
        backward(mul(objective, -1.0))
        optimizer.step()
    else:
        reset_tape()
    return {
        "objective": objective.item(),
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "kl": float(np.mean(kls)),
        "clip_fraction": float(np.mean(clip_fractions)),
    }


def flow_rollout(
    prompt: PromptSpec, handles: PolicyHandles, config: GRPOConfig, seed: int, dump_name: Optional[str] = None
) -> RolloutGroup:
    """Sample and score G SDE trajectories of the old diffusion policy for a
    prompt. The tokens (greedy) and the initial noise are shared by the
    group, the trajectories only differ by their SDE noise.

    Raises:
        SDEGridError: If the stochastic grid reaches t=0.
    """
    g = config.group_size
    sample = sample_tokens(handles.ar, prompt.text, None, config.temperature, derive_seed(seed, g), greedy=True)
    hidden = np.repeat(sample.hidden[None], g, axis=0)

    old = handles.old
    c = old.config.latent_channels
    noise = rng_from(seed, g + 1).standard_normal((1, LATENT_GRID, LATENT_GRID, c)).astype(np.float32)
    with no_grad():
        cond = build_condition(old, hidden, None, ConditioningMode.NONE)
        traj = sde_sample(
            old,
            cond,
            config.sde_steps,
            [derive_seed(seed, i) for i in range(g)],
            sigma_a=config.sigma_a,
            warmup_steps=config.warmup_steps,
            x0=np.repeat(noise, g, axis=0),
            channels=c,
        )
        old_logprobs = transition_logprobs(old, traj, cond).data.astype(np.float64)
    images = handles.codec.images(traj.latent)

    rewards = _score(prompt, images, config)
    if dump_name is not None:
        _dump(images, config.dump, dump_name)
    tokens = np.repeat(sample.tokens.reshape(1, -1), g, axis=0)
    ids = np.repeat(sample.ids[None], g, axis=0)
    mask = np.repeat(sample.loss_mask[None], g, axis=0)
    return RolloutGroup(
        prompt, ids, mask, tokens, old_logprobs, images, rewards, compute_advantages(rewards), traj, hidden
    )


def flow_grpo_step(
    groups: List[RolloutGroup], handles: PolicyHandles, optimizer: Adam, config: GRPOConfig, step: int = 0
) -> Dict[str, float]:
    """One Flow-GRPO update of the diffusion policy : same objective as
    `grpo_step`, with ratios over the Gaussian transitions of the SDE
    trajectories and the exact Gaussian KL to the reference model.

    Raises:
        RatioError: If a ratio is NaN.

    Returns:
        Metrics : `objective`, `mean_reward`, `kl`, `clip_fraction`.
    """
    optimizer.zero_grad()
    total, kls, clip_fractions = None, [], []
    for group in groups:
        cond = build_condition(handles.policy, group.hidden, None, ConditioningMode.NONE)
        new_logprobs = transition_logprobs(handles.policy, group.trajectory, cond)
        surrogate, clip_fraction, ratios = clipped_surrogate(
            sub(new_logprobs, Tensor(group.old_logprobs)), group.advantages, config.clip_eps, config.sequence_ratio
        )
        _check_ratios(ratios, step, group)

        with no_grad():
            ref_cond = build_condition(handles.ref, group.hidden, None, ConditioningMode.NONE)
        kl = mean(transition_kl(handles.policy, handles.ref, group.trajectory, cond, ref_cond))
        objective = sub(surrogate, mul(kl, config.beta))
        total = objective if total is None else add(total, objective)
        kls.append(kl.item())
        clip_fractions.append(clip_fraction)

    objective = mul(total, 1.0 / len(groups))
    if any(not g.degenerate for g in groups):
        backward(mul(objective, -1.0))
        optimizer.step()
    else:
        reset_tape()
    return {
        "objective": objective.item(),
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "kl": float(np.mean(kls)),
        "clip_fraction": float(np.mean(clip_fractions)),
    }


def sample_prompts(config: GRPOConfig, iteration: int) -> List[PromptSpec]:
    """Draw the prompts of an iteration from the category mix."""
    mix = config.categories()
    names, probs = list(mix), np.array(list(mix.values()))
    prompts = []
    for p in range(config.prompts_per_iter):
        category = names[int(rng_from(config.seed, iteration, p).choice(len(names), p=probs / probs.sum()))]
        _, prompt = sample_scene(derive_seed(config.seed, iteration, p, 1), category)
        prompts.append(prompt)
    return prompts


def run_grpo(config: GRPOConfig, resume: str) -> Tuple[Path, Path]:
    """Run GRPO (or Flow-GRPO if `config.flow_grpo`) from a checkpoint.

    Each iteration refreshes the old policy, draws prompts, samples one group
    per prompt (in parallel with `config.threads`, seeds bound to the prompt
    index), and applies one update.

    Args:
        config (GRPOConfig): Configuration.
        resume (str): Checkpoint to start from.

    Returns:
        Path of the final checkpoint.
        Path of the reward curve (CSV).
    """
    bundle = load_bundle(resume)
    handles = PolicyHandles.create(bundle, flow=config.flow_grpo)
    prefix = "dit." if config.flow_grpo else "ar."
    optimizer = Adam(handles.policy.parameters(prefix), lr=config.lr, max_grad_norm=config.max_grad_norm)
    sample_group, update = (flow_rollout, flow_grpo_step) if config.flow_grpo else (rollout, grpo_step)
    out = Path(config.out_dir)

    rows = []
    for it in range(config.iterations):
        handles.refresh()
        prompts = sample_prompts(config, it)
        jobs = [(p, derive_seed(config.seed, it, i, 2), f"iter{it:04d}_p{i:02d}") for i, p in enumerate(prompts)]
        fn = partial(_run_job, sample_group, handles, config)
        groups = ordered_map(fn, jobs, config.threads, desc=f"rollouts {it}")
        metrics = update(groups, handles, optimizer, config, step=it)

        rows.append({"iter": it, **metrics})
        logger.info(
            f"iter={it} mean_reward={metrics['mean_reward']:.4f} kl={metrics['kl']:.6f} "
            f"clip_fraction={metrics['clip_fraction']:.4f} objective={metrics['objective']:.6f}"
        )

    curve = out / REWARDS_FILE
    write_csv(rows, curve, REWARD_COLUMNS)
    handles.policy.unfreeze()
    path = save_bundle(bundle, out / CHECKPOINT_DIR, dump_config(config), stage="rl", iterations=config.iterations)
    return path, curve


def _run_job(sample_group, handles: PolicyHandles, config: GRPOConfig, job) -> RolloutGroup:
    prompt, seed, name = job
    return sample_group(prompt, handles, config, seed, dump_name=name)
