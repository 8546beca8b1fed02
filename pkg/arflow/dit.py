"""Module containing the flow-matching diffusion transformer (DiT) over the VAE
latents, its conditioning schemes, its training loss, and its samplers.

Time convention : `t = 0` is pure noise and `t = 1` is data, with the linear
path `x_t = (1 - t) x0 + t x1` and the velocity `v = x1 - x0`.

Editing conditioning :

* cross-attention : the reference latent, flattened and projected per token,
  is appended to the AR hidden states in the cross-attention context.
* noise concatenation : the reference latent is stacked above the noise
  along the height (16x8 grid), kept fixed during sampling, and the loss only
  covers the noise rows.
"""

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from arflow.errors import DataError, SDEGridError
from arflow.nn import MLP, Attention, Linear, Module, RMSNorm, normal_init, timestep_embedding
from arflow.tensor import (
    Tensor,
    add,
    concat,
    index,
    mean_squared_error,
    mul,
    no_grad,
    reshape,
    silu,
    sub,
    sum_,
)


LATENT_GRID = 8
DEFAULT_SIGMA_A = 0.3
LOG_2PI = math.log(2 * math.pi)

Seeds = Union[int, Sequence[int]]


class ConditioningMode(Enum):
    NONE = "none"
    CROSS_ATTN = "cross_attn"
    NOISE_CONCAT = "noise_concat"
    BOTH = "both"

    @property
    def uses_tokens(self) -> bool:
        """Whether the reference latent is part of the cross-attention context."""
        return self in (ConditioningMode.CROSS_ATTN, ConditioningMode.BOTH)

    @property
    def uses_concat(self) -> bool:
        """Whether the reference latent is stacked above the noise."""
        return self in (ConditioningMode.NOISE_CONCAT, ConditioningMode.BOTH)


@dataclass(frozen=True)
class DiTConfig:
    """Shape of the diffusion transformer.

    Args:
        latent_channels (int, optional): Channels of the latent grid.
        d_model (int, optional): Width of the model.
        layers (int, optional): Number of transformer blocks.
        heads (int, optional): Number of attention heads.
        ffn_mult (int, optional): Expansion factor of the feed-forward layers.
        cond_dim (int, optional): Width of the AR hidden states.
    """

    latent_channels: int = 4
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    cond_dim: int = 128

    def __post_init__(self):
        assert self.d_model % self.heads == 0, f"d_model ({self.d_model}) should be divisible by heads ({self.heads})"

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ConditionSet:
    """Conditioning of one batch of latents.

    Args:
        tokens (Tensor): Cross-attention context of shape (B, 64, d) or
            (B, 128, d) : the projected AR hidden states, then the projected
            reference latent tokens when the mode uses them.
        mode (ConditioningMode): Conditioning mode.
        ref_latent (Optional[np.ndarray], optional): Reference latent of shape
            (B, 8, 8, C), stacked above the noise when the mode uses it.
    """

    tokens: Tensor
    mode: ConditioningMode
    ref_latent: Optional[np.ndarray] = None

    @property
    def context_length(self) -> int:
        return self.tokens.shape[1]

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]


class DiTBlock(Module):
    """Pre-norm block : self-attention, cross-attention, feed-forward."""

    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        self.norm1 = RMSNorm(config.d_model)
        self.attn = Attention(config.d_model, config.heads, rng)
        self.norm2 = RMSNorm(config.d_model)
        self.cross = Attention(config.d_model, config.heads, rng)
        self.norm3 = RMSNorm(config.d_model)
        self.mlp = MLP(config.d_model, config.ffn_mult, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.cross(self.norm2(x), context=context)
        return x + self.mlp(self.norm3(x))


class DiTModel(Module):
    """Diffusion transformer predicting the velocity of the latents.

    The first 64 learned positions are used by the reference rows of a
    composite input, the last 64 by the noise rows (so the noise always sees
    the same positions, with or without a reference).

    Args:
        config (DiTConfig): Shape of the model.
        rng (np.random.Generator): Generator used for the initialization.
    """

    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        self.config = config
        d, c = config.d_model, config.latent_channels
        n = LATENT_GRID * LATENT_GRID
        self.in_proj = Linear(c, d, rng)
        self.pos = normal_init(rng, (2 * n, d), 0.02)
        self.time1 = Linear(d, d, rng)
        self.time2 = Linear(d, d, rng)
        self.cond_proj = Linear(config.cond_dim, d, rng)
        self.edit_proj = Linear(c, d, rng)
        self.edit_pos = normal_init(rng, (n, d), 0.02)
        self.blocks = [DiTBlock(config, rng) for _ in range(config.layers)]
        self.norm = RMSNorm(d)
        self.out_proj = Linear(d, c, rng, init_scale=0.1)

    def velocity(self, x, t: np.ndarray, cond: ConditionSet) -> Tensor:
        """Predict the velocity of a batch of latents.

        Args:
            x (Tensor or np.ndarray): Latents of shape (B, 8, 8, C), or
                composites of shape (B, 16, 8, C).
            t (np.ndarray): Times of shape (B,).
            cond (ConditionSet): Conditioning.

        Returns:
            Velocity, same shape as `x`.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        b, h, w, c = x.shape
        n = h * w
        pos = self.pos if h == 2 * LATENT_GRID else index(self.pos, slice(self.pos.shape[0] - n, None))

        tokens = add(self.in_proj(reshape(x, (b, n, c))), pos)
        temb = Tensor(timestep_embedding(np.asarray(t).reshape(-1), self.config.d_model))
        temb = self.time2(silu(self.time1(temb)))
        tokens = add(tokens, reshape(temb, (b, 1, self.config.d_model)))

        context = cond.tokens
        base = LATENT_GRID * LATENT_GRID
        if context.shape[1] > base:
            hidden = index(context, (slice(None), slice(0, base)))
            edit = index(context, (slice(None), slice(base, None)))
            context = concat([hidden, add(edit, self.edit_pos)], axis=1)

        for block in self.blocks:
            tokens = block(tokens, context)
        return reshape(self.out_proj(self.norm(tokens)), (b, h, w, c))


def build_condition(
    model: DiTModel, hidden, ref_latent: Optional[np.ndarray], mode: Union[ConditioningMode, str]
) -> ConditionSet:
    """Project the conditioning inputs of the diffusion model.

    Args:
        model (DiTModel): Diffusion model (owner of the projections).
        hidden (Tensor or np.ndarray): AR hidden states at the 64 image token
            positions, shape (B, 64, 128).
        ref_latent (Optional[np.ndarray]): Reference latent (B, 8, 8, C),
            required by every mode except `none`.
        mode (Union[ConditioningMode, str]): Conditioning mode.

    Raises:
        DataError: If the mode requires a reference latent and none is given.

    Returns:
        The conditioning.
    """
    mode = ConditioningMode(mode)
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if hidden.ndim != 3 or hidden.shape[1] != LATENT_GRID * LATENT_GRID:
        raise DataError(f"Expected 64 hidden states per sample, got shape {hidden.shape}")
    if mode != ConditioningMode.NONE and ref_latent is None:
        raise DataError(f"The conditioning mode `{mode.value}` requires a reference latent")

    tokens = model.cond_proj(hidden)
    if mode.uses_tokens:
        b, gh, gw, c = ref_latent.shape
        # Per-token projection : the position is added inside the model
        edit = model.edit_proj(Tensor(np.asarray(ref_latent).reshape(b, gh * gw, c)))
        tokens = concat([tokens, edit], axis=1)
    return ConditionSet(tokens, mode, None if ref_latent is None else np.asarray(ref_latent, dtype=np.float32))


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Point of the linear path between noise `x0` (t=0) and data `x1` (t=1).

    Args:
        x0 (np.ndarray): Noise.
        x1 (np.ndarray): Data, same shape as `x0`.
        t (float or np.ndarray): Time(s), one per row of the batch.

    Raises:
        ValueError: If the shapes differ.

    Returns:
        `(1 - t) x0 + t x1`.
    """
    if x0.shape != x1.shape:
        raise ValueError(f"interpolate: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=x0.dtype)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1 - t) * x0 + t * x1


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Velocity of the linear path, `x1 - x0`."""
    if x0.shape != x1.shape:
        raise ValueError(f"velocity_target: shapes {x0.shape} and {x1.shape} differ")
    return x1 - x0


def composite(ref_latent: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stack the reference latent above the noise along the height."""
    return np.concatenate([ref_latent, x], axis=1)


def split_composite(x: np.ndarray):
    """Split a composite back into (reference rows, noise rows)."""
    return x[:, :LATENT_GRID], x[:, LATENT_GRID:]


def noise_region_mask(batch_size: int) -> np.ndarray:
    """Boolean mask of shape (B, 16, 8, 1) selecting the 8 noise rows."""
    mask = np.zeros((batch_size, 2 * LATENT_GRID, LATENT_GRID, 1), dtype=bool)
    mask[:, LATENT_GRID:] = True
    return mask


def flow_loss(
    model,
    x1: np.ndarray,
    cond: ConditionSet,
    t: np.ndarray,
    x0: np.ndarray,
    region_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Rectified-flow loss : mean squared error between the predicted velocity
    and `x1 - x0`, over the region mask.

    With a mode stacking the reference above the noise, `x1` and `x0` are
    composites (B, 16, 8, C) : the reference rows of the model input are
    overwritten by the reference latent, and `region_mask` must select the
    noise rows (so the reference rows never contribute).

    Args:
        model: Object with a `velocity(x, t, cond)` method.
        x1 (np.ndarray): Data latents.
        cond (ConditionSet): Conditioning.
        t (np.ndarray): Times of shape (B,).
        x0 (np.ndarray): Noise, same shape as `x1`.
        region_mask (Optional[np.ndarray], optional): Mask broadcastable to
            the latents.

    Raises:
        DataError: If the mode requires a region mask and none is given.

    Returns:
        Scalar tensor.
    """
    xt = interpolate(x0, x1, t)
    if cond.mode.uses_concat:
        if region_mask is None:
            raise DataError(f"The conditioning mode `{cond.mode.value}` requires a region mask")
        xt = composite(cond.ref_latent, split_composite(xt)[1])
    pred = model.velocity(xt, t, cond)
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    return mean_squared_error(pred, velocity_target(x0, x1), region_mask)


def time_grid(steps: int) -> np.ndarray:
    """Uniform integration grid from 0 (noise) to 1 (data)."""
    assert steps >= 1, f"At least one integration step is required (got {steps})"
    return np.linspace(0.0, 1.0, steps + 1)


def sigma_schedule(t: float, a: float = DEFAULT_SIGMA_A) -> float:
    """Magnitude of the noise injected by the SDE sampler at time `t`.

    `a * sqrt((1 - t) / t)` clipped to [0, 1] : large near the noise end,
    vanishing at the data end.
    """
    if t <= 0:
        raise SDEGridError("The noise schedule is singular at t=0")
    return float(min(a * math.sqrt((1 - t) / t), 1.0))


def _draw(seeds: Seeds, batch_size: int, shape) -> np.ndarray:
    if isinstance(seeds, (int, np.integer)):
        return np.random.default_rng(seeds).standard_normal((batch_size,) + tuple(shape)).astype(np.float32)
    assert len(seeds) == batch_size, f"Expected {batch_size} seeds, got {len(seeds)}"
    return np.stack([np.random.default_rng(s).standard_normal(tuple(shape)) for s in seeds]).astype(np.float32)


def _velocity(model, x: np.ndarray, t: float, cond: ConditionSet) -> np.ndarray:
    with no_grad():
        v = model.velocity(x, np.full(x.shape[0], t), cond)
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def _initial_state(cond: ConditionSet, seed: Seeds, x0: Optional[np.ndarray], channels: int) -> np.ndarray:
    if x0 is None:
        x0 = _draw(seed, cond.batch_size, (LATENT_GRID, LATENT_GRID, channels))
    if cond.mode.uses_concat:
        x0 = composite(cond.ref_latent, x0)
    return x0


def euler_sample(
    model,
    cond: ConditionSet,
    steps: int,
    seed: Seeds,
    x0: Optional[np.ndarray] = None,
    channels: int = 4,
) -> np.ndarray:
    """Integrate the flow ODE with the Euler method, from seeded Gaussian
    noise at t=0 to t=1.

    With a mode stacking the reference above the noise, the reference rows
    are held fixed at every step and only the noise rows integrate.

    Args:
        model: Object with a `velocity(x, t, cond)` method.
        cond (ConditionSet): Conditioning.
        steps (int): Number of integration steps (>= 1).
        seed (Seeds): Seed of the initial noise, or one seed per row.
        x0 (Optional[np.ndarray], optional): Initial noise (B, 8, 8, C),
            overriding the seed.
        channels (int, optional): Channels of the latents.

    Returns:
        Latents of shape (B, 8, 8, C).
    """
    grid = time_grid(steps)
    x = _initial_state(cond, seed, x0, channels)
    for i in range(steps):
        dt = grid[i + 1] - grid[i]
        x = x + _velocity(model, x, grid[i], cond) * dt
        if cond.mode.uses_concat:
            x[:, :LATENT_GRID] = cond.ref_latent
    return split_composite(x)[1] if cond.mode.uses_concat else x


@dataclass
class SDETrajectory:
    """States visited by the SDE sampler.

    Args:
        states (List[np.ndarray]): Model inputs at every time of the grid
            (composites for modes stacking the reference).
        times (np.ndarray): Integration grid.
        sigmas (np.ndarray): Noise magnitude of each transition (0 for the
            deterministic warmup transitions).
        log_probs (np.ndarray): Log-density of each stochastic transition,
            shape (B, n_stochastic).
        stochastic (List[int]): Indices of the stochastic transitions.
        mode (ConditioningMode): Conditioning mode of the run.
    """

    states: List[np.ndarray]
    times: np.ndarray
    sigmas: np.ndarray
    log_probs: np.ndarray
    stochastic: List[int] = field(default_factory=list)
    mode: ConditioningMode = ConditioningMode.NONE

    @property
    def latent(self) -> np.ndarray:
        """Final latents (B, 8, 8, C)."""
        x = self.states[-1]
        return split_composite(x)[1] if self.mode.uses_concat else x


def _drift_coefficient(sigma: float, t: float) -> float:
    # Maps the reverse-time SDE (data at t=0) onto t=0 noise, t=1 data :
    # drift = v + sigma^2 / (2 (1 - t)) * (t v - x), the score being
    # (t v - x) / (1 - t) on the linear path
    return sigma * sigma / (2 * (1 - t))


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, std: float) -> np.ndarray:
    """Log-density of `x` under an isotropic Gaussian, summed per row.

    A zero standard deviation gives a log-density of 0 (deterministic
    transition).
    """
    if std == 0:
        return np.zeros(x.shape[0])
    d = (x.astype(np.float64) - mean.astype(np.float64)).reshape(x.shape[0], -1)
    return -(d * d).sum(axis=1) / (2 * std * std) - d.shape[1] * (math.log(std) + 0.5 * LOG_2PI)


def sde_sample(
    model,
    cond: ConditionSet,
    steps: int,
    seed: Seeds,
    sigma_a: float = DEFAULT_SIGMA_A,
    warmup_steps: int = 1,
    x0: Optional[np.ndarray] = None,
    channels: int = 4,
    sigma_fn: Optional[Callable[[float], float]] = None,
) -> SDETrajectory:
    """Integrate the flow SDE with the Euler-Maruyama method.

    The first `warmup_steps` transitions are deterministic Euler steps, the
    others are Gaussian transitions of mean `x + drift * dt` and standard
    deviation `sigma_t * sqrt(dt)`, whose log-density is recorded.

    Args:
        model: Object with a `velocity(x, t, cond)` method.
        cond (ConditionSet): Conditioning.
        steps (int): Number of transitions (>= 1).
        seed (Seeds): Seed of the transition noise, or one seed per row.
        sigma_a (float, optional): Scale `a` of the noise schedule.
        warmup_steps (int, optional): Number of initial deterministic steps.
        x0 (Optional[np.ndarray], optional): Initial noise (B, 8, 8, C). If
            not given, it is drawn from `seed` too.
        channels (int, optional): Channels of the latents.
        sigma_fn (Optional[Callable[[float], float]], optional): Custom noise
            schedule, overriding `sigma_a`.

    Raises:
        SDEGridError: If a stochastic transition starts at t=0.

    Returns:
        The trajectory.
    """
    grid = time_grid(steps)
    stochastic = list(range(warmup_steps, steps))
    if stochastic and grid[stochastic[0]] <= 0:
        raise SDEGridError("The stochastic integration grid contains t=0, where the drift is singular")
    sigma_fn = sigma_fn or (lambda t: sigma_schedule(t, sigma_a))

    rngs = (
        [np.random.default_rng(seed)]
        if isinstance(seed, (int, np.integer))
        else [np.random.default_rng(s) for s in seed]
    )

    def noise(shape) -> np.ndarray:
        if len(rngs) == 1:
            return rngs[0].standard_normal(shape).astype(np.float32)
        return np.stack([r.standard_normal(shape[1:]) for r in rngs]).astype(np.float32)

    x = _initial_state(cond, seed, x0, channels) if x0 is not None else None
    if x is None:
        x = noise((cond.batch_size, LATENT_GRID, LATENT_GRID, channels))
        if cond.mode.uses_concat:
            x = composite(cond.ref_latent, x)

    states, sigmas, log_probs = [x], [], []
    for i in range(steps):
        t, dt = grid[i], grid[i + 1] - grid[i]
        v = _velocity(model, x, t, cond)
        if i < warmup_steps:
            sigmas.append(0.0)
            x = x + v * dt
        else:
            sigma = sigma_fn(t)
            sigmas.append(sigma)
            drift = v + _drift_coefficient(sigma, t) * (t * v - x)
            mean = x + drift * dt
            std = sigma * math.sqrt(dt)
            x = mean + std * noise(mean.shape)
            if cond.mode.uses_concat:
                log_probs.append(gaussian_logpdf(split_composite(x)[1], split_composite(mean)[1], std))
            else:
                log_probs.append(gaussian_logpdf(x, mean, std))
        if cond.mode.uses_concat:
            x[:, :LATENT_GRID] = cond.ref_latent
        states.append(x)

    lp = np.stack(log_probs, axis=1) if log_probs else np.zeros((cond.batch_size, 0))
    return SDETrajectory(states, grid, np.array(sigmas), lp, stochastic, cond.mode)


def _transition_mean(model: DiTModel, traj: SDETrajectory, i: int, cond: ConditionSet) -> Tensor:
    # Mean of the Gaussian transition i, restricted to the noise rows
    t, dt, sigma = traj.times[i], traj.times[i + 1] - traj.times[i], traj.sigmas[i]
    x = traj.states[i]
    v = model.velocity(x, np.full(x.shape[0], t), cond)
    drift = add(v, mul(sub(mul(v, t), Tensor(x)), _drift_coefficient(sigma, t)))
    mean = add(Tensor(x), mul(drift, dt))
    if cond.mode.uses_concat:
        mean = index(mean, (slice(None), slice(LATENT_GRID, None)))
    return mean


def _noise_rows(x: np.ndarray, mode: ConditioningMode) -> np.ndarray:
    return split_composite(x)[1] if mode.uses_concat else x


def _row_sum(x: Tensor) -> Tensor:
    b = x.shape[0]
    return sum_(reshape(x, (b, int(np.prod(x.shape[1:])))), axis=1, keepdims=True)


def transition_logprobs(model: DiTModel, traj: SDETrajectory, cond: ConditionSet) -> Tensor:
    """Recompute the log-density of the stochastic transitions of a
    trajectory under the current parameters (differentiable).

    Args:
        model (DiTModel): Diffusion model.
        traj (SDETrajectory): Trajectory recorded by `sde_sample`.
        cond (ConditionSet): Conditioning of the trajectory.

    Returns:
        Log-densities of shape (B, n_stochastic).
    """
    b = traj.states[0].shape[0]
    columns = []
    for i in traj.stochastic:
        std = traj.sigmas[i] * math.sqrt(traj.times[i + 1] - traj.times[i])
        if std == 0:
            columns.append(Tensor(np.zeros((b, 1))))
            continue

        diff = sub(Tensor(_noise_rows(traj.states[i + 1], traj.mode)), _transition_mean(model, traj, i, cond))
        n = int(np.prod(diff.shape[1:]))
        log_norm = -n * (math.log(std) + 0.5 * LOG_2PI)
        columns.append(add(mul(_row_sum(mul(diff, diff)), -1.0 / (2 * std * std)), log_norm))
    if not columns:
        return Tensor(np.zeros((b, 0)))
    return concat(columns, axis=1)


def transition_kl(
    model: DiTModel, ref_model: DiTModel, traj: SDETrajectory, cond: ConditionSet, ref_cond: ConditionSet
) -> Tensor:
    """Exact KL divergence between the transitions of two models along a
    trajectory. Both transitions are Gaussian with the same standard
    deviation, so the divergence is `|mean - ref_mean|^2 / (2 std^2)`.

    Args:
        model (DiTModel): Trained model (differentiable side).
        ref_model (DiTModel): Reference model (constant side).
        traj (SDETrajectory): Trajectory recorded by `sde_sample`.
        cond (ConditionSet): Conditioning built with `model`.
        ref_cond (ConditionSet): Conditioning built with `ref_model`.

    Returns:
        Divergences of shape (B, n_stochastic).
    """
    b = traj.states[0].shape[0]
    columns = []
    for i in traj.stochastic:
        std = traj.sigmas[i] * math.sqrt(traj.times[i + 1] - traj.times[i])
        if std == 0:
            columns.append(Tensor(np.zeros((b, 1))))
            continue

        with no_grad():
            ref_mean = _transition_mean(ref_model, traj, i, ref_cond).data
        diff = sub(_transition_mean(model, traj, i, cond), Tensor(ref_mean))
        columns.append(mul(_row_sum(mul(diff, diff)), 1.0 / (2 * std * std)))
    if not columns:
        return Tensor(np.zeros((b, 0)))
    return concat(columns, axis=1)
