"""Module containing the JSON configurations of every command. Each command
reads a JSON file (optional), lets the command line flags override it, fills
the defaults, rejects unknown keys, and echoes the effective configuration in
`out_dir/config.resolved.json`.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from arflow.errors import ConfigError
from arflow.utils import write_json


CATEGORIES = ("single", "two-object", "counting", "colors", "position", "color-attribution", "text")
COMPOSITION_CATEGORIES = CATEGORIES[:6]
TASKS = ("t2i", "recon", "edit")
CONDITIONING_MODES = ("none", "cross_attn", "noise_concat", "both")
STAGES = ("gen-data", "train-codec", "pretrain", "sft", "rl", "eval")
RESOLVED_CONFIG = "config.resolved.json"

ConditioningName = Literal["none", "cross_attn", "noise_concat", "both"]


def _check_mix(mix: Dict[str, float], allowed, normalize: bool) -> Dict[str, float]:
    unknown = set(mix) - set(allowed)
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}, accepted keys are {list(allowed)}")
    if any(v < 0 for v in mix.values()):
        raise ValueError("ratios should be nonnegative")
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("ratios should not all be zero")
    if normalize:
        return {k: v / total for k, v in mix.items()}
    if abs(total - 1) > 1e-6:
        raise ValueError(f"ratios should sum to 1 (got {total})")
    return mix


class RunConfig(BaseModel):
    """Options shared by every command."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    seed: int = Field(0, description="Seed of every random draw of the run")
    out_dir: str = Field("runs/default", description="Folder where every artifact of the run is written")
    threads: int = Field(1, ge=1, description="Maximum number of threads for rollouts and evaluation")


class GenDataConfig(RunConfig):
    """Configuration of `gen-data`."""

    t2i: int = Field(1000, ge=0, description="Number of text-to-image records")
    recon: int = Field(0, ge=0, description="Number of reconstruction records")
    edit: int = Field(0, ge=0, description="Number of editing records")
    mix: Dict[str, float] = Field(
        default_factory=lambda: {c: 1.0 for c in CATEGORIES},
        description="Relative frequency of each prompt category in the text-to-image records",
    )
    dedup: bool = Field(True, description="Resample scenes already present in the dataset")

    @field_validator("mix")
    @classmethod
    def valid_mix(cls, v):
        return _check_mix(v, CATEGORIES, normalize=True)


class CodecConfig(RunConfig):
    """Configuration of `train-codec`."""

    data_dir: str = Field("runs/default/data", description="Dataset written by `gen-data`")
    codebook_size: int = Field(256, ge=2, description="Number of codes K")
    kmeans_iters: int = Field(25, ge=1)
    hidden_channels: int = Field(32, ge=1, description="Width of the hidden layer of the VAE")
    latent_channels: int = Field(4, ge=1)
    vae_steps: int = Field(2000, ge=0)
    vae_lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(64, ge=1)


class ModelSizes(BaseModel):
    """Shape of a transformer."""

    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(128, ge=1)
    layers: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)

    @model_validator(mode="after")
    def heads_divide_width(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model ({self.d_model}) should be divisible by heads ({self.heads})")
        return self


class TrainConfig(RunConfig):
    """Configuration of `pretrain` and `sft`."""

    data_dir: str = Field("runs/default/data", description="Dataset written by `gen-data`")
    codec_ckpt: str = Field("runs/default/codec/checkpoint", description="Checkpoint written by `train-codec`")
    lambda_: float = Field(1.0, ge=0, alias="lambda", description="Weight of the diffusion loss")
    lr: float = Field(3e-4, gt=0)
    batch_size: int = Field(8, ge=1)
    steps: int = Field(1000, ge=0)
    mix: Dict[str, float] = Field(default_factory=lambda: {"t2i": 1.0, "recon": 0.0, "edit": 0.0})
    edit_mode: ConditioningName = Field("both", description="Conditioning of the reconstruction and editing tasks")
    checkpoint_every: int = Field(0, ge=0, description="Save a checkpoint every N steps (0 : only at the end)")
    max_grad_norm: Optional[float] = Field(1.0, gt=0)
    ar: ModelSizes = Field(default_factory=ModelSizes)
    dit: ModelSizes = Field(default_factory=ModelSizes)
    curate: Optional[int] = Field(None, ge=1, description="For `sft` : size of the curated subset to train on")

    @field_validator("mix")
    @classmethod
    def valid_mix(cls, v):
        return _check_mix(v, TASKS, normalize=False)


class GRPOConfig(RunConfig):
    """Configuration of `rl`."""

    group_size: int = Field(8, ge=2, description="Number of trajectories G per prompt")
    clip_eps: float = Field(0.2, gt=0, lt=1)
    beta: float = Field(0.01, ge=0, description="Weight of the KL penalty")
    temperature: float = Field(1.0, gt=0)
    lr: float = Field(1e-5, gt=0)
    iterations: int = Field(200, ge=0)
    prompts_per_iter: int = Field(16, ge=1)
    reward: Literal["composition", "glyph"] = "composition"
    binary: bool = Field(False, description="Reward 1 only when every constraint holds")
    sequence_ratio: bool = Field(False, description="Use the sequence-level ratio instead of the per-token one")
    flow_grpo: bool = Field(False, description="Optimize the diffusion model with SDE trajectories instead")
    mix: Optional[Dict[str, float]] = Field(None, description="Prompt categories (defaults depend on the reward)")
    ode_steps: int = Field(20, ge=1)
    sde_steps: int = Field(10, ge=2)
    sigma_a: float = Field(0.3, ge=0)
    warmup_steps: int = Field(1, ge=0)
    max_grad_norm: Optional[float] = Field(1.0, gt=0)
    dump: Optional[str] = Field(None, description="Folder where the decoded rollouts are written as PPM")

    @field_validator("mix")
    @classmethod
    def valid_mix(cls, v):
        return None if v is None else _check_mix(v, CATEGORIES, normalize=True)

    def categories(self) -> Dict[str, float]:
        """Prompt categories sampled during training."""
        if self.mix is not None:
            return self.mix
        if self.reward == "glyph":
            return {"text": 1.0}
        return {c: 1 / len(COMPOSITION_CATEGORIES) for c in COMPOSITION_CATEGORIES}


class EvalConfig(RunConfig):
    """Configuration of `eval`."""

    suite: Literal["composition", "editing", "glyphs"] = "composition"
    n: int = Field(10, ge=1, description="Number of prompts per category (or of cases)")
    mode: ConditioningName = "both"
    ode_steps: int = Field(20, ge=1)
    out: Optional[str] = Field(None, description="Path of the report (defaults to `out_dir/report.json`)")


class PipelineConfig(RunConfig):
    """Configuration of `pipeline`. Each stage section holds the options of the
    corresponding command, except `seed`, `out_dir`, `threads` and the paths
    between stages, which the pipeline fills.
    """

    stages: List[str] = Field(default_factory=lambda: list(STAGES))
    gen_data: Dict[str, Any] = Field(default_factory=dict)
    codec: Dict[str, Any] = Field(default_factory=dict)
    pretrain: Dict[str, Any] = Field(default_factory=dict)
    sft: Dict[str, Any] = Field(default_factory=dict)
    rl: Dict[str, Any] = Field(default_factory=dict)
    eval: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("stages")
    @classmethod
    def known_stages(cls, v):
        unknown = [s for s in v if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}, accepted stages are {list(STAGES)}")
        return [s for s in STAGES if s in v]


C = TypeVar("C", bound=RunConfig)


def load_config(cls: Type[C], path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> C:
    """Build a configuration from a JSON file and command line overrides.

    Args:
        cls (Type[C]): Configuration class.
        path (Optional[str], optional): JSON file to read.
        overrides (Optional[Dict[str, Any]], optional): Values taking
            precedence over the file. `None` values are ignored.

    Raises:
        ConfigError: If the file can't be read or the values are invalid.

    Returns:
        The validated configuration.
    """
    data = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Can't read the configuration file {path} : {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"The configuration file {path} should contain a JSON object")

    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(cls, data)


def validate_config(cls: Type[C], data: Dict[str, Any]) -> C:
    """Validate a configuration dictionary.

    Raises:
        ConfigError: If a key is unknown or a value is invalid.
    """
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid {cls.__name__} : {problems}") from e


def dump_config(config: RunConfig) -> Dict[str, Any]:
    """Plain JSON representation of a configuration, loadable back."""
    return config.model_dump(mode="json", by_alias=True)


def write_resolved(config: RunConfig) -> Path:
    """Echo the effective configuration into `out_dir/config.resolved.json`."""
    path = Path(config.out_dir) / RESOLVED_CONFIG
    write_json(dump_config(config), path)
    return path
