"""`arflow` package, which contains a small autoregressive image generator
(discrete tokens) coupled to a flow-matching decoder (continuous latents),
its synthetic world, its training stages (joint pretraining, fine-tuning,
GRPO and Flow-GRPO), and the benchmarks to evaluate it.
"""

from .checkpoint import Bundle, load_bundle, save_bundle
from .errors import ArflowError
from .evaluation import evaluate, run_suite
from .generator import Generator, PipelineGenerator


__all__ = [
    "ArflowError",
    "Bundle",
    "Generator",
    "PipelineGenerator",
    "evaluate",
    "load_bundle",
    "run_suite",
    "save_bundle",
]
