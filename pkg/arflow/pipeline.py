"""Module containing the full pipeline : gen-data → train-codec → pretrain →
sft → rl → eval, each stage writing into its own folder of the run, with a
completion marker so a rerun resumes after the last completed stage.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

from arflow.config import (
    RESOLVED_CONFIG,
    STAGES,
    CodecConfig,
    EvalConfig,
    GenDataConfig,
    GRPOConfig,
    PipelineConfig,
    TrainConfig,
    validate_config,
    write_resolved,
)
from arflow.data import make_dataset
from arflow.errors import EXIT_CHECKPOINT, EXIT_RUNTIME, ArflowError, PipelineStageError
from arflow.evaluation import evaluate
from arflow.rl import run_grpo
from arflow.trainer import CHECKPOINT_DIR, pretrain, sft, train_codecs
from arflow.utils import config_hash, write_json


logger = logging.getLogger(__name__)

MARKER = ".done"
REPORT_FILE = "report.json"
STAGE_DIRS = {
    "gen-data": "data",
    "train-codec": "codec",
    "pretrain": "pretrain",
    "sft": "sft",
    "rl": "rl",
    "eval": "eval",
}
CHECKPOINT_STAGES = ("rl", "sft", "pretrain")


class Pipeline:
    """Runner of the stages of a `PipelineConfig`.

    Args:
        config (PipelineConfig): Configuration of the run.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.out_dir)
        self.runners: Dict[str, Callable[[], None]] = {
            "gen-data": self.gen_data,
            "train-codec": self.train_codec,
            "pretrain": self.pretrain,
            "sft": self.sft,
            "rl": self.rl,
            "eval": self.eval,
        }

    def stage_dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    def marker(self, stage: str) -> Path:
        return self.stage_dir(stage) / MARKER

    def is_done(self, stage: str) -> bool:
        return self.marker(stage).exists()

    def _common(self, stage: str) -> Dict:
        return {"seed": self.config.seed, "out_dir": str(self.stage_dir(stage)), "threads": self.config.threads}

    def _latest_checkpoint(self, before: str) -> str:
        # Most downstream checkpoint produced before the given stage
        upstream = STAGES[: STAGES.index(before)]
        for stage in CHECKPOINT_STAGES:
            if stage in upstream and (self.stage_dir(stage) / CHECKPOINT_DIR).exists():
                return str(self.stage_dir(stage) / CHECKPOINT_DIR)
        raise PipelineStageError(before, EXIT_CHECKPOINT, "no upstream checkpoint to start from")

    def gen_data(self):
        config = validate_config(GenDataConfig, {**self.config.gen_data, **self._common("gen-data")})
        write_resolved(config)
        make_dataset(config)

    def train_codec(self):
        paths = {"data_dir": str(self.stage_dir("gen-data"))}
        config = validate_config(CodecConfig, {**self.config.codec, **paths, **self._common("train-codec")})
        write_resolved(config)
        train_codecs(config)

    def _train_config(self, stage: str, section: Dict) -> TrainConfig:
        paths = {
            "data_dir": str(self.stage_dir("gen-data")),
            "codec_ckpt": str(self.stage_dir("train-codec") / CHECKPOINT_DIR),
        }
        # Fine-tuning keeps the model sizes of the pretraining
        sizes = {k: self.config.pretrain[k] for k in ("ar", "dit") if k in self.config.pretrain}
        config = validate_config(TrainConfig, {**sizes, **section, **paths, **self._common(stage)})
        write_resolved(config)
        return config

    def pretrain(self):
        pretrain(self._train_config("pretrain", self.config.pretrain))

    def sft(self):
        config = self._train_config("sft", self.config.sft)
        sft(config, self._latest_checkpoint("sft"))

    def rl(self):
        config = validate_config(GRPOConfig, {**self.config.rl, **self._common("rl")})
        write_resolved(config)
        run_grpo(config, self._latest_checkpoint("rl"))

    def eval(self):
        config = validate_config(EvalConfig, {**self.config.eval, **self._common("eval")})
        write_resolved(config)
        ckpt = self._latest_checkpoint("eval")
        report = evaluate(ckpt, config.suite, config.n, config.seed, config.mode, config.ode_steps, config.threads)
        write_json(report, config.out or Path(config.out_dir) / REPORT_FILE)

    def pending(self) -> List[str]:
        """Stages to run : the first selected stage without a marker, and every
        selected stage after it.
        """
        stages = self.config.stages
        for i, stage in enumerate(stages):
            if not self.is_done(stage):
                return stages[i:]
        return []

    def run(self) -> List[str]:
        """Run the pending stages, in order.

        Raises:
            PipelineStageError: If a stage fails (the following stages are not
                run).

        Returns:
            The stages that were run.
        """
        pending = self.pending()
        for stage in pending:
            # Downstream markers are stale once a stage reruns
            self.marker(stage).unlink(missing_ok=True)

        for stage in pending:
            logger.info(f"stage={stage} status=start")
            try:
                self.runners[stage]()
            except PipelineStageError:
                raise
            except ArflowError as e:
                raise PipelineStageError(stage, e.exit_code, str(e)) from e
            except Exception as e:
                raise PipelineStageError(stage, EXIT_RUNTIME, f"{type(e).__name__}: {e}") from e
            write_json({"stage": stage, "config_hash": self._stage_hash(stage)}, self.marker(stage))
            logger.info(f"stage={stage} status=done")
        return pending

    def _stage_hash(self, stage: str) -> Optional[str]:
        resolved = self.stage_dir(stage) / RESOLVED_CONFIG
        return config_hash({"resolved": resolved.read_text()}) if resolved.exists() else None


def run_pipeline(config: PipelineConfig) -> List[str]:
    """Run the pipeline described by a configuration.

    Args:
        config (PipelineConfig): Configuration.

    Raises:
        PipelineStageError: If a stage fails.

    Returns:
        The stages that were run (empty if every stage was already complete).
    """
    write_resolved(config)
    return Pipeline(config).run()
