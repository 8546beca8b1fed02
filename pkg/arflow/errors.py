"""Exceptions raised by `arflow`.

Each exception carries the exit code the command line uses when the exception
reaches it, so every failure maps to a stable, machine-parsable status.
"""


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_RUNTIME = 6


class ArflowError(Exception):
    """Base class of all the exceptions raised on purpose by `arflow`."""

    exit_code = EXIT_RUNTIME


class UsageError(ArflowError):
    """Custom Exception when a command is called with wrong arguments."""

    exit_code = EXIT_USAGE


class GrammarError(UsageError):
    """Custom Exception when a prompt or an instruction is outside of the
    canonical grammar.
    """

    pass


class ConfigError(ArflowError):
    """Custom Exception when a configuration file is invalid."""

    exit_code = EXIT_CONFIG


class DataError(ArflowError):
    """Custom Exception when the data is missing, unreadable or inconsistent."""

    exit_code = EXIT_DATA


class CheckpointError(ArflowError):
    """Custom Exception when a checkpoint can't be saved or loaded."""

    exit_code = EXIT_CHECKPOINT


class CorruptManifestError(CheckpointError):
    """The checkpoint manifest can't be parsed or misses required fields."""

    pass


class OffsetOverlapError(CheckpointError):
    """Two tensors of the manifest share bytes of the payload."""

    pass


class PayloadBoundsError(CheckpointError):
    """A tensor of the manifest points outside of the payload file."""

    pass


class VersionMismatchError(CheckpointError):
    """The checkpoint was written with another format version."""

    pass


class ShapeMismatchError(CheckpointError):
    """The checkpoint tensors don't match the shapes of the model."""

    pass


class ArflowRuntimeError(ArflowError):
    """Custom Exception for failures happening while running a stage."""

    exit_code = EXIT_RUNTIME


class UntrainedError(ArflowRuntimeError):
    """A component is used before being trained."""

    pass


class EditConflictError(ArflowRuntimeError):
    """An edit operation can't be applied to the given scene."""

    pass


class RatioError(ArflowRuntimeError):
    """Importance ratios of the policy became NaN."""

    pass


class SDEGridError(ArflowRuntimeError):
    """The stochastic integration grid reaches the singular time t=0."""

    pass


class PipelineStageError(ArflowRuntimeError):
    """A stage of the pipeline failed.

    Args:
        stage (str): Name of the stage that failed.
        code (int): Exit code of the failure.
        message (str): Description of the failure.
    """

    def __init__(self, stage: str, code: int, message: str):
        super().__init__(f"stage `{stage}` failed with exit code {code} : {message}")
        self.stage = stage
        self.exit_code = code
