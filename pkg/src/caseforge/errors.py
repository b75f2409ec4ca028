"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class CaseForgeError(Exception):
    code = "error"
    exit_status = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ConfigError(CaseForgeError, ValueError):
    code = "invalid_config"
    exit_status = 2


class DatasetError(CaseForgeError):
    code = "dataset_error"
    exit_status = 3


class MissingFileError(DatasetError, FileNotFoundError):
    code = "missing_file"
    exit_status = 4

    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = str(path)


class ChecksumMismatchError(DatasetError):
    code = "checksum_mismatch"
    exit_status = 5


class ImageShapeError(DatasetError):
    code = "shape_mismatch"
    exit_status = 6


class SplitLeakageError(DatasetError):
    code = "split_leakage"
    exit_status = 7


class SamplingError(DatasetError):
    code = "sampling_error"
    exit_status = 8


class ShapeMismatchError(CaseForgeError, ValueError):
    """Tensor dimensions do not match the model configuration."""

    code = "shape_mismatch"
    exit_status = 6


class DivergenceError(CaseForgeError, ArithmeticError):
    code = "diverged"
    exit_status = 9

    def __init__(self, loss_name: str, step: int, value: float):
        super().__init__(f"loss {loss_name} became non-finite ({value}) at step {step}")
        self.loss_name = loss_name
        self.step = step
        self.value = value


class CheckpointError(CaseForgeError):
    code = "checkpoint_error"
    exit_status = 10


class EvaluationError(CaseForgeError, ValueError):
    code = "evaluation_error"
    exit_status = 11


class StageError(CaseForgeError):
    """A stage of an experiment failed; wraps the original error."""

    code = "stage_failed"
    exit_status = 12

    def __init__(self, stage: str, cause: BaseException, artifacts=()):
        detail = str(cause)
        msg = f"stage '{stage}' failed: {detail}"
        if artifacts:
            msg += " (artifacts kept: " + ", ".join(str(a) for a in artifacts) + ")"
        super().__init__(msg)
        self.stage = stage
        self.cause = cause
        self.artifacts = [str(a) for a in artifacts]
