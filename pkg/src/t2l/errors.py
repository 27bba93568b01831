"""Exception types shared across the package."""


class T2LError(Exception):
    pass


class ShapeError(T2LError):
    """Dimension mismatch between operands; message names both shapes."""


class ConfigError(T2LError):
    """Invalid or inconsistent configuration."""


class ContractError(T2LError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class TrainingDivergedError(T2LError):
    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"training diverged (non-finite loss) at step {step}")


class FormatError(T2LError):
    """Unparseable file or bad magic bytes."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload."""


class VersionMismatchError(FormatError):
    """File format version not supported by this build."""


class FingerprintMismatchError(T2LError):
    """Artifact was produced against a different base-model config."""


class DuplicateKeyError(T2LError):
    """Same key declared twice in a table file."""


class CapacityError(T2LError):
    """More variants requested than the generator can supply."""


class UndefinedSimilarityError(T2LError):
    """Cosine/correlation undefined (zero vector or zero variance)."""


class DegenerateMetricError(T2LError):
    """Metric denominator too small to be meaningful."""
