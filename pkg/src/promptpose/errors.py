"""Exception hierarchy shared across the package."""


class PromptPoseError(Exception):
    """Base class for all package errors."""


class ManifestError(PromptPoseError):
    """Raised when a dataset manifest is malformed or inconsistent."""


class SchemaError(PromptPoseError):
    """Raised when instances disagree with the keypoint schema."""


class ConfigError(PromptPoseError):
    """Raised for invalid configuration values or unknown keys."""


class SamplingError(PromptPoseError):
    """Raised when no valid episode can be sampled from a dataset."""


class DimensionError(PromptPoseError):
    """Raised when tensor shapes do not compose."""


class NumericError(PromptPoseError):
    """Raised on non-finite values or degenerate inputs (e.g. zero norms)."""


class SelectionError(PromptPoseError):
    """Raised when text selection is attempted on an empty pool."""


class CacheMissError(PromptPoseError):
    """Raised when a replay-mode gateway request is not in the cache."""


class TransportError(PromptPoseError):
    """Raised when a live provider call fails after retries."""

    def __init__(self, message, retries=0):
        super().__init__(message)
        self.retries = retries


class ParseError(PromptPoseError):
    """Raised when an LLM reply or a diverse prompt cannot be parsed."""


class EvaluationError(PromptPoseError):
    """Raised when an evaluation request yields an empty episode set."""


class CheckpointError(PromptPoseError):
    """Raised when a checkpoint does not match the current architecture."""
