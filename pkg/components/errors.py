"""
Error Types

Exception hierarchy shared by all pipeline components.
The CLI maps ValidationError subclasses to exit code 2, everything else to 1.
"""


class HmaeError(Exception):
    """Base class for every error raised by the pipeline."""


class ValidationError(HmaeError, ValueError):
    """Input or configuration rejected before any work is done."""


class DimensionError(ValidationError):
    """Tensor shapes do not agree."""


class ParameterError(ValidationError):
    """A scalar parameter is outside its valid range."""


class DegenerateInputError(ValidationError):
    """Input is well-formed but carries nothing to compute on (e.g. empty mask)."""


class GeometryError(ValidationError):
    """Image or crop geometry is impossible for the requested operation."""


class ConfigError(ValidationError):
    """Run configuration is malformed, has unknown keys or violates an invariant."""


class SplitError(ValidationError):
    """A stratified split cannot be produced from the given labels."""


class TapeError(HmaeError):
    """Backward called on a non-scalar loss or a tape that was already consumed."""


class NumericalError(HmaeError):
    """A forward op produced non-finite values while the NaN debug check is on."""


class TrainingError(HmaeError):
    """Optimization diverged (NaN loss or gradient)."""


class CorpusError(HmaeError):
    """Corpus generation could not reach the requested region count."""


class ProbeError(HmaeError):
    """Probe training or prediction cannot proceed."""


class MetricsError(HmaeError):
    """A metric is undefined for the given labels and scores."""


class RunError(HmaeError):
    """One run of a repeated experiment failed."""

    def __init__(self, run_index: int, seed: int, cause: Exception):
        super().__init__(f"run {run_index} (seed {seed}) failed: {cause}")
        self.run_index = run_index
        self.seed = seed
        self.cause = cause


class CheckpointError(HmaeError):
    """Checkpoint file is truncated, corrupt or does not match the config."""


class EmbeddingStoreError(HmaeError):
    """Embedding store file is truncated or malformed."""
