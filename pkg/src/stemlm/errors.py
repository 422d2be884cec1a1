"""Exception hierarchy shared across the package.

The CLI maps each category to a distinct exit code; see ``stemlm.cli``.
"""


class StemLMError(Exception):
    """Base class for all package-specific errors."""


class LayoutError(StemLMError):
    """Invalid stem/stream layout definition or lookup."""


class UnknownStemError(LayoutError):
    """A stem name was not found in the layout."""


class MalformedGridError(StemLMError):
    """A token grid violates a structural contract (e.g. stray PAD_DELAY)."""


class CodecError(StemLMError):
    """RVQ encode/decode/fit failure (dimension mismatch, special token, ...)."""


class PlanError(StemLMError):
    """An edit plan is inconsistent with itself or with a layout."""


class CropError(StemLMError):
    """A grid is too short for the requested crop or downsample."""


class SequenceTooLongError(StemLMError):
    """Model input exceeds the configured maximum frame count."""


class DecodeParamError(StemLMError):
    """Invalid sampling parameters (top_k < 1, temperature <= 0, ...)."""


class DatasetError(StemLMError):
    """Dataset directory missing, inconsistent, or incompatible with a layout."""


class CheckpointError(StemLMError):
    """Checkpoint file unreadable or incompatible."""


class TrainingDivergedError(StemLMError):
    """Non-finite loss encountered; a diagnostic checkpoint was written."""


class FileFormatError(StemLMError):
    """A container file has a bad magic, version, or payload size."""
