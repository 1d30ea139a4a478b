"""Exception taxonomy shared by all clipsim modules.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
data and file-format problems exit 2, numeric failures exit 3.
"""


class ClipsimError(Exception):
    """Base class for all library errors."""


class ShapeError(ClipsimError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(ClipsimError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ClipsimError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(ClipsimError, RuntimeError):
    """Training failed (non-finite gradient or loss). Carries context."""


class NumericError(ClipsimError, ArithmeticError):
    """Non-finite value produced during inference."""


class FormatError(ClipsimError, ValueError):
    """Malformed binary or JSON input. `offset` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(ClipsimError, ValueError):
    """Stored data violates an invariant (e.g. a non-unit-norm row)."""


class UnknownIdError(ClipsimError, KeyError):
    """Lookup of a video or query id that is not in the corpus."""


class SamplingError(ClipsimError, ValueError):
    """A clip pair cannot be sampled from the given video."""


class MetricError(ClipsimError, ValueError):
    """A requested metric is undefined (e.g. empty relevant set)."""


class UsageError(ClipsimError, ValueError):
    """Bad command line invocation."""
