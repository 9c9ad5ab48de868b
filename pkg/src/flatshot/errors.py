"""Exception types raised across the library.

Every failure mode callers are expected to handle gets its own class so
tests and CLI error reporting can distinguish them without string matching.
"""


class FlatshotError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(FlatshotError):
    """Structural error: array shapes or vector lengths are inconsistent."""


class NumericError(FlatshotError):
    """Non-finite values encountered during a numeric computation."""


class AdapterSpecError(FlatshotError):
    """Adapter configuration is invalid (e.g. rank not below min(in, out))."""


class GateStateError(FlatshotError):
    """Gate toggling or gated evaluation requested in an invalid model state."""


class DataError(FlatshotError):
    """Invalid dataset, episode protocol, or sampling request."""


class IdxFormatError(DataError):
    """Base class for IDX file parsing failures."""


class IdxMagicError(IdxFormatError):
    """IDX file does not start with the expected magic number."""


class IdxTruncatedError(IdxFormatError):
    """IDX payload is shorter than the header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files disagree on the number of items."""


class BankError(FlatshotError):
    """Base class for backbone-bank failures."""


class DuplicateEntryError(BankError):
    """An entry with this name already exists in the bank."""


class MissingEntryError(BankError):
    """No entry with this name exists in the bank."""


class CorruptCheckpointError(BankError):
    """Checkpoint file failed magic/version/length validation."""


class DegenerateFeaturesError(FlatshotError):
    """Feature rows are constant, so pairwise correlation is undefined."""


class DegenerateLabelsError(FlatshotError):
    """Fewer than two distinct classes, so a score is undefined."""


class SelectionError(FlatshotError):
    """No bank entry could be scored for the given support set."""


class ConfigError(FlatshotError):
    """A configuration object violates its invariants."""
