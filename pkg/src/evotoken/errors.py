"""Exception taxonomy shared across the package."""


class EvoTokenError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(EvoTokenError):
    """Operands have incompatible extents."""


class NumericError(EvoTokenError):
    """Non-finite values or numeric breakdown."""


class ContractError(EvoTokenError):
    """An operation was called outside its documented preconditions."""


class StateCorruptionError(ContractError):
    """A token slot violates its state invariants."""


class VocabularyError(EvoTokenError):
    """Token id outside the vocabulary."""


class SequenceLengthError(EvoTokenError):
    """Sequence exceeds the model's maximum length."""


class InfeasibleScheduleError(EvoTokenError):
    """Decode budget cannot cover the requested blocks."""


class DegenerateBatchError(EvoTokenError):
    """A loss was requested over an empty effective batch."""


class CheckpointError(EvoTokenError):
    """Checkpoint file is malformed or of an unsupported version."""


class DatasetError(EvoTokenError):
    """Dataset file is malformed; message carries the offending line."""


class ConfigError(EvoTokenError):
    """Run configuration failed validation; message names the field."""
