"""Exception hierarchy shared across the package."""


class AdvprobeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AdvprobeError):
    """Tensor shapes are inconsistent with an operation's contract."""


class NumericError(AdvprobeError):
    """Non-finite values where finite ones are required."""


class DomainError(AdvprobeError):
    """A value is outside the domain an operation accepts."""


class ConsistencyError(AdvprobeError):
    """Weights, architecture, or models disagree with each other."""


class IngestionError(AdvprobeError):
    """A dataset file or index row could not be ingested."""


class TrainingError(AdvprobeError):
    """Training cannot proceed (empty data, diverged loss)."""


class FormatError(AdvprobeError):
    """A serialized artifact does not match its documented byte format."""


class UsageError(AdvprobeError):
    """Command-line flags were combined in an unsupported way."""
