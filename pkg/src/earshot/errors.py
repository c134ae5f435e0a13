"""Exception taxonomy shared across the package."""


class EarshotError(Exception):
    """Base class for all errors raised by this package."""


class AudioFormatError(EarshotError):
    """Malformed audio container (bad RIFF header, truncated chunks, ...)."""


class UnsupportedFormatError(AudioFormatError):
    """Well-formed audio file whose encoding we do not read."""


class ShapeError(EarshotError):
    """Tensor dimensions incompatible with the requested operation."""


class ConfigError(EarshotError):
    """Invalid or inconsistent configuration."""


class DomainError(EarshotError):
    """Input value outside an operation's mathematical domain."""


class EmptyInputError(EarshotError):
    """An operation that needs at least one element received none."""


class CheckpointError(EarshotError):
    """Checkpoint file rejected: bad magic, version, or structure."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint file truncated or internally inconsistent."""


class MetricError(EarshotError):
    """A metric is undefined for the given inputs (e.g. empty confusion matrix)."""
