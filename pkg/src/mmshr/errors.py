"""Exception hierarchy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axis."""


class NumericalError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class ConfigError(ValueError):
    """An architecture or run configuration violates its invariants."""


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class MagicMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""
