"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class StateError(RuntimeError):
    """A cache or optimizer state does not belong to the object it is used with."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(ValueError):
    """Malformed file contents.

    ``offset`` is the byte offset (binary files) or ``line`` the 1-based line
    number (text files) where parsing failed, when known.
    """

    def __init__(self, message, *, offset=None, line=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class VersionError(FormatError):
    """Wrong magic number or unsupported format version."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class ConfigError(ValueError):
    """Invalid run configuration."""
