"""Exception types raised across the package."""


class ProtoworldError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ProtoworldError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateVectorError(ProtoworldError, ValueError):
    """A vector's norm is too small to normalize."""


class LabelError(ProtoworldError, ValueError):
    """A class label is outside the valid range or not allowed here."""


class ConfigError(ProtoworldError, ValueError):
    """A configuration violates its schema or its documented invariants."""


class DataFormatError(ProtoworldError, ValueError):
    """A dataset file is malformed.

    ``line`` is the 1-based line number of the offending row, when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyResultError(ProtoworldError, ValueError):
    """An operation produced (or was given) an empty dataset."""


class ParamFileError(ProtoworldError, ValueError):
    """A parameter file is corrupt, truncated or from another format version.

    ``section`` names the part of the file that could not be read.
    """

    def __init__(self, message, section=None):
        self.section = section
        super().__init__(message)


class NumericalError(ProtoworldError, ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message, epoch=None, batch=None, component=None):
        self.epoch = epoch
        self.batch = batch
        self.component = component
        super().__init__(
            f"{message} (epoch={epoch}, batch={batch}, component={component})"
        )
