"""Exception hierarchy. CLI exit codes key off these classes."""


class EmoCapsError(Exception):
    pass


class UsageError(EmoCapsError, ValueError):
    """Invalid arguments or configuration."""


class DimensionError(EmoCapsError, ValueError):
    """Shapes or extents that do not fit together."""


class NumericError(EmoCapsError, ArithmeticError):
    """NaN/inf where a finite value is required."""


class ConfigError(UsageError):
    pass


class DataError(EmoCapsError):
    """Problems with dataset files; always names the offending record."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class ExtentMismatchError(DataError, DimensionError):
    pass


class UnknownLabelError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(DataError):
    """Malformed EMOF or manifest content."""
