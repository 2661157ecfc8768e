"""Exception types shared across the package.

Contract/config problems derive from ValueError (CLI exit code 1);
malformed files derive from OSError (CLI exit code 2).
"""


class ShapeError(ValueError):
    """An array argument has the wrong rank or incompatible extents."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent or unsupported."""


class MissingAdjointError(LookupError):
    """A gradient was requested for a parameter the tape never saw."""


class StratificationError(ValueError):
    """A data split cannot satisfy the stratification requirements."""


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given label distribution."""


class GradCheckAborted(RuntimeError):
    """A finite-difference evaluation produced a non-finite value."""


class FileFormatError(OSError):
    """Base class for malformed input files."""


class TensorFileError(FileFormatError):
    """Base class for binary tensor file problems."""


class BadMagicError(TensorFileError):
    pass


class BadVersionError(TensorFileError):
    pass


class BadDtypeError(TensorFileError):
    pass


class PayloadSizeError(TensorFileError):
    pass


class TabularParseError(FileFormatError):
    """CSV ingestion failure; carries 1-based data row and column indices."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col
