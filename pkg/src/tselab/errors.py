"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems -> 1, data problems -> 2,
numerical failures -> 3.
"""


class TseLabError(Exception):
    """Base class for all package errors."""


class ShapeError(TseLabError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(TseLabError, ValueError):
    """Input lies outside the mathematical domain of the operation."""


class GraphError(TseLabError, RuntimeError):
    """Autodiff tape misuse: non-scalar loss, detached graph, double backward."""


class AudioFormatError(TseLabError, ValueError):
    """Malformed or unsupported WAV content; message names the offending field."""


class DegenerateSignalError(TseLabError, ValueError):
    """A signal with no usable energy where a non-silent one is required."""


class DataError(TseLabError, ValueError):
    """Corpus / manifest / archive level problem (missing files, bad splits)."""


class NumericalError(TseLabError, RuntimeError):
    """Numerical failure: NaN gradients, failed factorization, failed check."""


class UsageError(TseLabError, ValueError):
    """Bad command-line or config-file input."""
