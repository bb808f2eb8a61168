"""Exception hierarchy. Every error carries a short machine-parseable code
that the CLI prints as a single line before exiting nonzero."""


class CvqError(Exception):
    """Base class for all package errors."""

    code = "internal"


class ShapeError(CvqError):
    """Operand shapes or geometries are incompatible."""

    code = "shape-mismatch"


class NonFiniteError(CvqError):
    """An operation produced NaN or Inf."""

    code = "non-finite"


class TapeError(CvqError):
    """Gradient tape misuse (e.g. backward called twice)."""

    code = "tape-misuse"


class ConfigError(CvqError):
    """Invalid configuration, flags, or sampling parameters."""

    code = "config-invalid"


class DataError(CvqError):
    """Unreadable or malformed data files."""

    code = "data-invalid"
