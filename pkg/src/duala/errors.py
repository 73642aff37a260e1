"""Exception hierarchy.

Two families, matching the CLI exit-code contract: ValidationError and its
subclasses map to exit code 1 (bad inputs, failed numeric checks),
FormatError and its subclasses map to exit code 2 (unreadable or corrupt
files, unparseable configs).
"""


class DualaError(Exception):
    """Base class for all package errors."""


class ValidationError(DualaError):
    """Invalid argument values, shapes, or numeric state. CLI exit 1."""


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    """A tensor that must be finite contains NaN or inf."""


class SingularSystemError(ValidationError):
    """Normal equations are singular at ridge penalty zero."""


class DegenerateEmbeddingError(ValidationError):
    """A zero-norm vector where a direction is required."""


class DegeneratePrototypeError(ValidationError):
    """Class samples cancel to a zero mean; no prototype direction exists."""


class EmptyOverlapError(ValidationError):
    """No class pair is valid in both the new matrix and the reference."""


class FormatError(DualaError):
    """On-disk format problems. CLI exit 2."""


class BadMagicError(FormatError):
    pass


class FormatVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DanglingStimulusError(FormatError):
    """A subject row references a stimulus id absent from the table."""


class DuplicateTensorError(FormatError):
    """A checkpoint holds two tensors with the same name."""


class ConfigError(FormatError):
    """Unparseable key = value config file; message carries the line number."""
