"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: validation problems exit 2,
missing prerequisites exit 3, plain I/O failures exit 4.
"""


class ProtoExplainError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(ProtoExplainError):
    """A file is not a well-formed NPY v1.0 payload."""


class UnsupportedFormatError(FormatError):
    """The file is structurally valid NPY but uses an unsupported variant
    (Fortran order, dtype outside {'<f4', '<i8'}, version != 1.0)."""


class ValidationError(ProtoExplainError):
    """Input data violates a documented invariant (shape mismatch,
    non-finite values, label out of range, split leakage...)."""


class InsufficientPointsError(ValidationError):
    """Fewer points than clusters requested."""


class ConfigurationError(ProtoExplainError):
    """A required artifact (bank, map, image) is missing or inconsistent
    with the requested operation."""
