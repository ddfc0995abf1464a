"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError exits 1, IOFailure
exits 2. Everything else is a genuine bug and propagates.
"""


class GradCamoError(Exception):
    """Base class for all package errors."""


class ValidationError(GradCamoError):
    """Bad arguments, shapes, dtypes, config values, or inconsistent inputs."""


class ManifestError(ValidationError):
    """Manifest is malformed or violates dataset invariants."""


class IOFailure(GradCamoError):
    """Missing or unreadable files."""


class DataFormatError(IOFailure):
    """A binary tensor file failed structural validation."""
