"""Exception types shared across the package."""


class SemkdError(Exception):
    """Base class for package-specific errors."""


class ParseError(SemkdError):
    """A text input could not be parsed."""


class ShapeError(SemkdError):
    """An array, vector, or batch has inconsistent dimensions."""


class DuplicateError(SemkdError):
    """An identifier was registered twice."""


class ConfigurationError(SemkdError):
    """A configuration value is invalid or internally inconsistent."""


class DatasetError(SemkdError):
    """A dataset is missing classes, files, or samples."""


class ProtocolError(SemkdError):
    """An operation was invoked out of its allowed order."""


class DegenerateVectorError(SemkdError):
    """A zero-norm vector was passed where a direction is required."""


class EmptyInputError(SemkdError):
    """An operation received an empty input it cannot reduce."""
