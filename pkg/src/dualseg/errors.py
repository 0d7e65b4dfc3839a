"""Exception types shared across the package."""


class DualsegError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DualsegError):
    """Array shapes or axis counts do not match the contract."""


class DomainError(DualsegError):
    """Volume intensity domain is wrong for the operation."""


class ParameterError(DualsegError):
    """A parameter value is outside its documented range."""


class EmptyMaskError(DualsegError):
    """An operation that needs foreground voxels received an empty mask."""


class EmptyDenominatorError(DualsegError):
    """A normalizing sum has no contributing terms."""


class InsufficientSamplesError(DualsegError):
    """Too few samples to form the requested batch or estimate."""


class NoPositiveRegionError(DualsegError):
    """No valid patch center exists anywhere in the sampling mask."""


class FormatError(DualsegError):
    """A serialized file does not follow the container format."""


class ConfigError(DualsegError):
    """Configuration is inconsistent or contains unknown keys."""


class SingleSourceError(DualsegError):
    """Training data spans more than one source style."""


class RunDirError(DualsegError):
    """A run directory already holds results and --force was not given."""


class CheckpointError(DualsegError):
    """A checkpoint directory is missing files or inconsistent."""


class StageIsolationError(DualsegError):
    """Parameters that must stay frozen changed during a training stage."""
