"""Exception hierarchy shared across the package."""


class VoxplaneError(Exception):
    """Base class for all voxplane errors."""


class RejectedInputError(VoxplaneError, ValueError):
    """Input violates a hard precondition (non-finite point, asymmetric covariance, ...)."""


class InsufficientPointsError(VoxplaneError, ValueError):
    """An operation needs more points than the accumulator holds."""


class SpectralDegeneracyError(VoxplaneError, ArithmeticError):
    """Eigenvalue gap too small for the normal-sensitivity factors to exist."""


class InvalidPlaneError(VoxplaneError, ValueError):
    """Plane parameters are unusable (zero normal, non-finite entries)."""


class DegenerateRegistrationError(VoxplaneError, RuntimeError):
    """Too few valid plane correspondences to constrain the pose."""


class MalformedFileError(VoxplaneError, ValueError):
    """On-disk payload does not match the expected record layout."""


class ConfigError(VoxplaneError, ValueError):
    """Bad configuration file: unknown key, missing value, or wrong type."""
