"""Exception types shared across the package."""


class BlendcageError(Exception):
    """Base class for all package-specific errors."""


class DegenerateTet(BlendcageError):
    """A rest tetrahedron is below the volume threshold (or inverted where forbidden)."""


class DimensionMismatch(BlendcageError):
    """Arrays that must agree in shape/length do not."""


class SolverDiverged(BlendcageError):
    """A linear solve did not reach the required residual tolerance."""


class NonFiniteLoss(BlendcageError):
    """Training produced NaN/Inf; carries diagnostic context in the message."""


class VersionMismatch(BlendcageError):
    """A serialized file has an unsupported format version."""


class CorruptFile(BlendcageError):
    """A serialized file failed its checksum or structural validation."""


class ImageTooSmall(BlendcageError):
    """Image smaller than the metric window."""


class ConfigError(BlendcageError):
    """Invalid or unknown configuration keys/values."""


class DataError(BlendcageError):
    """Missing or inconsistent dataset/scene inputs."""
