"""Exception types shared across the package."""


class VideosalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VideosalError):
    """Shapes, axes, or extents do not fit the operation."""


class ContractError(VideosalError):
    """A precondition of an operation was violated."""


class ConfigError(VideosalError):
    """Invalid or inconsistent configuration."""


class FormatError(VideosalError):
    """Malformed file content (binary or text)."""


class NumericsError(VideosalError):
    """A non-finite value appeared while debug checks were enabled."""


class DegenerateMapError(VideosalError):
    """A saliency map or fixation set is unusable for the requested metric."""
