"""Exception types shared across the package."""


class FuselabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FuselabError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(FuselabError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateInputError(FuselabError, ValueError):
    """Numerically degenerate input (e.g. a zero-norm vector fed to a cosine)."""


class NonFiniteError(FuselabError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are valid."""


class DatasetError(FuselabError, ValueError):
    """A dataset directory or manifest could not be parsed."""


class ConfigError(FuselabError, ValueError):
    """A run configuration document is invalid."""
