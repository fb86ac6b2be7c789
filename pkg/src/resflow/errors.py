"""Exception types shared across the package."""


class ResflowError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(ResflowError):
    """Structural problem: array dimensions do not chain."""


class GuardError(ResflowError):
    """A brute-force oracle was asked to run outside its safe range."""


class ContractivityError(ResflowError):
    """An operation that requires Lip(g) < 1 failed to converge."""


class NormalizationError(ResflowError):
    """Internal inconsistency while estimating or applying weight norms."""


class InitializationError(ResflowError):
    """A layer was used before its data-dependent initialization ran."""


class NonFiniteError(ResflowError):
    """NaN or Inf appeared where the pipeline requires finite values."""


class ConfigError(ResflowError):
    """Bad configuration file, key, or value."""
