"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
runtime/numeric problems exit 2.
"""


class FuseVitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FuseVitError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class ConfigError(FuseVitError, ValueError):
    """Invalid configuration value or combination."""


class NumericError(FuseVitError, ArithmeticError):
    """A computation produced or received non-finite values."""


class TapeError(FuseVitError, RuntimeError):
    """Autodiff tape misuse (non-scalar loss, replayed backward, ...)."""


class OracleError(FuseVitError, RuntimeError):
    """A verification oracle could not be trusted (e.g. non-deterministic f)."""


class TraceMismatchError(FuseVitError, ValueError):
    """Selection results do not line up with the encoder trace."""


class FtzError(FuseVitError, ValueError):
    """Malformed FTZ tensor file."""
