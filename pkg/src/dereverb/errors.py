"""Exception hierarchy shared across the package."""


class DereverbError(Exception):
    """Base class for package errors."""


class ConfigError(DereverbError):
    """Invalid configuration, arguments, or input files (CLI exit code 2)."""


class NumericError(DereverbError):
    """Non-finite values or numerically degenerate state (CLI exit code 3)."""


class DegenerateRirError(NumericError):
    """Operator parameters produce an unusable (e.g. all-zero) filter."""


class BridgeError(NumericError):
    """Score-bridge transport failure (timeout, bad frame, closed socket)."""
