"""
Error Types
Exception hierarchy shared by the numerical core and the command line
"""


class TailgroveError(Exception):
    """Base class for all errors raised by this package"""


class DomainError(TailgroveError, ValueError):
    """Argument outside the mathematical domain of an operation"""


class PreconditionError(TailgroveError, ValueError):
    """Not enough data (or the wrong shape of data) for a fitting step"""


class ConvergenceError(TailgroveError, RuntimeError):
    """Likelihood optimisation failed or the likelihood is degenerate"""


class DataParseError(TailgroveError, ValueError):
    """A CSV cell or header could not be parsed"""


class ModelFormatError(TailgroveError, ValueError):
    """Model file is truncated, corrupt or written by an unknown version"""


class ConfigError(TailgroveError, ValueError):
    """Unknown or ill-typed configuration value"""
