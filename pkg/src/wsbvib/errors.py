"""Exception hierarchy shared across the package.

Every error carries a short machine-parseable class string so the CLI can
emit "<error-class>: <message>" on a single stderr line and exit nonzero.
"""


class WsbvibError(Exception):
    """Base class for all package errors."""

    error_class = "internal-error"


class DataError(WsbvibError):
    """Invalid in-memory data (bad shapes, non-finite values, broken invariants)."""

    error_class = "data-error"


class IOFormatError(WsbvibError):
    """A file exists but cannot be parsed as the expected format."""

    error_class = "io-format-error"


class MissingFileError(WsbvibError):
    """A referenced file does not exist."""

    error_class = "missing-file"


class ConfigError(WsbvibError):
    """Invalid or unknown configuration keys/values."""

    error_class = "config-error"


class RejectedParamsError(WsbvibError):
    """Shape parameters produce an invalid (self-intersecting) surface."""

    error_class = "rejected-params"


class TrainingError(WsbvibError):
    """Training aborted (non-finite loss, empty split, bad checkpoint)."""

    error_class = "training-error"


class UndefinedStatisticError(WsbvibError):
    """A statistic is undefined for the given input (e.g. constant-input correlation)."""

    error_class = "undefined-statistic"
