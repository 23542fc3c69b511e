"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit 1,
input/output problems exit 2, numeric failures exit 3.
"""


class UTALError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(UTALError, ValueError):
    """Invalid or inconsistent configuration value."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ModeError(ConfigError):
    """Training mode incompatible with the supplied corpus."""


class CorpusFormatError(UTALError, ValueError):
    """Malformed corpus file or corpus structure."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ShapeError(UTALError, ValueError):
    """Array dimensions do not agree."""


class DegenerateCameraError(UTALError, ValueError):
    """A camera has too few tracklets for the requested neighbourhood size."""


class NumericError(UTALError, ArithmeticError):
    """Non-finite value encountered in a loss, logit or gradient."""
