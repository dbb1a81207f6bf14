"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to: usage errors exit 1, data
errors exit 2 and internal invariant violations exit 3.
"""


class AdaptiveSVError(Exception):
    exit_code = 2


class ConfigError(AdaptiveSVError, ValueError):
    """Invalid configuration or inconsistent shapes."""

    exit_code = 1


class DataError(AdaptiveSVError, ValueError):
    """Input data that cannot be processed (short audio, empty score lists, ...)."""


class FormatError(DataError):
    """Malformed file content. ``offset`` is the byte offset (or line number) of the fault."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class InvariantError(AdaptiveSVError, AssertionError):
    exit_code = 3
