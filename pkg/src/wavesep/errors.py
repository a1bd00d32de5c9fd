"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class WavesepError(Exception):
    exit_code = 1


class ConfigError(WavesepError, ValueError):
    """Invalid configuration or mismatched shapes."""

    exit_code = 2


class InsufficientContextError(ConfigError):
    """Input is shorter than the span a kernel needs."""


class DatasetError(WavesepError):
    exit_code = 3


class DivergedTrainingError(WavesepError, ArithmeticError):
    """A loss or gradient became non-finite."""

    exit_code = 4

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DegenerateReferenceError(WavesepError, ArithmeticError):
    exit_code = 4


class IntegrityError(WavesepError, IOError):
    """Truncated or corrupt file."""

    exit_code = 5

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(IntegrityError):
    """File is well-formed but uses an unsupported encoding."""


class ReportError(WavesepError):
    exit_code = 3


class InternalError(WavesepError, RuntimeError):
    pass
