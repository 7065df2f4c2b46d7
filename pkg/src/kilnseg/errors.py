"""Exception hierarchy.

The CLI prints ``ERROR <ClassName>: <message>`` for any of these, so the class
name is the machine-parsable error code.
"""


class KilnSegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KilnSegError, ValueError):
    pass


class GradientError(KilnSegError, RuntimeError):
    pass


class NonFiniteError(KilnSegError, FloatingPointError):
    pass


class ConfigError(KilnSegError, ValueError):
    pass


class StateError(KilnSegError, RuntimeError):
    pass


class CheckpointError(KilnSegError, ValueError):
    pass


class DatasetError(KilnSegError, FileNotFoundError):
    pass


class LogCorruptError(KilnSegError, ValueError):
    def __init__(self, path, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.line_number = line_number
