"""
Errors Module

Exception hierarchy shared by every module of the lab. The CLI maps these
onto process exit codes (see app/UI/CLI/main.py).
"""


class LabError(Exception):
    """Base class for all lab errors."""


class ValidationError(LabError, ValueError):
    """An input violates a documented precondition or bound."""


class ConfigError(LabError):
    """A configuration key is unknown, unparseable or inconsistent."""


class NumericError(LabError, ArithmeticError):
    """A computation produced a non-finite value.

    Args:
        message (str): Description of the failure
        step (int, optional): Token step index where it happened
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class NumericDivergenceError(NumericError):
    """Training produced a non-finite objective or gradient."""


class CheckpointError(LabError, OSError):
    """A checkpoint file is corrupt, truncated or incompatible."""


class DatasetError(LabError, OSError):
    """A dataset file cannot be read or fails its consistency checks."""
