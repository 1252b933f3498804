"""Exception types shared across the package."""


class MomaError(Exception):
    """Base class for all package errors."""


class DimensionError(MomaError, ValueError):
    """Array shapes do not agree with a declared layout."""


class DomainError(MomaError, ValueError):
    """An argument lies outside the domain where a function is defined."""


class UsageError(MomaError, RuntimeError):
    """An object was used in a way its contract forbids (e.g. a tape replayed twice)."""


class ConfigError(MomaError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingDivergence(MomaError, FloatingPointError):
    """A loss, target or gradient became non-finite."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class DataFormatError(MomaError, ValueError):
    """A dataset or checkpoint file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
