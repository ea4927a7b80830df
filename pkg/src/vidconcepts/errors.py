class InvalidInputError(ValueError):
    """Raised when an array or argument violates an operation's preconditions."""


class DegenerateInputError(InvalidInputError):
    """Zero-norm vectors or prototypes where a direction is required."""


class InvalidSplitError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
