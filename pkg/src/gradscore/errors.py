"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Input shape does not match what the model or operation expects."""


class DomainError(ValueError):
    """An argument lies outside the operation's valid domain."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite values are required."""


class StageError(RuntimeError):
    """A pipeline stage failed. ``stage`` names the stage that failed."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
