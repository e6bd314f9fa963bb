"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract.

    Messages always include every shape involved so the caller can see
    what was actually passed.
    """


class NumericError(ArithmeticError):
    """Raised when a computation produces or would produce non-finite values."""


class ConfigError(ValueError):
    """Raised for invalid run configuration; carries all problems at once."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TrainingAborted(RuntimeError):
    """Raised when a training run hits its abort rule (NaN loss, NLL divergence)."""
