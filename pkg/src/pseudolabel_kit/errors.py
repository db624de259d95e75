"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class FormatError(ValueError):
    """A file could not be parsed as the documented format."""


class DegeneratePosteriorError(ArithmeticError):
    """The prior puts (numerically) no mass on assignments with a foreground proposal."""


class GenerationError(RuntimeError):
    """Synthetic scene placement exhausted its retry budget."""
