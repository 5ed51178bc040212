"""Shared exception types with CLI exit-code semantics."""


class InvalidStateError(RuntimeError):
    """A required prerequisite (checkpoint, stage output) is missing or stale."""


class NumericalError(ArithmeticError):
    """A computation is too ill-conditioned to produce a trustworthy result."""
