"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite / degenerate values."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, incompatible, or inconsistent."""
