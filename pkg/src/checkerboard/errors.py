"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class DecodeError(RuntimeError):
    """A bitstream could not be decoded (truncated, corrupt or mismatched)."""


class TrainingError(RuntimeError):
    """Training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
