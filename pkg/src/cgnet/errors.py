"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """A model or experiment configuration is inconsistent."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class NumericInputError(ValueError):
    """An input tensor contains NaN or Inf where finite values are required."""


class ResourceLimitError(RuntimeError):
    """An operation would exceed a configured resource limit."""


class InputError(ValueError):
    """An input value violates an operation's precondition."""


class DomainError(ValueError):
    """A quantity is undefined for the given inputs (e.g. ratio with zero denominator)."""


class IngestionError(RuntimeError):
    """A dataset file is missing, unreadable, or inconsistent."""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.value = value
