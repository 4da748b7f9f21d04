"""
Exception types shared across the benchmark.

Everything derives from a built-in exception so callers can catch the broad
category (ValueError for bad input, RuntimeError for run-time conditions).
"""


class InvalidInputError(ValueError):
    """Input tensor has the wrong shape, range or label."""


class IdxFormatError(ValueError):
    """IDX or CSV dataset file is malformed."""


class ModelFormatError(ValueError):
    """Serialized model file is malformed."""


class ConfigError(ValueError):
    """Run configuration is invalid or requests an incompatible cell."""


class UndefinedRateError(ZeroDivisionError):
    """A success rate was requested with an empty denominator."""


class QueryBudgetExhausted(RuntimeError):
    """A query oracle reached its cap."""

    def __init__(self, cap: int):
        super().__init__(f"Query budget of {cap} exhausted")
        self.cap = cap


class PartialEstimateError(RuntimeError):
    """Gradient estimation ran out of queries before finishing."""

    def __init__(self, used: int, needed: int):
        super().__init__(f"Gradient estimate interrupted after {used} of {needed} queries")
        self.used = used
        self.needed = needed


class TrainingDivergedError(RuntimeError):
    """Training loss became NaN or infinite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
