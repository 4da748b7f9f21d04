import pytest

from errors import (ConfigError, IdxFormatError, InvalidInputError, ModelFormatError, PartialEstimateError,
                    QueryBudgetExhausted, TrainingDivergedError, UndefinedRateError)


@pytest.mark.parametrize("error, base", [
    (InvalidInputError, ValueError),
    (IdxFormatError, ValueError),
    (ModelFormatError, ValueError),
    (ConfigError, ValueError),
    (UndefinedRateError, ZeroDivisionError),
    (QueryBudgetExhausted, RuntimeError),
    (PartialEstimateError, RuntimeError),
    (TrainingDivergedError, RuntimeError),
])
def test_builtin_bases(error, base):
    assert issubclass(error, base)


def test_carried_fields():
    assert QueryBudgetExhausted(500).cap == 500
    assert "500" in str(QueryBudgetExhausted(500))
    partial = PartialEstimateError(3, 20)
    assert (partial.used, partial.needed) == (3, 20)
    diverged = TrainingDivergedError(4, float("nan"))
    assert diverged.epoch == 4
    assert "epoch 4" in str(diverged)
