"""Query interfaces through which attacks and embedding generators see a model.

Every oracle counts queries exactly (one per input row) and can enforce a
budget. A batch that would cross the budget is rejected as a whole and the
counter is left at the last admitted query.
"""

from __future__ import annotations

import threading
from typing import Optional

import numpy as np

from .models import Model, forward, input_gradient


class OracleError(RuntimeError):
    pass


class BudgetExhausted(OracleError):
    pass


class LabelOracle:
    """Label-only query access. Subclasses implement :meth:`_labels`."""

    def __init__(self, budget: Optional[int] = None):
        self.budget = budget
        self._used = 0
        self._lock = threading.Lock()

    @property
    def queries_used(self) -> int:
        return self._used

    def _charge(self, n: int) -> None:
        with self._lock:
            if self.budget is not None and self._used + n > self.budget:
                raise BudgetExhausted(
                    f"query budget of {self.budget} exhausted ({self._used} used, {n} requested)")
            self._used += n

    def query(self, x) -> int:
        return int(self.query_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def query_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(X) == 0:
            return np.zeros(0, dtype=np.int64)
        self._charge(len(X))
        return self._labels(X)

    def _labels(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class LogitOracle(LabelOracle):
    """Adds full prediction-vector access (MLaaS APIs returning scores)."""

    def query_logits(self, x) -> np.ndarray:
        return self.query_logits_batch(np.asarray(x, dtype=np.float64)[None, :])[0]

    def query_logits_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self._charge(len(X))
        return self._logits(X)

    def _logits(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _labels(self, X):
        return np.argmax(self._logits(X), axis=1)


class FunctionOracle(LabelOracle):
    """Wraps any ``labels = fn(X)`` callable; handy for hand-built test oracles."""

    def __init__(self, fn, budget: Optional[int] = None):
        super().__init__(budget)
        self._fn = fn

    def _labels(self, X):
        return np.asarray(self._fn(X), dtype=np.int64)


class LocalOracle(LogitOracle):
    """Query access to a model held in memory."""

    def __init__(self, model: Model, budget: Optional[int] = None):
        super().__init__(budget)
        self._model = model

    @property
    def input_dim(self) -> int:
        return self._model.arch.input_dim

    @property
    def num_classes(self) -> int:
        return self._model.arch.num_classes

    def _logits(self, X):
        return forward(self._model, X)


class GradientOracle(LocalOracle):
    """White-box access: label queries plus input gradients of a local model."""

    def logits_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self._charge(len(X))
        return forward(self._model, X)

    def input_gradient(self, X, objective: str, k) -> np.ndarray:
        return input_gradient(self._model, X, objective, k)
