"""Regression scores and RMSE-based continual-learning metrics.

All CL metrics read an accuracy matrix ``a`` with ``a[i, j]`` the RMSE on
task ``j`` after training through task ``i`` (0-based here). Lower is better
throughout, so negative transfer values mean helpful transfer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import DimensionError


class MetricDomainError(ValueError):
    pass


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise DimensionError("rmse of zero samples")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def r2(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricDomainError("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((target - pred) ** 2)) / ss_tot


@dataclass
class AccuracyMatrix:
    a: np.ndarray
    a_prime: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise DimensionError(f"accuracy matrix must be square, got {self.a.shape}")
        if not np.all(np.isfinite(self.a)) or np.any(self.a < 0):
            raise ValueError("accuracy matrix entries must be finite and non-negative")
        if self.a_prime is not None:
            self.a_prime = np.asarray(self.a_prime, dtype=np.float64)
            if self.a_prime.shape != (self.T,):
                raise DimensionError("a_prime must have one entry per task")

    @property
    def T(self) -> int:
        return self.a.shape[0]


def _matrix(m) -> AccuracyMatrix:
    return m if isinstance(m, AccuracyMatrix) else AccuracyMatrix(m)


def bwt(m) -> float:
    """Mean over earlier tasks of (final RMSE - RMSE right after learning the task)."""
    m = _matrix(m)
    T = m.T
    if T < 2:
        raise MetricDomainError("BWT needs at least two tasks")
    j = np.arange(T - 1)
    return float(np.mean(m.a[T - 1, j] - m.a[j, j]))


def fwt(m) -> float:
    """Mean over tasks 2..T of (RMSE before training on the task - RMSE at random init)."""
    m = _matrix(m)
    T = m.T
    if T < 2:
        raise MetricDomainError("FWT needs at least two tasks")
    if m.a_prime is None:
        raise MetricDomainError("FWT needs the random-initialisation RMSE vector")
    j = np.arange(1, T)
    return float(np.mean(m.a[j - 1, j] - m.a_prime[j]))


def forgetting(m) -> tuple[np.ndarray, float]:
    """Per-task forgetting and its mean over tasks 1..T-1.

    f_j = a[T-1, j] - min over l in [j, T-2] of a[l, j]: the final error minus
    the best error reached on task j before the last task. The last task has
    f = 0.
    """
    m = _matrix(m)
    T = m.T
    if T < 2:
        raise MetricDomainError("forgetting needs at least two tasks")
    f = np.zeros(T)
    for j in range(T - 1):
        f[j] = m.a[T - 1, j] - m.a[j:T - 1, j].min()
    return f, float(f[:-1].mean())


def bwt_series(m) -> np.ndarray:
    """BWT computed after each task t = 2..T on the leading t x t block (NaN for the first task)."""
    m = _matrix(m)
    out = np.full(m.T, np.nan)
    for t in range(2, m.T + 1):
        out[t - 1] = bwt(m.a[:t, :t])
    return out


def fwt_series(m) -> np.ndarray:
    """Per-task forward-transfer terms a[j-1, j] - a'[j] (NaN for the first task)."""
    m = _matrix(m)
    if m.a_prime is None:
        raise MetricDomainError("FWT needs the random-initialisation RMSE vector")
    out = np.full(m.T, np.nan)
    j = np.arange(1, m.T)
    out[j] = m.a[j - 1, j] - m.a_prime[j]
    return out
