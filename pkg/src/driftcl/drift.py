"""Wasserstein-1 drift gate on raw sensor distributions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import DomainError, ExperimentDataset


class EmpiricalDistribution:
    """Multiset of sensor readings with a cached sorted copy."""

    __slots__ = ("samples", "sorted")

    def __init__(self, samples) -> None:
        s = np.asarray(samples, dtype=np.float64).ravel()
        if s.size == 0:
            raise DomainError("empirical distribution needs at least one sample")
        self.samples = s
        self.sorted = np.sort(s)

    def __len__(self) -> int:
        return self.samples.size


def _as_dist(x) -> EmpiricalDistribution:
    return x if isinstance(x, EmpiricalDistribution) else EmpiricalDistribution(x)


def wasserstein1(a, b) -> float:
    """W1 between two empirical distributions on the line.

    Integrates |Q_a(u) - Q_b(u)| over u in (0, 1]. Both quantile functions are
    step functions with breaks at multiples of 1/n and 1/m; working in units of
    1/(n*m) makes every break an integer, so the merge is exact.
    """
    a, b = _as_dist(a), _as_dist(b)
    xa, xb = a.sorted, b.sorted
    n, m = xa.size, xb.size
    if n == m:
        return float(np.mean(np.abs(xa - xb)))
    breaks = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(breaks, prepend=0) / (n * m)
    qa = xa[(breaks - 1) // m]
    qb = xb[(breaks - 1) // n]
    return float(np.sum(widths * np.abs(qa - qb)))


@dataclass(frozen=True)
class DriftGateConfig:
    threshold: float
    incoming_fraction: float = 1.0  # leading share of the incoming experiment compared

    def __post_init__(self) -> None:
        if not self.threshold > 0:
            raise ValueError("drift threshold must be positive")
        if not 0 < self.incoming_fraction <= 1:
            raise ValueError("incoming_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class GateOutcome:
    decision: bool
    min_distance: float
    nearest_task: int
    threshold: float


def incoming_distribution(exp: ExperimentDataset, fraction: float = 1.0) -> EmpiricalDistribution:
    n = max(1, int(round(len(exp) * fraction)))
    return EmpiricalDistribution(exp.sensor[:n])


def should_adapt(incoming, stored: Mapping[int, EmpiricalDistribution], config: DriftGateConfig) -> GateOutcome:
    """Compare ``incoming`` with every stored task distribution; adapt when the nearest is beyond the threshold.

    ``stored`` may also be a replay buffer exposing ``distributions()``.
    """
    if hasattr(stored, "distributions"):
        stored = stored.distributions()
    if not stored:
        raise DomainError("no stored distributions; enrol the base task first")
    incoming = _as_dist(incoming)
    best_task, best = -1, np.inf
    for task_id, dist in stored.items():
        d = wasserstein1(incoming, dist)
        if d < best:
            best_task, best = task_id, d
    return GateOutcome(bool(best > config.threshold), float(best), int(best_task), config.threshold)


def calibrate_threshold(base: ExperimentDataset, factor: float = 3.0) -> float:
    """``factor`` times the median W1 between consecutive cycles of the base experiment."""
    cycles = [base.sensor[base.cycle_slice(int(k))] for k in np.unique(base.cycle)]
    if len(cycles) < 2:
        raise DomainError("threshold calibration needs at least two cycles")
    dists = [wasserstein1(c0, c1) for c0, c1 in zip(cycles[:-1], cycles[1:])]
    tau = factor * float(np.median(dists))
    if tau <= 0:
        raise DomainError("base cycles are identical; set the threshold explicitly")
    return tau
