"""Experiment datasets: CSV I/O, windowing, angle geometry, hysteresis and synthesis."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

CSV_COLUMNS = ("t", "sensor", "angle", "cycle")


class FormatError(ValueError):
    """Malformed input file."""


class DomainError(ValueError):
    """Input outside the domain of an operation."""


class ConfigError(ValueError):
    pass


class Sample(NamedTuple):
    t: int
    sensor: float
    angle: float
    cycle: int


@dataclass
class ExperimentDataset:
    """Time-ordered samples of one experiment, stored column-wise."""

    experiment_id: int
    t: np.ndarray
    sensor: np.ndarray
    angle: np.ndarray
    cycle: np.ndarray
    n_cycles: int = 0

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.int64)
        self.sensor = np.asarray(self.sensor, dtype=np.float64)
        self.angle = np.asarray(self.angle, dtype=np.float64)
        self.cycle = np.asarray(self.cycle, dtype=np.int64)
        n = len(self.t)
        if not (len(self.sensor) == len(self.angle) == len(self.cycle) == n):
            raise ValueError("column lengths differ")
        if n and not self.n_cycles:
            self.n_cycles = int(self.cycle.max()) + 1

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> Iterator[Sample]:
        for row in zip(self.t, self.sensor, self.angle, self.cycle):
            yield Sample(int(row[0]), float(row[1]), float(row[2]), int(row[3]))

    def cycle_slice(self, k: int) -> np.ndarray:
        """Indices of the samples belonging to cycle ``k``."""
        return np.flatnonzero(self.cycle == k)

    def equals(self, other: "ExperimentDataset") -> bool:
        return (
            self.experiment_id == other.experiment_id
            and self.n_cycles == other.n_cycles
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CSV_COLUMNS)
        )


@dataclass
class TaskSequence:
    """Base experiment first, then the drift experiments in their original order."""

    train: list[ExperimentDataset]
    test: list[ExperimentDataset]
    base_index: int = 0

    def __post_init__(self) -> None:
        if len(self.train) != len(self.test) or not self.train:
            raise ValueError("train and test lists must be non-empty and of equal length")

    def __len__(self) -> int:
        return len(self.train)

    @classmethod
    def from_experiments(cls, train: Sequence[ExperimentDataset], test: Sequence[ExperimentDataset],
                         base_index: int | None = None) -> "TaskSequence":
        if base_index is None:
            base_index = select_base(train)
        order = [base_index] + [i for i in range(len(train)) if i != base_index]
        return cls([train[i] for i in order], [test[i] for i in order], base_index)


@dataclass
class WindowedDataset:
    windows: np.ndarray  # (n, L, 1)
    targets: np.ndarray  # (n,)
    end_index: np.ndarray  # sample index of each window's last timestep

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(self.windows[idx], self.targets[idx], self.end_index[idx])


# ---------------------------------------------------------------------------
# geometry


def bending_angle(a: Sequence[float], b: Sequence[float]) -> float:
    """Angle in degrees between two marker vectors.

    Equal to ``acos(a.b / (|a| |b|))``; evaluated as
    ``2 atan2(|a^ - b^|, |a^ + b^|)`` on the unit vectors, which stays accurate
    for nearly parallel or antiparallel vectors where acos loses precision.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("bending_angle needs two non-zero vectors")
    ua, ub = a / na, b / nb
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(ua - ub)), float(np.linalg.norm(ua + ub))))


def polygon_area(x: np.ndarray, y: np.ndarray) -> float:
    """Absolute shoelace area of the closed polygon through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise DomainError(f"a loop needs at least 3 points, got {len(x)}")
    # centring keeps the cross products small for loops far from the origin
    x = x - x.mean()
    y = y - y.mean()
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def hysteresis_area(exp: ExperimentDataset) -> float:
    """Mean over cycles of the sensor/angle loop area."""
    areas = []
    for k in np.unique(exp.cycle):
        idx = exp.cycle_slice(int(k))
        areas.append(polygon_area(exp.sensor[idx], exp.angle[idx]))
    if not areas:
        raise DomainError("experiment has no samples")
    return float(np.mean(areas))


def select_base(experiments: Sequence[ExperimentDataset]) -> int:
    """Index of the experiment with the smallest hysteresis area; ties go to the lowest id."""
    if not experiments:
        raise DomainError("no experiments to choose from")
    keys = [(hysteresis_area(e), e.experiment_id, i) for i, e in enumerate(experiments)]
    return min(keys)[2]


# ---------------------------------------------------------------------------
# windowing


def make_windows(exp: ExperimentDataset, window_length: int) -> WindowedDataset:
    """Stride-1 sensor windows; each target is the angle at the window's last sample."""
    n, L = len(exp), int(window_length)
    if L < 1:
        raise DomainError("window length must be positive")
    if n < L:
        raise DomainError(f"experiment {exp.experiment_id} has {n} samples, fewer than window length {L}")
    windows = np.lib.stride_tricks.sliding_window_view(exp.sensor, L).copy()[:, :, None]
    end = np.arange(L - 1, n)
    return WindowedDataset(windows, exp.angle[L - 1:].copy(), end)


def cycle_windows(exp: ExperimentDataset, window_length: int, cycle: int = 0) -> WindowedDataset:
    """Windows lying entirely inside one cycle."""
    wd = make_windows(exp, window_length)
    start = wd.end_index - window_length + 1
    inside = (exp.cycle[wd.end_index] == cycle) & (exp.cycle[start] == cycle)
    if not inside.any():
        raise DomainError(f"cycle {cycle} is shorter than the window length")
    return wd.subset(np.flatnonzero(inside))


# ---------------------------------------------------------------------------
# CSV


def save_csv(exp: ExperimentDataset, path: str | Path) -> None:
    """Write ``t,sensor,angle,cycle`` rows; floats use ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in exp.samples:
            w.writerow((s.t, repr(s.sensor), repr(s.angle), s.cycle))


def load_csv(path: str | Path, experiment_id: int = 0) -> ExperimentDataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"{path}:1: missing column(s) {', '.join(missing)}")
    col = {c: header.index(c) for c in CSV_COLUMNS}
    if len(rows) < 2:
        raise FormatError(f"{path}: no data rows")
    t, sensor, angle, cycle = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            ti = int(row[col["t"]])
            ci = int(row[col["cycle"]])
            si = float(row[col["sensor"]])
            ai = float(row[col["angle"]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: bad row {row!r} ({exc})") from None
        if not (math.isfinite(si) and math.isfinite(ai)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        if t and (ti <= t[-1] or ci < cycle[-1]):
            raise FormatError(f"{path}:{lineno}: time or cycle index goes backwards")
        if ti < 0 or ci < 0:
            raise FormatError(f"{path}:{lineno}: negative index")
        t.append(ti)
        sensor.append(si)
        angle.append(ai)
        cycle.append(ci)
    return ExperimentDataset(experiment_id, t, sensor, angle, cycle)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """One synthetic experiment.

    The angle follows a triangle wave bent by ``1 - exp(-saturation * x)``.
    The sensor reading is ``gain * angle`` plus a direction-dependent bump
    ``hysteresis * sign(d angle) * angle * (1 - angle / theta_max)``, a
    constant ``offset``, a linear ``drift_slope * t`` and Gaussian noise.
    """

    n_cycles: int = 5
    samples_per_cycle: int = 320
    theta_max: float = 100.0
    gain: float = 0.02
    hysteresis: float = 0.002
    offset: float = 0.0
    drift_slope: float = 0.0
    noise_std: float = 0.005
    saturation: float = 3.0
    seed: int = 0
    experiment_id: int = 0

    def validate(self) -> None:
        if self.n_cycles < 1 or self.samples_per_cycle < 4:
            raise ConfigError("n_cycles must be >= 1 and samples_per_cycle >= 4")
        if self.theta_max <= 0 or self.hysteresis < 0 or self.noise_std < 0 or self.saturation <= 0:
            raise ConfigError("theta_max and saturation must be positive; hysteresis and noise_std non-negative")


def angle_profile(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """(angle, direction) over all samples; direction is +1 while bending, -1 while releasing."""
    n = cfg.n_cycles * cfg.samples_per_cycle
    phase = (np.arange(n) % cfg.samples_per_cycle) / cfg.samples_per_cycle
    tri = 1.0 - np.abs(2.0 * phase - 1.0)
    k = cfg.saturation
    angle = cfg.theta_max * (1.0 - np.exp(-k * tri)) / (1.0 - np.exp(-k))
    direction = np.where(phase < 0.5, 1.0, -1.0)
    return angle, direction


def synthesize_experiment(cfg: SynthConfig) -> ExperimentDataset:
    cfg.validate()
    angle, direction = angle_profile(cfg)
    n = len(angle)
    t = np.arange(n)
    rng = np.random.default_rng(cfg.seed)
    sensor = (
        cfg.gain * angle
        + cfg.hysteresis * direction * angle * (1.0 - angle / cfg.theta_max)
        + cfg.offset
        + cfg.drift_slope * t
    )
    if cfg.noise_std > 0:
        sensor = sensor + rng.normal(0.0, cfg.noise_std, size=n)
    cycle = t // cfg.samples_per_cycle
    return ExperimentDataset(cfg.experiment_id, t, sensor, angle, cycle, cfg.n_cycles)


@dataclass(frozen=True)
class SuiteConfig:
    """Nine-experiment drift suite drawn around a shared experiment template.

    Each experiment gets its own offset, slow-drift slope and hysteresis
    strength from the uniform ranges below. Train and test recordings of an
    experiment share those parameters and differ only in noise.
    """

    template: SynthConfig = field(default_factory=SynthConfig)
    n_experiments: int = 9
    offset_range: tuple[float, float] = (-0.3, 0.3)
    drift_slope_range: tuple[float, float] = (-5e-5, 5e-5)
    hysteresis_range: tuple[float, float] = (0.001, 0.003)

    def validate(self) -> None:
        self.template.validate()
        if self.n_experiments < 1:
            raise ConfigError("n_experiments must be positive")
        for lo, hi in (self.offset_range, self.drift_slope_range, self.hysteresis_range):
            if lo > hi:
                raise ConfigError("range bounds out of order")
        if self.hysteresis_range[0] < 0:
            raise ConfigError("hysteresis must be non-negative")


def suite_configs(suite: SuiteConfig, seed: int) -> list[tuple[SynthConfig, SynthConfig]]:
    """(train, test) experiment configs, deterministic in ``seed``."""
    suite.validate()
    rng = np.random.default_rng(seed)
    n = suite.n_experiments
    offsets = rng.uniform(*suite.offset_range, size=n)
    slopes = rng.uniform(*suite.drift_slope_range, size=n)
    hyst = rng.uniform(*suite.hysteresis_range, size=n)
    noise_seeds = rng.integers(0, 2**31 - 1, size=(n, 2))
    out = []
    for e in range(n):
        train = replace(suite.template, offset=float(offsets[e]), drift_slope=float(slopes[e]),
                        hysteresis=float(hyst[e]), seed=int(noise_seeds[e, 0]), experiment_id=e)
        out.append((train, replace(train, seed=int(noise_seeds[e, 1]))))
    return out


def synthesize_suite(suite: SuiteConfig, seed: int) -> tuple[list[ExperimentDataset], list[ExperimentDataset]]:
    pairs = suite_configs(suite, seed)
    return ([synthesize_experiment(tr) for tr, _ in pairs],
            [synthesize_experiment(te) for _, te in pairs])
