"""Continual training protocol and the benchmark trainers.

The proposed method (``run_continual``):

1. ``train_base``: fit the static part on the base task through the frozen
   all-ones dynamic head, freeze it, enrol the base task in the replay buffer.
2. For each later task, ``process_task`` asks the Wasserstein gate whether the
   incoming sensor distribution is far from every stored one. If so,
   ``adaptive_update`` runs phase A (static part retrained briefly on the new
   task, dynamic frozen) and phase B (dynamic part trained on the new task plus
   every buffered cycle, with an L1 pull towards the pre-update teacher), and
   the task's first cycle is enrolled.

Benchmarks: ``train_baseline`` (one network, base task only), ``train_tl``
(frozen static part, sequential head fine-tuning, no gate, rehearsal or LWF)
and ``train_rr_variant`` (whole network trained with rehearsal and LWF, no
gate or phases).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import DomainError, ExperimentDataset, TaskSequence, WindowedDataset, cycle_windows, make_windows
from .drift import (DriftGateConfig, EmpiricalDistribution, GateOutcome, calibrate_threshold,
                    incoming_distribution, should_adapt)
from .engine import Adam, l1_loss, l1_loss_grad, mse_loss, mse_loss_grad
from .metrics import rmse
from .model import ModelSnapshot, TwoPartModel

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """A training step was called out of order."""


@dataclass
class TrainerConfig:
    base_epochs: int = 300
    static_phase_epochs: int = 20
    dynamic_phase_epochs: int = 100
    rr_epochs: int | None = None  # whole-network epochs per task of the RR variant; None -> static_phase_epochs
    lwf_weight: float = 1.0
    rehearsal: bool = True
    threshold: float | None = None  # None -> calibrate on the base task
    threshold_factor: float = 3.0
    incoming_fraction: float = 1.0
    window_length: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    a_prime_inits: int = 3
    seed: int = 0

    def validate(self) -> None:
        if min(self.base_epochs, self.static_phase_epochs, self.dynamic_phase_epochs) < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.rr_epochs is not None and self.rr_epochs < 1:
            raise ValueError("rr_epochs must be >= 1")
        if self.lwf_weight < 0:
            raise ValueError("lwf_weight must be non-negative")
        if self.window_length < 1 or self.batch_size < 1 or self.a_prime_inits < 1:
            raise ValueError("window_length, batch_size and a_prime_inits must be positive")

    @property
    def rr_task_epochs(self) -> int:
        return self.rr_epochs if self.rr_epochs is not None else self.static_phase_epochs


# ---------------------------------------------------------------------------
# replay buffer


@dataclass
class BufferEntry:
    data: WindowedDataset
    distribution: EmpiricalDistribution


class ReplayBuffer:
    """One stored cycle (windows and sensor distribution) per enrolled task."""

    def __init__(self) -> None:
        self.entries: dict[int, BufferEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, task_id: int) -> bool:
        return task_id in self.entries

    def enrol(self, task_id: int, exp: ExperimentDataset, window_length: int, cycle: int = 0) -> None:
        idx = exp.cycle_slice(cycle)
        self.entries[task_id] = BufferEntry(cycle_windows(exp, window_length, cycle),
                                            EmpiricalDistribution(exp.sensor[idx]))

    def distributions(self) -> dict[int, EmpiricalDistribution]:
        return {k: e.distribution for k, e in self.entries.items()}

    def stacked(self) -> WindowedDataset | None:
        if not self.entries:
            return None
        parts = [e.data for e in self.entries.values()]
        return WindowedDataset(np.concatenate([p.windows for p in parts]),
                               np.concatenate([p.targets for p in parts]),
                               np.concatenate([p.end_index for p in parts]))


# ---------------------------------------------------------------------------
# losses and inner loops


def composite_loss(pred_new: np.ndarray, y_new: np.ndarray,
                   pred_replay: np.ndarray | None = None, y_replay: np.ndarray | None = None,
                   teacher_new: np.ndarray | None = None, lwf_weight: float = 0.0):
    """MSE(new) + MSE(replay) + lwf_weight * L1(new, teacher).

    Returns ``(loss, grad_new, grad_replay)``; ``grad_replay`` is None when there
    is no replay batch.
    """
    loss = mse_loss(pred_new, y_new)
    g_new = mse_loss_grad(pred_new, y_new)
    if teacher_new is not None and lwf_weight > 0:
        loss += lwf_weight * l1_loss(pred_new, teacher_new)
        g_new = g_new + lwf_weight * l1_loss_grad(pred_new, teacher_new)
    g_rep = None
    if pred_replay is not None and len(pred_replay):
        loss += mse_loss(pred_replay, y_replay)
        g_rep = mse_loss_grad(pred_replay, y_replay)
    return loss, g_new, g_rep


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    return np.array_split(rng.permutation(n), max(1, math.ceil(n / batch_size)))


def _replay_batches(rng: np.random.Generator, n_replay: int, n_steps: int) -> list[np.ndarray | None]:
    # every stored window is visited once per epoch, spread over the epoch's steps
    if n_replay == 0:
        return [None] * n_steps
    return [b if len(b) else None for b in np.array_split(rng.permutation(n_replay), n_steps)]


def _fit_network(model: TwoPartModel, optimizers: Sequence[Adam], data: WindowedDataset, epochs: int,
                 rng: np.random.Generator, batch_size: int, replay: WindowedDataset | None = None,
                 teacher: np.ndarray | None = None, lwf_weight: float = 0.0) -> list[float]:
    """Mini-batch training through the whole network; only ``optimizers`` step."""
    history = []
    n_rep = len(replay) if replay is not None else 0
    for _ in range(epochs):
        batches = _batches(rng, len(data), batch_size)
        rbatches = _replay_batches(rng, n_rep, len(batches))
        total = 0.0
        for b, rb in zip(batches, rbatches):
            model.zero_grad()
            pred, cache = model.forward_train(data.windows[b])
            pr = cr = None
            if rb is not None:
                pr, cr = model.forward_train(replay.windows[rb])
            loss, g, gr = composite_loss(pred, data.targets[b],
                                         pr, None if rb is None else replay.targets[rb],
                                         None if teacher is None else teacher[b], lwf_weight)
            model.backward(cache, g)
            if gr is not None:
                model.backward(cr, gr)
            for opt in optimizers:
                opt.step()
            total += loss * len(b)
        history.append(total / len(data))
    return history


def _fit_dynamic(model: TwoPartModel, feats: np.ndarray, targets: np.ndarray, epochs: int,
                 rng: np.random.Generator, batch_size: int, replay_feats: np.ndarray | None = None,
                 replay_targets: np.ndarray | None = None, teacher: np.ndarray | None = None,
                 lwf_weight: float = 0.0) -> list[float]:
    """Train the dynamic part on precomputed static features (static part frozen)."""
    dyn, opt, scale = model.dynamic, model.dynamic_optimizer, model.output_scale
    history = []
    n_rep = 0 if replay_feats is None else len(replay_feats)
    for _ in range(epochs):
        batches = _batches(rng, len(feats), batch_size)
        rbatches = _replay_batches(rng, n_rep, len(batches))
        total = 0.0
        for b, rb in zip(batches, rbatches):
            opt.zero_grad()
            out, cache = dyn.forward(feats[b])
            pr = cr = None
            if rb is not None:
                pr, cr = dyn.forward(replay_feats[rb])
                pr = pr[:, 0] * scale
            loss, g, gr = composite_loss(out[:, 0] * scale, targets[b], pr,
                                         None if rb is None else replay_targets[rb],
                                         None if teacher is None else teacher[b], lwf_weight)
            dyn.backward(cache, g[:, None] * scale)
            if gr is not None:
                dyn.backward(cr, gr[:, None] * scale)
            opt.step()
            total += loss * len(b)
        history.append(total / len(feats))
    return history


def _rng(cfg: TrainerConfig, *key: int) -> np.random.Generator:
    # one stream per (seed, stage) so stages can be replayed independently
    return np.random.default_rng([cfg.seed, *key])


BASE_STAGE, PHASE_A, PHASE_B, TL_STAGE, RR_STAGE, BASELINE_STAGE = range(6)


def evaluate(model: TwoPartModel, tests: Iterable[WindowedDataset]) -> np.ndarray:
    return np.array([rmse(model.predict(t.windows), t.targets) for t in tests])


def _with_features(model: TwoPartModel, tests: Sequence[WindowedDataset]) -> list[np.ndarray]:
    return [model.features(t.windows) for t in tests]


def evaluate_head(model: TwoPartModel, feats: Sequence[np.ndarray], tests: Sequence[WindowedDataset]) -> np.ndarray:
    return np.array([rmse(model.head(f), t.targets) for f, t in zip(feats, tests)])


def random_init_rmse(tests: Sequence[WindowedDataset], cfg: TrainerConfig) -> np.ndarray:
    """RMSE per task of untrained models, averaged over ``cfg.a_prime_inits`` initialisations."""
    rows = []
    for k in range(cfg.a_prime_inits):
        seed = cfg.seed if k == 0 else [cfg.seed, 99, k]
        rows.append(evaluate(TwoPartModel(cfg.window_length, seed, lr=cfg.lr), tests))
    return np.mean(rows, axis=0)


# ---------------------------------------------------------------------------
# the proposed method


@dataclass
class GateRecord:
    task_id: int
    min_distance: float
    threshold: float
    decision: bool
    nearest_task: int


@dataclass
class ContinualRunState:
    model: TwoPartModel
    buffer: ReplayBuffer
    gate: DriftGateConfig
    tests: list[WindowedDataset] = field(default_factory=list)
    teacher: ModelSnapshot | None = None
    rows: list[np.ndarray] = field(default_factory=list)
    gate_log: list[GateRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    history: dict[str, list[float]] = field(default_factory=dict)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.rows)

    def _time(self, key: str, seconds: float) -> None:
        self.timings[key] = self.timings.get(key, 0.0) + seconds


def train_base(model: TwoPartModel, base_task: ExperimentDataset, cfg: TrainerConfig,
               tests: Sequence[WindowedDataset] = ()) -> ContinualRunState:
    """Fit the static part on the base task, freeze it and enrol the base task."""
    cfg.validate()
    if len(base_task) < cfg.window_length:
        raise DomainError("base task is shorter than the window length")
    if not model.is_frozen("dynamic"):
        raise ProtocolError("train_base expects a fresh model with the dynamic part frozen")
    data = make_windows(base_task, cfg.window_length)
    t0 = time.perf_counter()
    model.set_frozen("static", False)
    hist = _fit_network(model, [model.static_optimizer], data, cfg.base_epochs,
                        _rng(cfg, BASE_STAGE), cfg.batch_size)
    model.set_frozen("static", True)
    threshold = cfg.threshold if cfg.threshold is not None else calibrate_threshold(base_task, cfg.threshold_factor)
    state = ContinualRunState(model, ReplayBuffer(), DriftGateConfig(threshold, cfg.incoming_fraction), list(tests))
    state.buffer.enrol(0, base_task, cfg.window_length)
    state.history["base"] = hist
    state._time("base", time.perf_counter() - t0)
    if state.tests:
        state.rows.append(evaluate(model, state.tests))
    log.info("base training done: final loss %.4g, threshold %.4g", hist[-1], threshold)
    return state


def adaptive_update(state: ContinualRunState, task: ExperimentDataset, cfg: TrainerConfig, task_id: int = 0) -> None:
    """Phase A on the static part, then phase B on the dynamic part with rehearsal and LWF."""
    if len(state.buffer) == 0:
        raise ProtocolError("adaptive_update needs a non-empty replay buffer")
    model = state.model
    data = make_windows(task, cfg.window_length)
    state.teacher = model.snapshot()
    teacher_pred = model.predict(data.windows)

    t0 = time.perf_counter()
    model.set_frozen("dynamic", True)
    model.set_frozen("static", False)
    state.history[f"phase_a/{task_id}"] = _fit_network(
        model, [model.static_optimizer], data, cfg.static_phase_epochs, _rng(cfg, PHASE_A, task_id), cfg.batch_size)
    model.set_frozen("static", True)
    t1 = time.perf_counter()

    model.set_frozen("dynamic", False)
    replay = state.buffer.stacked() if cfg.rehearsal else None
    state.history[f"phase_b/{task_id}"] = _fit_dynamic(
        model, model.features(data.windows), data.targets, cfg.dynamic_phase_epochs, _rng(cfg, PHASE_B, task_id),
        cfg.batch_size,
        None if replay is None else model.features(replay.windows),
        None if replay is None else replay.targets,
        teacher_pred, cfg.lwf_weight)
    model.set_frozen("dynamic", True)
    state._time("phase_a", t1 - t0)
    state._time("phase_b", time.perf_counter() - t1)


def process_task(state: ContinualRunState, task: ExperimentDataset, cfg: TrainerConfig, task_id: int) -> GateOutcome:
    if len(state.buffer) == 0:
        raise ProtocolError("train_base must run before process_task")
    outcome = should_adapt(incoming_distribution(task, cfg.incoming_fraction), state.buffer, state.gate)
    state.gate_log.append(GateRecord(task_id, outcome.min_distance, outcome.threshold, outcome.decision,
                                     outcome.nearest_task))
    log.info("task %d: W1 %.4g (nearest %d), threshold %.4g -> %s", task_id, outcome.min_distance,
             outcome.nearest_task, outcome.threshold, "adapt" if outcome.decision else "test only")
    if outcome.decision:
        adaptive_update(state, task, cfg, task_id)
        state.buffer.enrol(task_id, task, cfg.window_length)
    if state.tests:
        if outcome.decision or not state.rows:
            state.rows.append(evaluate(state.model, state.tests))
        else:
            state.rows.append(state.rows[-1].copy())
    return outcome


@dataclass
class RunResult:
    """Accuracy matrix and bookkeeping of one trainer on one task sequence."""

    name: str
    matrix: np.ndarray
    a_prime: np.ndarray | None = None
    gate_log: list[GateRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    model: TwoPartModel | None = None
    stages: list[ModelSnapshot] = field(default_factory=list)
    buffer_size: int = 0

    @property
    def final_rmse(self) -> np.ndarray:
        return self.matrix[-1]


def _windows_for(tasks: TaskSequence, cfg: TrainerConfig) -> list[WindowedDataset]:
    return [make_windows(t, cfg.window_length) for t in tasks.test]


def base_snapshot(tasks: TaskSequence, cfg: TrainerConfig) -> tuple[ModelSnapshot, ContinualRunState]:
    model = TwoPartModel(cfg.window_length, cfg.seed, lr=cfg.lr)
    state = train_base(model, tasks.train[0], cfg, _windows_for(tasks, cfg))
    return model.snapshot(), state


def _resume(tasks: TaskSequence, cfg: TrainerConfig, base: tuple[ModelSnapshot, ContinualRunState] | None
            ) -> ContinualRunState:
    snap, state = base if base is not None else base_snapshot(tasks, cfg)
    model = snap.restore()
    new = ContinualRunState(model, ReplayBuffer(), state.gate, state.tests, rows=[state.rows[0].copy()])
    new.buffer.entries = dict(state.buffer.entries)
    new.timings = dict(state.timings)
    new.history = {"base": list(state.history["base"])}
    return new


def run_continual(tasks: TaskSequence, cfg: TrainerConfig,
                  base: tuple[ModelSnapshot, ContinualRunState] | None = None) -> RunResult:
    """Base training on task 0, then the gated adaptive protocol on tasks 1..T-1."""
    cfg.validate()
    state = _resume(tasks, cfg, base)
    for k in range(1, len(tasks)):
        process_task(state, tasks.train[k], cfg, k)
    return RunResult("CL", state.matrix, random_init_rmse(state.tests, cfg), state.gate_log, state.timings,
                     state.model, buffer_size=len(state.buffer))


def train_baseline(tasks: TaskSequence, cfg: TrainerConfig) -> RunResult:
    """One randomly initialised network with a single optimizer, trained on the base task only."""
    cfg.validate()
    model = TwoPartModel(cfg.window_length, cfg.seed, dynamic_init="random", lr=cfg.lr)
    opt = Adam(model.parameters(), lr=cfg.lr)
    t0 = time.perf_counter()
    _fit_network(model, [opt], make_windows(tasks.train[0], cfg.window_length), cfg.base_epochs,
                 _rng(cfg, BASELINE_STAGE), cfg.batch_size)
    elapsed = time.perf_counter() - t0
    tests = _windows_for(tasks, cfg)
    row = evaluate(model, tests)
    matrix = np.tile(row, (len(tasks), 1))
    return RunResult("baseline", matrix, random_init_rmse(tests, cfg), timings={"base": elapsed}, model=model)


def train_tl(tasks: TaskSequence, cfg: TrainerConfig,
             base: tuple[ModelSnapshot, ContinualRunState] | None = None) -> RunResult:
    """Frozen static part from base training; the dynamic head is fine-tuned on every new task in turn."""
    cfg.validate()
    state = _resume(tasks, cfg, base)
    model = state.model
    test_feats = _with_features(model, state.tests)
    stages = [model.snapshot()]
    t0 = time.perf_counter()
    for k in range(1, len(tasks)):
        data = make_windows(tasks.train[k], cfg.window_length)
        model.set_frozen("dynamic", False)
        _fit_dynamic(model, model.features(data.windows), data.targets, cfg.dynamic_phase_epochs,
                     _rng(cfg, TL_STAGE, k), cfg.batch_size)
        model.set_frozen("dynamic", True)
        state.rows.append(evaluate_head(model, test_feats, state.tests))
        stages.append(model.snapshot())
    state._time("adapt", time.perf_counter() - t0)
    return RunResult("TL", state.matrix, random_init_rmse(state.tests, cfg), timings=state.timings, model=model,
                     stages=stages)


def train_rr_variant(tasks: TaskSequence, cfg: TrainerConfig, adaptive: bool,
                     base: tuple[ModelSnapshot, ContinualRunState] | None = None) -> RunResult:
    """Rehearsal + regularisation ablation.

    ``adaptive=True`` is the full method. ``adaptive=False`` trains the whole
    network on every new task with replay and the LWF term, without the gate
    or the two freeze phases.
    """
    if adaptive:
        return run_continual(tasks, cfg, base)
    cfg.validate()
    state = _resume(tasks, cfg, base)
    model = state.model
    t0 = time.perf_counter()
    for k in range(1, len(tasks)):
        data = make_windows(tasks.train[k], cfg.window_length)
        teacher_pred = model.predict(data.windows)
        model.set_frozen("static", False)
        model.set_frozen("dynamic", False)
        _fit_network(model, [model.static_optimizer, model.dynamic_optimizer], data, cfg.rr_task_epochs,
                     _rng(cfg, RR_STAGE, k), cfg.batch_size,
                     replay=state.buffer.stacked() if cfg.rehearsal else None,
                     teacher=teacher_pred, lwf_weight=cfg.lwf_weight)
        model.set_frozen("static", True)
        model.set_frozen("dynamic", True)
        state.buffer.enrol(k, tasks.train[k], cfg.window_length)
        state.rows.append(evaluate(model, state.tests))
    state._time("adapt", time.perf_counter() - t0)
    return RunResult("RR-adaptive", state.matrix, random_init_rmse(state.tests, cfg), timings=state.timings,
                     model=model, buffer_size=len(state.buffer))
