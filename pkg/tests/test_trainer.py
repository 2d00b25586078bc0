from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftcl.data import DomainError, SuiteConfig, SynthConfig, TaskSequence, make_windows, synthesize_experiment, synthesize_suite
from driftcl.drift import DriftGateConfig
from driftcl.engine import mse_loss
from driftcl import trainer
from driftcl.model import TwoPartModel
from driftcl.trainer import (
    ContinualRunState, ProtocolError, ReplayBuffer, TrainerConfig, _fit_dynamic, adaptive_update, base_snapshot,
    composite_loss, process_task, run_continual, train_base, train_baseline, train_rr_variant, train_tl,
)

L = 5
TEMPLATE = SynthConfig(n_cycles=2, samples_per_cycle=40)


def small_cfg(**kw):
    base = dict(base_epochs=3, static_phase_epochs=2, dynamic_phase_epochs=2, rr_epochs=2, window_length=L,
                batch_size=16, a_prime_inits=1, seed=0)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture(scope="module")
def tasks():
    tr, te = synthesize_suite(SuiteConfig(template=TEMPLATE, n_experiments=4, offset_range=(-0.5, 0.5)), seed=2)
    return TaskSequence.from_experiments(tr, te)


def values(model):
    return [p.value.copy() for p in model.parameters()]


def same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def fresh_state(tasks, **kw):
    cfg = small_cfg(**kw)
    model = TwoPartModel(L, seed=0)
    tests = [make_windows(t, L) for t in tasks.test]
    return train_base(model, tasks.train[0], cfg, tests), cfg


# -- config -------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(base_epochs=0), dict(static_phase_epochs=0), dict(lwf_weight=-1.0),
                                 dict(batch_size=0), dict(rr_epochs=0)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        small_cfg(**bad).validate()


def test_rr_epochs_default():
    assert TrainerConfig(static_phase_epochs=3, dynamic_phase_epochs=4).rr_task_epochs == 3
    assert TrainerConfig(rr_epochs=5).rr_task_epochs == 5


# -- composite loss ---------------------------------------------------------------

def test_loss_decomposition_reduces_to_mse():
    rng = np.random.default_rng(0)
    p, y, t = rng.normal(size=(3, 10))
    loss, g, gr = composite_loss(p, y, None, None, t, lwf_weight=0.0)
    assert loss == mse_loss(p, y) and gr is None
    np.testing.assert_allclose(g, 2 * (p - y) / 10)


def test_loss_terms_add():
    rng = np.random.default_rng(1)
    p, y, t = rng.normal(size=(3, 6))
    pr, yr = rng.normal(size=(2, 4))
    loss, _, gr = composite_loss(p, y, pr, yr, t, lwf_weight=0.5)
    assert loss == pytest.approx(mse_loss(p, y) + mse_loss(pr, yr) + 0.5 * np.mean(np.abs(p - t)))
    assert gr.shape == (4,)


def test_lwf_is_zero_when_student_equals_teacher():
    p = np.array([1.0, 2.0, 3.0])
    assert composite_loss(p, p, teacher_new=p, lwf_weight=3.0)[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.integers(0, 1000))
def test_loss_gradient_matches_finite_difference(lam, seed):
    rng = np.random.default_rng(seed)
    p, y, t = rng.normal(size=(3, 5))
    _, g, _ = composite_loss(p, y, None, None, t, lam)
    h = 1e-7
    for k in range(5):
        e = np.eye(5)[k] * h
        num = (composite_loss(p + e, y, None, None, t, lam)[0] - composite_loss(p - e, y, None, None, t, lam)[0]) / (2 * h)
        assert g[k] == pytest.approx(num, rel=1e-5, abs=1e-6)


# -- replay buffer ----------------------------------------------------------------

def test_buffer_stores_first_cycle():
    e = synthesize_experiment(TEMPLATE)
    buf = ReplayBuffer()
    buf.enrol(3, e, L)
    entry = buf.entries[3]
    assert len(buf) == 1 and 3 in buf
    assert len(entry.data) == 40 - L + 1
    np.testing.assert_array_equal(entry.distribution.samples, e.sensor[:40])
    buf.enrol(3, e, L)
    assert len(buf) == 1


# -- protocol invariants -------------------------------------------------------------

def test_train_base_keeps_head_ones_and_enrols(tasks):
    state, _ = fresh_state(tasks)
    m = state.model
    for p in m.parameters("dynamic"):
        assert np.all(p.value == (1.0 if p.name.endswith("weight") else 0.0))
    assert m.is_frozen("static") and m.is_frozen("dynamic")
    assert len(state.buffer) == 1 and state.matrix.shape == (1, 4)


def test_train_base_reduces_loss(tasks):
    state, _ = fresh_state(tasks, base_epochs=10)
    hist = state.history["base"]
    assert hist[-1] < hist[0]


def test_train_base_requires_fresh_model(tasks):
    m = TwoPartModel(L)
    m.set_frozen("dynamic", False)
    with pytest.raises(ProtocolError):
        train_base(m, tasks.train[0], small_cfg())


def test_train_base_short_task():
    e = synthesize_experiment(SynthConfig(n_cycles=1, samples_per_cycle=4))
    with pytest.raises(DomainError):
        train_base(TwoPartModel(L), e, small_cfg())


def test_gate_false_leaves_model_bit_identical(tasks):
    state, cfg = fresh_state(tasks)
    before = values(state.model)
    out = process_task(state, tasks.train[0], cfg, 9)
    assert not out.decision
    assert same(before, values(state.model))
    assert len(state.buffer) == 1
    np.testing.assert_array_equal(state.matrix[1], state.matrix[0])


def test_shifted_base_adapts_and_grows_buffer(tasks):
    state, cfg = fresh_state(tasks)
    b = tasks.train[0]
    shifted = replace(b, sensor=b.sensor + 2 * state.gate.threshold)
    out = process_task(state, shifted, cfg, 1)
    assert out.decision and len(state.buffer) == 2


def test_phases_touch_only_their_part(tasks, monkeypatch):
    state, cfg = fresh_state(tasks)
    m = state.model
    static0 = [p.value.copy() for p in m.parameters("static")]
    dyn0 = [p.value.copy() for p in m.parameters("dynamic")]
    phase_a_end = {}

    orig = trainer._fit_dynamic

    def spy(model, *a, **k):
        phase_a_end["static"] = [p.value.copy() for p in model.parameters("static")]
        phase_a_end["dynamic"] = [p.value.copy() for p in model.parameters("dynamic")]
        return orig(model, *a, **k)

    monkeypatch.setattr(trainer, "_fit_dynamic", spy)
    adaptive_update(state, tasks.train[1], cfg, 1)
    # phase A moved the static part only
    assert same(phase_a_end["dynamic"], dyn0)
    assert not same(phase_a_end["static"], static0)
    # phase B never moves the static part
    assert same([p.value for p in m.parameters("static")], phase_a_end["static"])
    assert not same([p.value for p in m.parameters("dynamic")], dyn0)
    assert m.is_frozen("static") and m.is_frozen("dynamic")


def test_teacher_is_immutable(tasks):
    state, cfg = fresh_state(tasks)
    probe = make_windows(tasks.test[1], L).windows[:20]
    before = state.model.predict(probe)
    adaptive_update(state, tasks.train[1], cfg, 1)
    np.testing.assert_array_equal(state.teacher.predict(probe), before)
    assert not np.array_equal(state.model.predict(probe), before)


def test_adaptive_update_needs_buffer(tasks):
    cfg = small_cfg()
    state = ContinualRunState(TwoPartModel(L), ReplayBuffer(), DriftGateConfig(1.0))
    with pytest.raises(ProtocolError):
        adaptive_update(state, tasks.train[1], cfg)
    with pytest.raises(ProtocolError):
        process_task(state, tasks.train[1], cfg, 1)


def test_dynamic_fit_without_extras_is_plain_fine_tuning(tasks):
    # with no replay and lwf = 0 the objective is MSE on the new task only
    state, cfg = fresh_state(tasks)
    m = state.model
    m.set_frozen("dynamic", False)
    data = make_windows(tasks.train[1], L)
    feats = m.features(data.windows)
    loss0 = mse_loss(m.head(feats), data.targets)
    hist = _fit_dynamic(m, feats, data.targets, 1, np.random.default_rng(0), len(data))
    assert hist[0] == pytest.approx(loss0, rel=1e-12)


# -- runners -------------------------------------------------------------------------

def test_run_continual_shapes_and_buffer(tasks):
    cfg = small_cfg()
    r = run_continual(tasks, cfg)
    assert r.matrix.shape == (4, 4) and r.a_prime.shape == (4,)
    fired = sum(g.decision for g in r.gate_log)
    assert r.buffer_size == fired + 1 and len(r.gate_log) == 3


def test_all_gates_firing_fill_buffer(tasks):
    r = run_continual(tasks, small_cfg(threshold=1e-9))
    assert all(g.decision for g in r.gate_log) and r.buffer_size == 4


def test_run_continual_is_deterministic(tasks):
    cfg = small_cfg(threshold=1e-9)
    np.testing.assert_array_equal(run_continual(tasks, cfg).matrix, run_continual(tasks, cfg).matrix)


def test_rr_adaptive_true_is_run_continual(tasks):
    cfg = small_cfg(threshold=1e-9)
    base = base_snapshot(tasks, cfg)
    np.testing.assert_array_equal(train_rr_variant(tasks, cfg, True, base).matrix,
                                  run_continual(tasks, cfg, base).matrix)
    # a fresh base training gives the same bits as the shared one
    np.testing.assert_array_equal(run_continual(tasks, cfg).matrix, run_continual(tasks, cfg, base).matrix)


def test_rr_without_adaptive_consults_buffer(tasks):
    r = train_rr_variant(tasks, small_cfg(), False)
    assert r.buffer_size == 4 and r.matrix.shape == (4, 4)


def test_tl_static_part_never_changes(tasks):
    r = train_tl(tasks, small_cfg())
    static = [k for k in r.stages[0].values if k.startswith("static")]
    for s in r.stages[1:]:
        for k in static:
            np.testing.assert_array_equal(s.values[k], r.stages[0].values[k])
    assert not np.array_equal(r.stages[-1].values["dynamic.out.weight"], r.stages[0].values["dynamic.out.weight"])


def test_baseline_is_tiled_and_evaluation_read_only(tasks):
    r = train_baseline(tasks, small_cfg())
    assert np.all(r.matrix == r.matrix[0])
    before = values(r.model)
    r.model.predict(make_windows(tasks.test[1], L).windows)
    assert same(before, values(r.model))
