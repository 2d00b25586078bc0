import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import wasserstein_distance

from driftcl.data import DomainError, SynthConfig, synthesize_experiment
from driftcl.drift import (
    DriftGateConfig, EmpiricalDistribution, calibrate_threshold, incoming_distribution, should_adapt, wasserstein1,
)

samples = arrays(np.float64, st.integers(1, 40), elements=st.floats(-100, 100))


def test_identity_is_zero():
    x = np.random.default_rng(0).normal(size=33)
    assert wasserstein1(x, x) == 0.0
    assert wasserstein1(x, x[::-1]) == 0.0


def test_two_point_closed_form():
    assert wasserstein1([0, 1], [0, 3]) == 1.0


def test_shift_gives_shift():
    x = np.random.default_rng(1).normal(size=50)
    assert wasserstein1(x, x - 2.5) == pytest.approx(2.5, abs=1e-12)


def test_empty_distribution():
    with pytest.raises(DomainError):
        EmpiricalDistribution([])


@settings(max_examples=200)
@given(samples, samples)
def test_matches_scipy_oracle(a, b):
    # scipy integrates |F_a - F_b| over x; this implementation integrates quantiles
    assert wasserstein1(a, b) == pytest.approx(wasserstein_distance(a, b), rel=1e-9, abs=1e-9)


@given(samples, samples)
def test_symmetry(a, b):
    assert wasserstein1(a, b) == pytest.approx(wasserstein1(b, a), rel=1e-12, abs=1e-12)


@given(samples, samples, samples)
def test_triangle_inequality(a, b, c):
    assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-9


@given(samples, st.randoms(use_true_random=False))
def test_permutation_invariance(a, rnd):
    b = list(a)
    rnd.shuffle(b)
    assert wasserstein1(a, b) == 0.0


def test_unequal_counts_replicated_multiset_is_zero():
    a = np.array([1.0, 4.0, 2.0])
    assert wasserstein1(a, np.repeat(a, 4)) == 0.0


# -- gate ----------------------------------------------------------------------

def _base():
    return synthesize_experiment(SynthConfig(seed=3))


def test_identical_incoming_does_not_adapt():
    e = _base()
    out = should_adapt(e.sensor, {0: EmpiricalDistribution(e.sensor)}, DriftGateConfig(0.05))
    assert not out.decision and out.min_distance == 0.0 and out.nearest_task == 0


def test_shift_by_twice_threshold_adapts():
    e = _base()
    tau = 0.05
    out = should_adapt(e.sensor + 2 * tau, {0: EmpiricalDistribution(e.sensor)}, DriftGateConfig(tau))
    assert out.decision and out.min_distance == pytest.approx(2 * tau, abs=1e-12)


def test_nearest_of_two_stored_tasks():
    rng = np.random.default_rng(7)
    first, second = rng.normal(0, 1, 300), rng.normal(3, 1, 300)
    incoming = rng.normal(2.6, 1, 500)
    stored = {0: EmpiricalDistribution(first), 4: EmpiricalDistribution(second)}
    out = should_adapt(incoming, stored, DriftGateConfig(0.1))
    brute = min(stored, key=lambda k: wasserstein_distance(incoming, stored[k].samples))
    assert out.nearest_task == brute == 4
    assert out.min_distance == pytest.approx(wasserstein_distance(incoming, second), rel=1e-9)


def test_empty_store_is_an_error():
    with pytest.raises(DomainError):
        should_adapt([1.0], {}, DriftGateConfig(1.0))


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        DriftGateConfig(0.0)


@given(st.floats(0, 1), st.floats(0, 1))
def test_gate_is_monotone(d1, d2):
    stored = {0: EmpiricalDistribution([0.0])}
    cfg = DriftGateConfig(0.5)
    near, far = sorted((d1, d2))
    if not should_adapt([far], stored, cfg).decision:
        assert not should_adapt([near], stored, cfg).decision


def test_calibrated_threshold_ignores_own_cycles():
    e = _base()
    tau = calibrate_threshold(e)
    first = EmpiricalDistribution(e.sensor[e.cycle == 0])
    assert tau > 0
    assert not should_adapt(incoming_distribution(e), {0: first}, DriftGateConfig(tau)).decision


def test_incoming_fraction_takes_leading_slice():
    e = _base()
    d = incoming_distribution(e, 0.25)
    np.testing.assert_array_equal(d.samples, e.sensor[:400])
