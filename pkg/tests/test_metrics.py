import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftcl.engine import DimensionError
from driftcl.metrics import (
    AccuracyMatrix, MetricDomainError, bwt, bwt_series, forgetting, fwt, fwt_series, r2, rmse,
)


def brute_bwt(a):
    T = len(a)
    return sum(a[T - 1][j] - a[j][j] for j in range(T - 1)) / (T - 1)


def brute_fwt(a, ap):
    T = len(a)
    return sum(a[j - 1][j] - ap[j] for j in range(1, T)) / (T - 1)


def brute_forgetting(a):
    T = len(a)
    out = []
    for j in range(T):
        if j == T - 1:
            out.append(0.0)
            continue
        best = a[j][j]
        for l in range(j + 1, T - 1):
            best = min(best, a[l][j])
        out.append(a[T - 1][j] - best)
    return out


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(DimensionError):
        rmse([1.0], [1.0, 2.0])


def test_r2_examples():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    assert r2(t, t) == 1.0
    assert r2(np.full(4, t.mean()), t) == 0.0
    with pytest.raises(MetricDomainError):
        r2(t, np.ones(4))


def test_bwt_two_tasks():
    assert bwt([[1.0, 5.0], [3.0, 2.0]]) == 2.0


def test_bwt_single_task_is_error():
    with pytest.raises(MetricDomainError):
        bwt([[1.0]])


def test_fwt_requires_a_prime():
    with pytest.raises(MetricDomainError):
        fwt([[1.0, 5.0], [3.0, 2.0]])
    assert fwt(AccuracyMatrix([[1.0, 5.0], [3.0, 2.0]], [9.0, 8.0])) == -3.0


def test_forgetting_uses_best_earlier_value():
    a = [[2.0, 0, 0], [1.0, 3.0, 0], [4.0, 3.5, 1.0]]
    f, mean = forgetting(a)
    np.testing.assert_array_equal(f, [3.0, 0.5, 0.0])
    assert mean == 1.75


def test_rejects_bad_matrices():
    with pytest.raises(DimensionError):
        AccuracyMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        AccuracyMatrix([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(ValueError):
        AccuracyMatrix([[1.0, -1.0], [0.0, 1.0]])


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 20, (5, 5))
    ap = rng.uniform(0, 20, 5)
    m = AccuracyMatrix(a, ap)
    al, apl = a.tolist(), ap.tolist()
    assert bwt(m) == pytest.approx(brute_bwt(al), rel=1e-15, abs=1e-12)
    assert fwt(m) == pytest.approx(brute_fwt(al, apl), rel=1e-15, abs=1e-12)
    np.testing.assert_allclose(forgetting(m)[0], brute_forgetting(al), rtol=0, atol=0)


mats = st.integers(2, 6).flatmap(lambda T: arrays(np.float64, (T, T), elements=st.floats(0, 100)))


@settings(max_examples=100)
@given(mats)
def test_forgetting_last_task_zero_and_constant_rows(a):
    f, _ = forgetting(a)
    assert f[-1] == 0.0
    # an unchanged model never forgets
    tiled = np.tile(a[0], (len(a), 1))
    assert np.all(forgetting(tiled)[0] <= 0)
    assert bwt(tiled) == 0.0


def test_series():
    a = np.array([[1.0, 4.0, 6.0], [2.0, 3.0, 5.0], [2.5, 3.5, 1.0]])
    s = bwt_series(a)
    assert np.isnan(s[0])
    assert s[1] == pytest.approx(1.0)
    assert s[2] == pytest.approx(bwt(a))
    fs = fwt_series(AccuracyMatrix(a, [7.0, 7.0, 7.0]))
    np.testing.assert_allclose(fs[1:], [-3.0, -2.0])
    assert np.nanmean(fs) == pytest.approx(fwt(AccuracyMatrix(a, [7.0, 7.0, 7.0])))
