import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guikv.numerics import (
    budget_count,
    nearest_rank_percentile,
    project_residual_norms,
    robust_ceil,
    softmax_temp,
    standardize,
    thin_qr,
    top_k_indices,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_robust_ceil_ignores_roundoff():
    assert 0.07 * 100 > 7
    assert robust_ceil(0.07 * 100) == 7
    assert robust_ceil(3.2) == 4
    assert robust_ceil(0.0) == 0


@given(st.sampled_from([0.01, 0.03, 0.05, 0.1, 0.15, 0.2, 0.4, 0.8, 1.0]), st.integers(1, 5000))
def test_budget_matches_exact_rational(gamma, n):
    assert budget_count(gamma, n) == min(n, math.ceil(Fraction(repr(gamma)) * n))


def test_standardize_population_std():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    expected = (v - 2.5) / (math.sqrt(1.25) + 1e-8)
    np.testing.assert_allclose(standardize(v), expected, rtol=0, atol=1e-15)


def test_standardize_constant_and_empty():
    np.testing.assert_array_equal(standardize(np.full(5, 7.0)), np.zeros(5))
    with pytest.raises(ValueError, match="empty vector"):
        standardize(np.array([]))


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0.1, 10))
def test_softmax_against_mpmath(values, tau):
    got = softmax_temp(np.array(values), tau)
    mpmath.mp.dps = 40
    ex = [mpmath.e ** (mpmath.mpf(v) / tau) for v in values]
    z = mpmath.fsum(ex)
    ref = np.array([float(e / z) for e in ex])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-300)
    assert abs(got.sum() - 1) < 1e-12


def test_softmax_rejects_bad_tau():
    with pytest.raises(ValueError):
        softmax_temp(np.ones(3), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 14), st.integers(0, 10_000))
def test_thin_qr_spans_same_space_as_numpy(d, cols, r, seed):
    m = np.random.default_rng(seed).standard_normal((d, cols))
    q = thin_qr(m, r)
    k = min(r, d, cols)
    assert q.shape == (d, k)
    np.testing.assert_allclose(q.T @ q, np.eye(k), atol=1e-12)
    ref, _ = np.linalg.qr(m[:, :k])
    np.testing.assert_allclose(q @ q.T, ref @ ref.T, atol=1e-10)


def test_thin_qr_drops_dependent_columns():
    a = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    q = thin_qr(a, 3)
    assert q.shape == (3, 2)
    assert thin_qr(np.zeros((4, 3)), 3).shape == (4, 0)


def test_residual_norms_in_span_are_zero():
    rng = np.random.default_rng(1)
    basis = rng.standard_normal((6, 3))
    q = thin_qr(basis, 3)
    keys = (basis @ rng.standard_normal((3, 5))).T
    assert project_residual_norms(keys, q).max() < 1e-9


def test_nearest_rank_percentile():
    v = np.array([5.0, 1.0, 4.0, 2.0, 3.0])
    assert nearest_rank_percentile(v, 0.8) == 4.0   # ceil(4) - 1 = 3
    assert nearest_rank_percentile(v, 0.5) == 3.0   # ceil(2.5) - 1 = 2
    assert nearest_rank_percentile(v, 0.0) == 1.0
    assert nearest_rank_percentile(v, 1.0) == 5.0
    with pytest.raises(ValueError, match="no previous-frame tokens"):
        nearest_rank_percentile(np.array([]), 0.5)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.integers(0, 45))
def test_top_k_ties_prefer_lower_index(values, k):
    got = top_k_indices(np.array(values, dtype=float), k)
    ref = sorted(sorted(range(len(values)), key=lambda i: (-values[i], i))[:min(k, len(values))])
    assert got.tolist() == ref
