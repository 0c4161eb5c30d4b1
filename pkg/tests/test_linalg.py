import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import jacobi_eigvalsh, pearson_single_pass, svd_stable_rank
from srlora.errors import (
    ConstantInput,
    DimensionTooLarge,
    LengthMismatch,
    NonConvergence,
    NonFiniteMatrix,
    ZeroMatrix,
)
from srlora.linalg import (
    effective_rank,
    frobenius_norm,
    generalization_indicator,
    pearson,
    singular_values,
    spectral_norm,
    stable_rank,
    svd,
)


def seeded(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


# -- frobenius ---------------------------------------------------------------

def test_frobenius_identity_and_diagonal():
    assert frobenius_norm(np.eye(2)) == pytest.approx(math.sqrt(2), rel=1e-15)
    assert frobenius_norm(np.diag([3.0, 4.0])) == 5.0


def test_frobenius_matches_singular_values():
    # sqrt(sum sigma^2) of default_rng(0) 6x4, from LAPACK SVD
    assert frobenius_norm(seeded(0, (6, 4))) == pytest.approx(4.195314239373888, rel=1e-12)


# -- spectral norm -------------------------------------------------------------

def test_spectral_norm_diagonal():
    assert spectral_norm(np.diag([3.0, 2.0, 1.0])) == pytest.approx(3.0, rel=1e-12)


def test_spectral_norm_homogeneity():
    w = seeded(11, (7, 5))
    assert spectral_norm(5 * w) == pytest.approx(5 * spectral_norm(w), rel=1e-9)


def test_spectral_norm_random_8x8():
    # sigma_1 of default_rng(1) 8x8, from LAPACK SVD
    assert spectral_norm(seeded(1, (8, 8))) == pytest.approx(4.705971812778535, rel=1e-8)


def test_spectral_norm_zero_matrix_is_zero():
    assert spectral_norm(np.zeros((3, 4))) == 0.0


def test_spectral_norm_reports_nonconvergence():
    w = seeded(5, (20, 20))
    with pytest.raises(NonConvergence) as info:
        spectral_norm(w, tol=1e-15, max_iter=2)
    assert info.value.iterations >= 2
    assert info.value.estimate > 0


def test_spectral_norm_rejects_bad_arguments():
    with pytest.raises(ValueError):
        spectral_norm(np.eye(2), tol=0.0)
    with pytest.raises(ValueError):
        spectral_norm(np.eye(2), max_iter=0)


def test_spectral_norm_seed_is_deterministic():
    w = seeded(9, (12, 9))
    assert spectral_norm(w, seed=3) == spectral_norm(w, seed=3)


# -- svd -----------------------------------------------------------------------

def test_svd_identity_and_diagonal():
    np.testing.assert_allclose(svd(np.eye(3)).singular_values, [1, 1, 1], rtol=1e-15)
    np.testing.assert_allclose(svd(np.diag([3.0, 2.0, 1.0])).singular_values, [3, 2, 1], rtol=1e-15)


def test_svd_squares_match_gram_eigenvalues():
    w = seeded(2, (5, 4))
    s = svd(w).singular_values
    np.testing.assert_allclose(s ** 2, jacobi_eigvalsh(w.T @ w), rtol=1e-8)
    # frozen from the Jacobi eigensolver oracle
    np.testing.assert_allclose(
        s ** 2, [9.169819536167386, 4.457324217632554, 1.8014991268713016, 0.13307150168396187], rtol=1e-8)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (9, 4), (4, 9), (16, 16), (33, 20)])
def test_svd_invariants(shape):
    w = seeded(sum(shape), shape)
    res = svd(w)
    k = min(shape)
    s = res.singular_values
    assert s.shape == (k,)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert res.left_vectors.shape == (shape[0], k)
    assert res.right_vectors.shape == (shape[1], k)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(k), atol=1e-9)
    np.testing.assert_allclose(res.right_vectors.T @ res.right_vectors, np.eye(k), atol=1e-9)
    assert np.linalg.norm(res.reconstruct() - w) <= 1e-8 * max(1.0, np.linalg.norm(w))
    np.testing.assert_allclose(s, np.linalg.svd(w, compute_uv=False), rtol=1e-10, atol=1e-12)


def test_svd_rank_deficient_keeps_orthonormal_vectors():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((10, 2)) @ rng.standard_normal((2, 6))
    res = svd(w)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(6), atol=1e-9)
    np.testing.assert_allclose(res.right_vectors.T @ res.right_vectors, np.eye(6), atol=1e-9)
    assert np.linalg.norm(res.reconstruct() - w) <= 1e-8 * np.linalg.norm(w)


def test_svd_zero_matrix():
    res = svd(np.zeros((4, 3)))
    assert np.all(res.singular_values == 0)
    np.testing.assert_allclose(res.left_vectors.T @ res.left_vectors, np.eye(3))


def test_svd_rejects_oversized_and_nonfinite():
    with pytest.raises(DimensionTooLarge):
        svd(np.zeros((4097, 1)))
    with pytest.raises(NonFiniteMatrix):
        svd(np.array([[1.0, np.nan]]))


def test_singular_values_agree_with_svd():
    w = seeded(21, (12, 30))
    np.testing.assert_allclose(singular_values(w), svd(w).singular_values, rtol=1e-12)


# -- stable rank -----------------------------------------------------------------

def test_stable_rank_identity_is_exact():
    for n in (1, 2, 5, 17, 64):
        assert stable_rank(np.eye(n)) == n


def test_stable_rank_rank_one():
    rng = np.random.default_rng(6)
    w = np.outer(rng.standard_normal(7), rng.standard_normal(4))
    assert stable_rank(w) == pytest.approx(1.0, abs=1e-9)


def test_stable_rank_diagonal():
    assert stable_rank(np.diag([2.0, 1.0, 1.0])) == pytest.approx(1.5, rel=1e-12)


def test_stable_rank_zero_matrix_raises():
    with pytest.raises(ZeroMatrix):
        stable_rank(np.zeros((3, 3)))


def test_stable_rank_range():
    w = seeded(8, (10, 6))
    assert 1.0 <= stable_rank(w) <= 6.0


matrices = st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 32 - 1)).map(
    lambda t: np.random.default_rng(t[2]).standard_normal((t[0], t[1])))


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(1e-3, 1e3), st.booleans())
def test_scale_invariance(w, eta, negate):
    eta = -eta if negate else eta
    base = stable_rank(w)
    assert abs(stable_rank(w / eta) - base) <= 1e-9 * base


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_stable_rank_lower_bounds_rank(w):
    assert stable_rank(w) <= effective_rank(w, 1e-12) + 1e-9


@settings(max_examples=40, deadline=None)
@given(matrices, st.integers(0, 2 ** 32 - 1))
def test_stable_rank_smoothness(w, seed):
    e = np.random.default_rng(seed).standard_normal(w.shape)
    e *= 1e-6 * np.linalg.norm(w) / np.linalg.norm(e)
    assert abs(stable_rank(w + e) - stable_rank(w)) <= 1e-3


@settings(max_examples=40, deadline=None)
@given(matrices)
def test_path_agreement_with_gap(w):
    s = np.linalg.svd(w, compute_uv=False)
    if len(s) > 1 and s[0] / s[1] < 1.01:
        return
    assert stable_rank(w) == pytest.approx(svd_stable_rank(w), rel=1e-7)


# -- effective rank --------------------------------------------------------------

def test_effective_rank_examples():
    assert effective_rank(np.diag([1.0, 1e-9]), 1e-6) == 1
    assert effective_rank(np.eye(6), 0.5) == 6
    assert effective_rank(np.zeros((4, 4))) == 0


def test_effective_rank_of_constructed_rank_three():
    rng = np.random.default_rng(12)
    w = sum(np.outer(rng.standard_normal(9), rng.standard_normal(11)) for _ in range(3))
    assert effective_rank(w, 1e-8) == 3
    s = np.linalg.svd(w, compute_uv=False)
    assert s[2] / s[0] > 1e-8 and s[3] / s[0] < 1e-12


def test_effective_rank_threshold_range():
    with pytest.raises(ValueError):
        effective_rank(np.eye(2), 1.0)


# -- pearson ---------------------------------------------------------------------

def test_pearson_perfect_correlations():
    assert pearson([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)


def test_pearson_noisy_linear_matches_textbook_formula():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(50)
    y = 2 * x + 0.5 * rng.standard_normal(50)
    assert pearson(x, y) == pytest.approx(pearson_single_pass(x, y), rel=1e-12)
    assert pearson(x, y) == pytest.approx(0.9748377210744232, rel=1e-12)


def test_pearson_errors():
    with pytest.raises(ConstantInput):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        pearson([1], [1])


# -- generalization indicator -----------------------------------------------------

def test_generalization_indicator_examples():
    assert generalization_indicator([np.eye(5)]) == pytest.approx(5.0, rel=1e-12)
    d = np.diag([2.0, 1.0, 1.0])
    assert generalization_indicator([d, d]) == pytest.approx(12.0, rel=1e-12)


def test_generalization_indicator_random():
    rng = np.random.default_rng(4)
    ws = [rng.standard_normal((6, 5)), rng.standard_normal((5, 5)), rng.standard_normal((4, 7))]
    # sqrt(prod sigma_1^2) * sum srank, from LAPACK SVD per matrix
    assert generalization_indicator(ws) == pytest.approx(289.1113957784607, rel=1e-9)


def test_generalization_indicator_zero_matrix():
    with pytest.raises(ZeroMatrix):
        generalization_indicator([np.eye(2), np.zeros((2, 2))])
