"""Dense linear-algebra kernels: norms, Jacobi SVD, power iteration, ranks.

Matrices are plain 2-D ``numpy.float64`` arrays. Every public function
validates its input with :func:`as_matrix`, which rejects non-finite data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import (
    ConstantInput,
    DimensionTooLarge,
    LengthMismatch,
    NonConvergence,
    NonFiniteMatrix,
    ZeroMatrix,
)

MAX_DIM = 4096
DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000
DEFAULT_RANK_THRESHOLD = 1e-6

_EPS = np.finfo(np.float64).eps
# below this (after rescaling to unit max-entry) a Jacobi column is treated as exactly zero
_TINY_COLUMN = math.sqrt(np.finfo(np.float64).tiny)
_MAX_SWEEPS = 80


def as_matrix(w) -> np.ndarray:
    """Return ``w`` as a validated 2-D float64 array (no copy when possible)."""
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteMatrix("matrix contains NaN or Inf entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def frobenius_norm(w) -> float:
    w = as_matrix(w)
    return math.sqrt(_sum_squares(w))


def _sum_squares(w: np.ndarray) -> float:
    return float(np.sum(w * w))


def _top_gram_eigenvalue(w: np.ndarray, tol: float, max_iter: int, seed) -> float:
    """Largest eigenvalue of ``w.T @ w`` (i.e. sigma_1 squared) by power iteration.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    The quotient is evaluated as ``|w x|^2 / |x|^2`` with the same ``x`` so
    exact cases (identity, rank one) come out exact.
    """
    if w.shape[0] < w.shape[1]:
        w = w.T
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(w.shape[1])
    x /= np.linalg.norm(x)
    prev = None
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = w @ x
        lam = float(y @ y) / float(x @ x)
        if lam == 0.0:
            if not np.any(w):
                return 0.0
            # start vector landed in the null space; pick a fresh one
            x = rng.standard_normal(w.shape[1])
            x /= np.linalg.norm(x)
            continue
        if prev is not None and abs(lam - prev) <= tol * lam:
            return lam
        prev = lam
        z = w.T @ y
        x = z / np.linalg.norm(z)
    raise NonConvergence(max_iter, math.sqrt(lam))


def _top_eigenvalue_with_restart(w: np.ndarray, tol: float, max_iter: int, seed: int) -> float:
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    try:
        return _top_gram_eigenvalue(w, tol, max_iter, seed)
    except NonConvergence:
        return _top_gram_eigenvalue(w, tol, max_iter, [seed, 1])


def spectral_norm(w, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, seed: int = 0) -> float:
    """Largest singular value via power iteration on ``w.T @ w``.

    Raises :class:`NonConvergence` if neither the seeded start nor one
    restart meets ``tol`` within ``max_iter`` iterations.
    """
    w = as_matrix(w)
    return math.sqrt(_top_eigenvalue_with_restart(w, tol, max_iter, seed))


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint column pairings covering every pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_columns(a: np.ndarray, want_v: bool):
    """One-sided Jacobi on a tall matrix ``a`` (rows >= cols).

    Returns the orthogonalized columns as rows of ``gt`` and, optionally,
    the accumulated right rotations as rows of ``vt``.
    """
    m, n = a.shape
    gt = np.array(a.T, dtype=np.float64, order="C")
    vt = np.eye(n) if want_v else None
    if n == 1:
        return gt, vt
    tol = _EPS * m
    schedule = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            gp = gt[p]
            gq = gt[q]
            alpha = np.einsum("ij,ij->i", gp, gp)
            beta = np.einsum("ij,ij->i", gq, gq)
            gamma = np.einsum("ij,ij->i", gp, gq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            gp, gq = gp[active], gq[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            # tiny gamma can overflow zeta to inf, which correctly yields t = 0
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = c[:, None]
            s = s[:, None]
            gt[p] = c * gp - s * gq
            gt[q] = s * gp + c * gq
            if want_v:
                vp, vq = vt[p], vt[q]
                vt[p] = c * vp - s * vq
                vt[q] = s * vp + c * vq
        if not rotated:
            break
    return gt, vt


def _check_dims(w: np.ndarray) -> None:
    if max(w.shape) > MAX_DIM:
        raise DimensionTooLarge(f"matrix shape {w.shape} exceeds the {MAX_DIM} limit")


def _complete_orthonormal(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill columns ``missing`` of ``u`` with unit vectors orthogonal to the rest."""
    m = u.shape[0]
    have = [j for j in range(u.shape[1]) if j not in set(missing.tolist())]
    basis = u[:, have]
    for j in missing:
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                if basis.shape[1]:
                    cand -= basis @ (basis.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 0.5:
                u[:, j] = cand / norm
                basis = np.column_stack([basis, u[:, j]])
                break


def svd(w) -> SvdResult:
    """Thin SVD by one-sided Jacobi on the taller orientation.

    Singular values come back sorted non-increasing; ``left_vectors`` is
    rows x k and ``right_vectors`` cols x k with k = min(rows, cols).
    """
    w = as_matrix(w)
    _check_dims(w)
    transposed = w.shape[1] > w.shape[0]
    a = w.T if transposed else w
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        m, n = a.shape
        sigma = np.zeros(n)
        u = np.eye(m, n)
        v = np.eye(n)
    else:
        gt, vt = _jacobi_columns(a / scale, want_v=True)
        norms = np.sqrt(np.einsum("ij,ij->i", gt, gt))
        order = np.argsort(-norms, kind="stable")
        norms = norms[order]
        gt = gt[order]
        v = vt[order].T
        small = norms <= _TINY_COLUMN
        u = np.zeros((a.shape[0], a.shape[1]))
        ok = ~small
        u[:, ok] = (gt[ok] / norms[ok, None]).T
        sigma = np.where(small, 0.0, norms) * scale
        if small.any():
            _complete_orthonormal(u, np.flatnonzero(small))
    if transposed:
        u, v = v, u
    return SvdResult(sigma, u, v)


def singular_values(w) -> np.ndarray:
    """Singular values only (no vector accumulation), sorted non-increasing."""
    w = as_matrix(w)
    _check_dims(w)
    a = w.T if w.shape[1] > w.shape[0] else w
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return np.zeros(a.shape[1])
    gt, _ = _jacobi_columns(a / scale, want_v=False)
    norms = np.sqrt(np.einsum("ij,ij->i", gt, gt))
    norms[norms <= _TINY_COLUMN] = 0.0
    return -np.sort(-norms) * scale


def stable_rank(w, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, seed: int = 0) -> float:
    """Squared Frobenius norm over squared spectral norm."""
    w = as_matrix(w)
    fro2 = _sum_squares(w)
    if fro2 == 0.0:
        raise ZeroMatrix("stable rank is undefined for the zero matrix")
    lam = _top_eigenvalue_with_restart(w, tol, max_iter, seed)
    return fro2 / lam


def effective_rank(w, rel_threshold: float = DEFAULT_RANK_THRESHOLD) -> int:
    """Number of singular values above ``rel_threshold * sigma_1``."""
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError("rel_threshold must lie in (0, 1)")
    sigma = singular_values(w)
    if sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > rel_threshold * sigma[0]))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise LengthMismatch(f"lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise LengthMismatch("need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInput("pearson correlation is undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def generalization_indicator(weights: Sequence, seed: int = 0) -> float:
    """Product of spectral norms times the sum of stable ranks."""
    if len(weights) == 0:
        raise ValueError("need at least one matrix")
    lams = []
    total_srank = 0.0
    for w in weights:
        w = as_matrix(w)
        fro2 = _sum_squares(w)
        if fro2 == 0.0:
            raise ZeroMatrix("stable rank is undefined for the zero matrix")
        lam = _top_eigenvalue_with_restart(w, DEFAULT_TOL, DEFAULT_MAX_ITER, seed)
        lams.append(lam)
        total_srank += fro2 / lam
    return math.sqrt(math.prod(lams)) * total_srank
