"""Low-rank adapter pairs with stochastic partial updating (SPU).

An adapter holds ``b`` (d x r) and ``a`` (r x k) with ``delta = b @ a``.
There is no alpha/r output scaling. Under SPU only the leading
``active_rank`` columns of ``b`` and rows of ``a`` take part in a step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RankTooLarge, ShapeMismatch, SpuDisabled
from .linalg import as_matrix


@dataclass
class LoraAdapter:
    b: np.ndarray
    a: np.ndarray
    spu_enabled: bool = False
    active_rank: int = 0

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeMismatch(f"incompatible factors {self.b.shape} and {self.a.shape}")
        if self.active_rank == 0:
            self.active_rank = self.r

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    @property
    def r(self) -> int:
        return self.a.shape[0]

    def active_factors(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.active_rank
        return self.b[:, :s], self.a[:s, :]

    def reset_active_rank(self) -> None:
        self.active_rank = self.r

    def copy(self) -> "LoraAdapter":
        clone = LoraAdapter(self.b.copy(), self.a.copy(), self.spu_enabled)
        clone.active_rank = self.active_rank
        return clone


def init_adapter(d: int, k: int, r: int, seed: int, spu: bool = False) -> LoraAdapter:
    """Gaussian ``a`` (standard normal, seeded) and all-zero ``b``."""
    if d < 1 or k < 1 or r < 1:
        raise ValueError("d, k and r must be positive")
    if r > min(d, k):
        raise RankTooLarge(f"rank {r} exceeds min(d, k) = {min(d, k)}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((r, k))
    b = np.zeros((d, r))
    return LoraAdapter(b, a, spu_enabled=spu, active_rank=r)


def delta(adapter: LoraAdapter) -> np.ndarray:
    b, a = adapter.active_factors()
    return b @ a


def apply_adapted(adapter: LoraAdapter, w0, x) -> np.ndarray:
    """``(w0 + delta) @ x`` evaluated as ``w0 @ x + b_s @ (a_s @ x)``."""
    w0 = as_matrix(w0)
    x = np.asarray(x, dtype=np.float64)
    if w0.shape != (adapter.d, adapter.k):
        raise ShapeMismatch(f"base weight {w0.shape} does not match adapter ({adapter.d}, {adapter.k})")
    if x.ndim != 2 or x.shape[0] != adapter.k:
        raise ShapeMismatch(f"input of shape {x.shape} does not have {adapter.k} rows")
    b, a = adapter.active_factors()
    return w0 @ x + b @ (a @ x)


def merge(adapter: LoraAdapter, w0) -> np.ndarray:
    """Fold the full-rank product into the base weight (ignores ``active_rank``)."""
    w0 = as_matrix(w0)
    if w0.shape != (adapter.d, adapter.k):
        raise ShapeMismatch(f"base weight {w0.shape} does not match adapter ({adapter.d}, {adapter.k})")
    return w0 + adapter.b @ adapter.a


@dataclass
class SpuSampler:
    """Seeded stream of active ranks, uniform on {1..max_rank} (or {0..max_rank})."""

    rng_seed: int
    max_rank: int
    include_zero: bool = False
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.max_rank < 1:
            raise ValueError("max_rank must be positive")
        self._rng = np.random.default_rng(self.rng_seed)

    def draw(self) -> int:
        low = 0 if self.include_zero else 1
        return int(self._rng.integers(low, self.max_rank + 1))

    def clone(self) -> "SpuSampler":
        return SpuSampler(self.rng_seed, self.max_rank, self.include_zero)


def sample_active_rank(sampler: SpuSampler, adapter: LoraAdapter) -> int:
    if not adapter.spu_enabled:
        raise SpuDisabled("adapter was created without stochastic partial updating")
    if sampler.max_rank != adapter.r:
        raise ValueError(f"sampler max_rank {sampler.max_rank} != adapter rank {adapter.r}")
    adapter.active_rank = sampler.draw()
    return adapter.active_rank


def trainable_params(d: int, k: int, r: int) -> int:
    return d * r + r * k
