"""Minimal reverse-mode autodiff over numpy arrays.

Each op computes its value eagerly and, when any input needs a gradient,
appends a closure to the tape that maps the output gradient to input
gradients. ``Tape.backward`` replays those closures in reverse order.
A tape can be consumed only once.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..errors import ShapeMismatch, TapeConsumed

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Var:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, name={self.name!r}, requires_grad={self.requires_grad})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    def __init__(self, enabled: bool = True):
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._leaves: list[Var] = []
        self.enabled = enabled
        self.consumed = False

    # -- construction -------------------------------------------------
    def leaf(self, value, name: str | None = None, requires_grad: bool = False) -> Var:
        requires_grad = requires_grad and self.enabled
        var = Var(np.asarray(value, dtype=np.float64), requires_grad, name)
        if requires_grad:
            self._leaves.append(var)
        return var

    def _emit(self, value: np.ndarray, parents: tuple[Var, ...], backward: Callable) -> Var:
        if self.consumed:
            raise TapeConsumed("tape already used for a backward pass")
        needs = any(p.requires_grad for p in parents)
        out = Var(value, needs)
        if needs:
            self._records.append((out, parents, backward))
        return out

    # -- ops ------------------------------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        sa, sb = a.shape, b.shape
        return self._emit(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._emit(av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a: Var, c: float) -> Var:
        return self._emit(a.value * c, (a,), lambda g: (g * c,))

    def linear(self, x: Var, w: Var) -> Var:
        """``x @ w.T`` for x of shape (..., k) and w of shape (d, k)."""
        xv, wv = x.value, w.value
        if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
            raise ShapeMismatch(f"cannot apply weight {wv.shape} to input {xv.shape}")

        def backward(g):
            gx = g @ wv
            gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
            return gx, gw

        return self._emit(xv @ wv.T, (x, w), backward)

    def matmul(self, a: Var, b: Var) -> Var:
        """Batched ``a @ b`` with identical leading dimensions."""
        av, bv = a.value, b.value

        def backward(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

        return self._emit(av @ bv, (a, b), backward)

    def reshape(self, a: Var, shape: tuple[int, ...]) -> Var:
        old = a.shape
        return self._emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def swapaxes(self, a: Var, i: int, j: int) -> Var:
        return self._emit(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))

    def slice(self, a: Var, index) -> Var:
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        return self._emit(a.value[index], (a,), backward)

    def softmax(self, a: Var) -> Var:
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return self._emit(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    def layernorm(self, x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
        xv = x.value
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        gv = gain.value
        n = xv.shape[-1]

        def backward(g):
            g_gain = (g * xhat).reshape(-1, n).sum(axis=0)
            g_bias = g.reshape(-1, n).sum(axis=0)
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            return gx, g_gain, g_bias

        return self._emit(xhat * gv + bias.value, (x, gain, bias), backward)

    def gelu(self, a: Var) -> Var:
        """Tanh approximation of GELU."""
        x = a.value
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        y = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x ** 2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return self._emit(y, (a,), backward)

    def mean(self, a: Var, axis: int) -> Var:
        shape = a.shape
        n = shape[axis]

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

        return self._emit(a.value.mean(axis=axis), (a,), backward)

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
        z = logits.value
        labels = np.asarray(labels, dtype=np.intp)
        m = z.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
        rows = np.arange(z.shape[0])
        loss = float(np.mean(lse - z[rows, labels]))

        def backward(g):
            p = np.exp(z - lse[:, None])
            p[rows, labels] -= 1.0
            return (g * p / z.shape[0],)

        return self._emit(np.asarray(loss), (logits,), backward)

    def binary_cross_entropy(self, logits: Var, targets: np.ndarray) -> Var:
        """Mean sigmoid cross-entropy over every (example, label) pair."""
        z = logits.value
        t = np.asarray(targets, dtype=np.float64)
        loss = float(np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))

        def backward(g):
            sig = 0.5 * (1.0 + np.tanh(0.5 * z))
            return (g * (sig - t) / z.size,)

        return self._emit(np.asarray(loss), (logits,), backward)

    # -- reverse pass ---------------------------------------------------
    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        if self.consumed:
            raise TapeConsumed("tape already used for a backward pass")
        if loss.value.size != 1:
            raise ShapeMismatch("backward needs a scalar loss")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        result = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.value)
            result[leaf.name] = np.array(g, dtype=np.float64).reshape(leaf.value.shape)
        self._records.clear()
        return result


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)
