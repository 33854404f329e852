"""Reverse-mode automatic differentiation over per-sentence tapes.

A Tape records one dynamically built computation graph: values are
appended in topological order and every derived value carries a closure
mapping its output gradient to gradients for its parents.  Tree
topologies differ per sentence, so one tape is built per tree and
discarded after the backward sweep.  Everything runs in the dtype of
the inputs (float64 for tests and gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_SIG_CLIP = 60.0  # |x| beyond this saturates sigmoid past float64 resolution


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested op."""


@dataclass(frozen=True)
class ValueRef:
    """Handle to one value on a tape."""

    index: int
    shape: tuple[int, ...]


class Tape:
    """Append-only computation record; insertion order is topological order."""

    __slots__ = ("_values", "_parents", "_vjps")

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Optional[Callable]] = []

    def __len__(self) -> int:
        return len(self._values)

    def input(self, value) -> ValueRef:
        """Register a leaf value (parameter or constant)."""
        return self._append(np.asarray(value), (), None)

    def value(self, ref: ValueRef) -> np.ndarray:
        return self._values[ref.index]

    def _append(self, value, parents, vjp) -> ValueRef:
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return ValueRef(len(self._values) - 1, value.shape)


def _fail(op: str, *shapes) -> None:
    pretty = ", ".join(str(s) for s in shapes)
    raise ShapeMismatch(f"{op}: operand shapes do not conform: {pretty}")


def matvec(tape: Tape, matrix: ValueRef, vec: ValueRef) -> ValueRef:
    m, v = tape.value(matrix), tape.value(vec)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        _fail("matvec", m.shape, v.shape)

    def vjp(g):
        return np.outer(g, v), m.T @ g

    return tape._append(m @ v, (matrix.index, vec.index), vjp)


def add(tape: Tape, a: ValueRef, b: ValueRef) -> ValueRef:
    av, bv = tape.value(a), tape.value(b)
    if av.shape != bv.shape:
        _fail("add", av.shape, bv.shape)
    return tape._append(av + bv, (a.index, b.index), lambda g: (g, g))


def mul(tape: Tape, a: ValueRef, b: ValueRef) -> ValueRef:
    """Elementwise (Hadamard) product."""
    av, bv = tape.value(a), tape.value(b)
    if av.shape != bv.shape:
        _fail("mul", av.shape, bv.shape)

    def vjp(g):
        return g * bv, g * av

    return tape._append(av * bv, (a.index, b.index), vjp)


def sigmoid(tape: Tape, a: ValueRef) -> ValueRef:
    x = np.clip(tape.value(a), -_SIG_CLIP, _SIG_CLIP)
    y = 1.0 / (1.0 + np.exp(-x))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return tape._append(y, (a.index,), vjp)


def tanh(tape: Tape, a: ValueRef) -> ValueRef:
    y = np.tanh(tape.value(a))

    def vjp(g):
        return (g * (1.0 - y * y),)

    return tape._append(y, (a.index,), vjp)


def scale(tape: Tape, s: ValueRef, vec: ValueRef) -> ValueRef:
    """Scalar times vector."""
    sv, vv = tape.value(s), tape.value(vec)
    if sv.shape != ():
        _fail("scale", sv.shape, vv.shape)

    def vjp(g):
        return np.asarray(np.dot(np.ravel(g), np.ravel(vv))), sv * g

    return tape._append(sv * vv, (s.index, vec.index), vjp)


def vsum(tape: Tape, refs: Sequence[ValueRef]) -> ValueRef:
    """Sum of same-shaped values."""
    if not refs:
        raise ValueError("vsum: empty operand list")
    values = [tape.value(r) for r in refs]
    shape = values[0].shape
    if any(v.shape != shape for v in values):
        _fail("vsum", *[v.shape for v in values])
    total = values[0].copy()
    for v in values[1:]:
        total += v
    return tape._append(total, tuple(r.index for r in refs),
                        lambda g: (g,) * len(refs))


def dot(tape: Tape, a: ValueRef, b: ValueRef) -> ValueRef:
    av, bv = tape.value(a), tape.value(b)
    if av.ndim != 1 or av.shape != bv.shape:
        _fail("dot", av.shape, bv.shape)

    def vjp(g):
        return g * bv, g * av

    return tape._append(np.asarray(av @ bv), (a.index, b.index), vjp)


def blend(tape: Tape, gate: ValueRef, a: ValueRef, b: ValueRef) -> ValueRef:
    """Gated interpolation ``gate * a + (1 - gate) * b``."""
    zv, av, bv = tape.value(gate), tape.value(a), tape.value(b)
    if not zv.shape == av.shape == bv.shape:
        _fail("blend", zv.shape, av.shape, bv.shape)

    def vjp(g):
        return g * (av - bv), g * zv, g * (1.0 - zv)

    return tape._append(zv * av + (1.0 - zv) * bv,
                        (gate.index, a.index, b.index), vjp)


def softmax(tape: Tape, a: ValueRef) -> ValueRef:
    """Exponential-normalized weighting of a vector (max-shifted for stability)."""
    x = tape.value(a)
    if x.ndim != 1:
        _fail("softmax", x.shape)
    e = np.exp(x - np.max(x))
    y = e / e.sum()

    def vjp(g):
        return (y * (g - np.dot(g, y)),)

    return tape._append(y, (a.index,), vjp)


def linear_norm(tape: Tape, a: ValueRef) -> ValueRef:
    """Literal linear normalization ``x / sum(x)``; sign-unsafe by design."""
    x = tape.value(a)
    if x.ndim != 1:
        _fail("linear_norm", x.shape)
    total = x.sum()
    if abs(total) < 1e-12:
        raise FloatingPointError("linear_norm: scores sum to ~0")
    y = x / total

    def vjp(g):
        return ((g - np.dot(g, y)) / total,)

    return tape._append(y, (a.index,), vjp)


def softmax_cross_entropy(tape: Tape, logits: ValueRef, gold: int) -> ValueRef:
    """Fused ``-log softmax(logits)[gold]`` via max-shifted log-sum-exp."""
    x = tape.value(logits)
    if x.ndim != 1:
        _fail("softmax_cross_entropy", x.shape)
    if not 0 <= gold < x.shape[0]:
        raise IndexError(f"gold label {gold} outside logits of length {x.shape[0]}")
    m = np.max(x)
    shifted = x - m
    e = np.exp(shifted)
    total = e.sum()
    loss = np.asarray(np.log(total) - shifted[gold])
    probs = e / total

    def vjp(g):
        grad = probs * g
        grad[gold] -= g
        return (grad,)

    return tape._append(loss, (logits.index,), vjp)


def stack(tape: Tape, refs: Sequence[ValueRef]) -> ValueRef:
    """Collect scalars into a vector."""
    values = [tape.value(r) for r in refs]
    if any(v.shape != () for v in values):
        _fail("stack", *[v.shape for v in values])

    def vjp(g):
        return tuple(np.asarray(g[i]) for i in range(len(refs)))

    return tape._append(np.stack(values), tuple(r.index for r in refs), vjp)


def pick(tape: Tape, vec: ValueRef, i: int) -> ValueRef:
    """Extract component ``i`` of a vector as a scalar."""
    v = tape.value(vec)
    if v.ndim != 1:
        _fail("pick", v.shape)

    def vjp(g):
        out = np.zeros_like(v)
        out[i] = g
        return (out,)

    return tape._append(np.asarray(v[i]), (vec.index,), vjp)


def concat(tape: Tape, refs: Sequence[ValueRef]) -> ValueRef:
    values = [tape.value(r) for r in refs]
    if any(v.ndim != 1 for v in values):
        _fail("concat", *[v.shape for v in values])
    offsets = np.cumsum([0] + [v.shape[0] for v in values])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(refs)))

    return tape._append(np.concatenate(values), tuple(r.index for r in refs), vjp)


def backward(tape: Tape, loss: ValueRef) -> list[Optional[np.ndarray]]:
    """Gradients of a scalar ``loss`` with respect to every tape value.

    Returns a list aligned with tape indices; entries are ``None`` for
    values the loss does not depend on.  Contributions at fan-out
    points are summed, and the sweep is fully deterministic.
    """
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list[Optional[np.ndarray]] = [None] * len(tape)
    grads[loss.index] = np.ones((), dtype=tape.value(loss).dtype)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        vjp = tape._vjps[i]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape._parents[i], vjp(g)):
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return grads
