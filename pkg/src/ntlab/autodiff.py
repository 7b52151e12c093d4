"""Reverse-mode differentiation over dense float64 arrays.

Graphs are built define-by-run: each op returns a fresh :class:`Tensor`
holding the forward value, references to its parent nodes, and a closure
that routes the upstream gradient to those parents. A graph is therefore
acyclic by construction (parents are fixed before the child exists) and is
rebuilt for every minibatch.

Besides the usual dense-net primitives, two special operators are provided:
``grad_reverse`` (identity forward, ``-mu * g`` backward) and ``stop_grad``
(identity forward, zero backward). Cross-entropy losses are fused with
their softmax/sigmoid so no ``log(0)`` can occur on finite inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A node in the differentiation graph wrapping a float64 array."""

    __slots__ = ("data", "grad", "_parents", "_backprop")

    def __init__(self, data, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = _parents
        self._backprop: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.data.shape)})"


def _accumulate(node: Tensor, grad: Array) -> None:
    # Never add in place: the incoming array may be shared with another node.
    node.grad = grad if node.grad is None else node.grad + grad


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor, seed: Array | None = None,
             params: Sequence[Tensor] | None = None) -> None:
    """Accumulate gradients of ``loss`` into every reachable node's ``grad``.

    Without an explicit ``seed`` the loss must be scalar (seeded with 1).
    Parameters listed in ``params`` that the loss does not reach are given
    an exact zero gradient.
    """
    if seed is None:
        if loss.data.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.data.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.data.shape:
            raise ValueError("seed gradient shape must match the loss shape")
    _accumulate(loss, seed)
    for node in reversed(_topo_order(loss)):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, (a, b))

    def rule(g: Array) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out._backprop = rule
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a ``(k,)`` bias against an ``(n, k)`` batch."""
    if a.data.shape != b.data.shape and not (
            a.data.ndim == 2 and b.data.ndim == 1
            and a.data.shape[1] == b.data.shape[0]):
        raise ValueError(f"add: incompatible shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, (a, b))

    def rule(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, g if b.data.shape == g.shape else g.sum(axis=0))

    out._backprop = rule
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shapes must match, got {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, (a, b))

    def rule(g: Array) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    out._backprop = rule
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g * c)

    out._backprop = rule
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g * (1.0 - y * y))

    out._backprop = rule
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y, (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g * (x.data > 0.0))

    out._backprop = rule
    return out


def _sigmoid_values(z: Array) -> Array:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_values(x.data)
    out = Tensor(y, (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g * y * (1.0 - y))

    out._backprop = rule
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g / x.data)

    out._backprop = rule
    return out


def batch_mean(x: Tensor) -> Tensor:
    """Mean over every entry; used to reduce per-sample losses to a scalar."""
    out = Tensor(np.mean(x.data), (x,))
    n = x.data.size

    def rule(g: Array) -> None:
        _accumulate(x, np.full_like(x.data, float(g) / n))

    out._backprop = rule
    return out


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D logits array."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p, (x,))

    def rule(g: Array) -> None:
        _accumulate(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    out._backprop = rule
    return out


def softmax_cross_entropy(logits: Tensor, onehot: Array) -> Tensor:
    """Fused per-sample cross-entropy with softmax; returns an ``(n,)`` tensor.

    ``onehot`` is a plain ``(n, k)`` array of target rows, not a graph node.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sums = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(sums))[:, 0]
    loss = lse - (z * onehot).sum(axis=1)
    out = Tensor(loss, (logits,))
    p = e / sums

    def rule(g: Array) -> None:
        _accumulate(logits, (p - onehot) * g[:, None])

    out._backprop = rule
    return out


def sigmoid_cross_entropy(logits: Tensor, target) -> Tensor:
    """Fused binary cross-entropy from logits, elementwise.

    ``-log(sigmoid(z))`` when target is 1, ``-log(1 - sigmoid(z))`` when 0;
    computed as ``max(z, 0) - z*t + log1p(exp(-|z|))`` so it stays finite.
    """
    t = np.asarray(target, dtype=np.float64)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(loss, (logits,))

    def rule(g: Array) -> None:
        _accumulate(logits, (_sigmoid_values(z) - t) * g)

    out._backprop = rule
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two ``(n, *)`` blocks along the column axis."""
    if a.data.shape[0] != b.data.shape[0]:
        raise ValueError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([a.data, b.data], axis=1), (a, b))
    split = a.data.shape[1]

    def rule(g: Array) -> None:
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    out._backprop = rule
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g.reshape(x.data.shape))

    out._backprop = rule
    return out


def grad_reverse(x: Tensor, mu: float) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-mu``."""
    if mu < 0:
        raise ValueError(f"grad_reverse: mu must be nonnegative, got {mu}")
    out = Tensor(x.data, (x,))

    def rule(g: Array) -> None:
        _accumulate(x, g * (-mu))

    out._backprop = rule
    return out


def stop_grad(x: Tensor) -> Tensor:
    """Identity forward; transmits no gradient whatsoever."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    ``f`` rebuilds its graph from the given parameter tensors on every call
    and must return a scalar node. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar node")
    backward(out, params=params)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("finite_diff_check: non-finite evaluation")
    analytic = [p.grad.copy() for p in params]
    if not all(np.isfinite(a).all() for a in analytic):
        raise FloatingPointError("finite_diff_check: non-finite gradient")

    worst = 0.0
    for p, a in zip(params, analytic):
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(
                    "finite_diff_check: non-finite evaluation at perturbed point")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(float(a[idx]) - numeric) / max(1.0, abs(float(a[idx])))
            worst = max(worst, err)
    return worst
