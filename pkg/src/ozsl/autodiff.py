"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value in the graph is a 2-D numpy array (see matio.as_matrix).  The
backward pass composes graph nodes instead of raw arrays, so a gradient is
itself a differentiable expression: differentiating the norm of a critic's
input gradient (the gradient penalty) is an ordinary second backward call.

Conventions
-----------
* Scalars are 1x1 matrices.
* Biases are 1xD row vectors broadcast over the batch axis; no other
  broadcasting is supported.
* Graph construction and backward are single-threaded per graph; separate
  graphs share nothing mutable.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError
from .matio import as_matrix


class Node:
    """One value in the computation graph.

    `parents` and `_vjps` line up: _vjps[i](upstream) returns parent i's
    gradient contribution as a new Node, built from the primitives below so
    that the gradient itself stays differentiable.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "_vjps")

    def __init__(self, value, parents=(), op="leaf", vjps=(), requires_grad=False):
        self.value = value
        self.parents = parents
        self.op = op
        self._vjps = vjps
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, grad={self.requires_grad})"


def constant(data) -> Node:
    """Leaf that receives no gradient."""
    return Node(as_matrix(data))


def param(data) -> Node:
    """Leaf that participates in backward."""
    return Node(as_matrix(data), requires_grad=True)


def _lift(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def _make(value: np.ndarray, parents, op: str, vjps) -> Node:
    # single cheap reduce; any NaN/Inf entry makes the sum non-finite
    if not math.isfinite(value.sum()):
        raise NonFiniteError(f"non-finite result from {op}")
    needs = any(p.requires_grad for p in parents)
    return Node(value, tuple(parents), op, tuple(vjps), needs)


def _need_same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: {a.value.shape} @ {b.value.shape}")
    return _make(
        a.value @ b.value,
        (a, b),
        "matmul",
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
    )


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _need_same_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), "add", (lambda g: g, lambda g: g))


def add_bias(x, bias) -> Node:
    """Row-vector bias broadcast over the batch axis."""
    x, bias = _lift(x), _lift(bias)
    if bias.value.shape != (1, x.value.shape[1]):
        raise DimensionError(f"add_bias: bias {bias.value.shape} for input {x.value.shape}")
    return _make(
        x.value + bias.value,
        (x, bias),
        "add_bias",
        (lambda g: g, lambda g: col_sums(g)),
    )


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _need_same_shape(a, b, "mul")
    return _make(
        a.value * b.value,
        (a, b),
        "mul",
        (lambda g: mul(g, b), lambda g: mul(g, a)),
    )


def scale(a, s: float) -> Node:
    a = _lift(a)
    s = float(s)
    return _make(a.value * s, (a,), "scale", (lambda g: scale(g, s),))


def add_scalar(a, s: float) -> Node:
    a = _lift(a)
    return _make(a.value + float(s), (a,), "add_scalar", (lambda g: g,))


def sub(a, b) -> Node:
    return add(_lift(a), scale(_lift(b), -1.0))


def leaky_relu(x, slope: float = 0.2) -> Node:
    x = _lift(x)
    v = x.value
    mask = np.where(v > 0.0, 1.0, float(slope))
    return _make(v * mask, (x,), "leaky_relu", (lambda g: mul(g, constant(mask)),))


def relu(x) -> Node:
    x = _lift(x)
    mask = (x.value > 0.0).astype(np.float64)
    return _make(x.value * mask, (x,), "relu", (lambda g: mul(g, constant(mask)),))


def concat_cols(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(f"concat_cols: {a.value.shape} | {b.value.shape}")
    da = a.value.shape[1]
    db = b.value.shape[1]
    return _make(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        "concat_cols",
        (lambda g: slice_cols(g, 0, da), lambda g: slice_cols(g, da, da + db)),
    )


def slice_cols(x, start: int, stop: int) -> Node:
    x = _lift(x)
    n, d = x.value.shape
    if not (0 <= start <= stop <= d):
        raise DimensionError(f"slice_cols: [{start}:{stop}] of {d} columns")
    return _make(
        np.ascontiguousarray(x.value[:, start:stop]),
        (x,),
        "slice_cols",
        (lambda g: pad_cols(g, start, d - stop),),
    )


def pad_cols(x, left: int, right: int) -> Node:
    x = _lift(x)
    n, d = x.value.shape
    out = np.zeros((n, left + d + right))
    out[:, left:left + d] = x.value
    return _make(out, (x,), "pad_cols", (lambda g: slice_cols(g, left, left + d),))


def transpose(x) -> Node:
    x = _lift(x)
    return _make(np.ascontiguousarray(x.value.T), (x,), "transpose", (lambda g: transpose(g),))


def exp(x) -> Node:
    x = _lift(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.value)
    out = _make(value, (x,), "exp", ())  # overflow surfaces as NonFiniteError
    out._vjps = (lambda g: mul(g, out),)
    return out


def log(x) -> Node:
    x = _lift(x)
    if not (x.value > 0.0).all():
        raise DomainError("log of a non-positive entry")
    return _make(np.log(x.value), (x,), "log", (lambda g: mul(g, reciprocal(x)),))


def sqrt(x) -> Node:
    x = _lift(x)
    if not (x.value > 0.0).all():
        raise DomainError("sqrt of a non-positive entry")
    out = _make(np.sqrt(x.value), (x,), "sqrt", ())
    out._vjps = (lambda g: scale(mul(g, reciprocal(out)), 0.5),)
    return out


def square(x) -> Node:
    x = _lift(x)
    return _make(x.value ** 2, (x,), "square", (lambda g: mul(g, scale(x, 2.0)),))


def reciprocal(x) -> Node:
    x = _lift(x)
    if (x.value == 0.0).any():
        raise DomainError("reciprocal of zero")
    out = _make(1.0 / x.value, (x,), "reciprocal", ())
    out._vjps = (lambda g: scale(mul(g, square(out)), -1.0),)
    return out


def row_sums(x) -> Node:
    x = _lift(x)
    d = x.value.shape[1]
    return _make(
        x.value.sum(axis=1, keepdims=True),
        (x,),
        "row_sums",
        (lambda g: broadcast_cols(g, d),),
    )


def col_sums(x) -> Node:
    x = _lift(x)
    n = x.value.shape[0]
    return _make(
        x.value.sum(axis=0, keepdims=True),
        (x,),
        "col_sums",
        (lambda g: broadcast_rows(g, n),),
    )


def broadcast_cols(x, cols: int) -> Node:
    x = _lift(x)
    if x.value.shape[1] != 1:
        raise DimensionError(f"broadcast_cols needs a column vector, got {x.value.shape}")
    return _make(
        np.repeat(x.value, cols, axis=1),
        (x,),
        "broadcast_cols",
        (lambda g: row_sums(g),),
    )


def broadcast_rows(x, rows: int) -> Node:
    x = _lift(x)
    if x.value.shape[0] != 1:
        raise DimensionError(f"broadcast_rows needs a row vector, got {x.value.shape}")
    return _make(
        np.repeat(x.value, rows, axis=0),
        (x,),
        "broadcast_rows",
        (lambda g: col_sums(g),),
    )


def sum_all(x) -> Node:
    x = _lift(x)
    n, d = x.value.shape
    return _make(
        np.array([[x.value.sum()]]),
        (x,),
        "sum_all",
        (lambda g: broadcast_rows(broadcast_cols(g, d), n),),
    )


def mean_all(x) -> Node:
    x = _lift(x)
    return scale(sum_all(x), 1.0 / x.value.size)


def softmax_cross_entropy(logits, onehot) -> Node:
    """Mean negative log-likelihood of one-hot targets under row softmax.

    Stable (max-shifted) log-softmax; the per-row shift is an exact
    invariance of softmax, so gradients through it stay exact.
    """
    logits, onehot = _lift(logits), _lift(onehot)
    _need_same_shape(logits, onehot, "softmax_cross_entropy")
    n, k = logits.value.shape
    shift = constant(logits.value.max(axis=1, keepdims=True))
    z = sub(logits, broadcast_cols(shift, k))
    log_norm = log(row_sums(exp(z)))
    log_probs = sub(z, broadcast_cols(log_norm, k))
    return scale(sum_all(mul(onehot, log_probs)), -1.0 / n)


def softmax_rows(values: np.ndarray) -> np.ndarray:
    """Value-level row softmax used by prediction paths (no graph)."""
    v = as_matrix(values)
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede children


def backward(root: Node, wrt) -> dict[Node, Node]:
    """Gradient of a scalar `root` with respect to each node in `wrt`.

    Returns a map node -> gradient Node of the same shape.  Nodes in `wrt`
    that the root does not depend on get a zero gradient.  The returned
    gradients are graph nodes, so they can be differentiated again.
    """
    wrt = list(wrt)
    if root.value.shape != (1, 1):
        raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")
    grads: dict[int, Node] = {id(root): constant(np.ones((1, 1)))}
    if root.requires_grad:
        for node in reversed(_toposort(root)):
            g = grads.get(id(node))
            if g is None or not node.requires_grad:
                continue
            for parent, vjp in zip(node.parents, node._vjps):
                if not parent.requires_grad:
                    continue
                contribution = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contribution if prev is None else add(prev, contribution)
    out: dict[Node, Node] = {}
    for node in wrt:
        g = grads.get(id(node))
        out[node] = g if g is not None else constant(np.zeros(node.value.shape))
    return out
