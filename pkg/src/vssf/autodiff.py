"""Reverse-mode automatic differentiation over dense float64 arrays.

A Node wraps a value and remembers how it was computed (parents plus a
vector-Jacobian closure). Graphs are rebuilt per step; backward(root) walks
the graph once in reverse topological order and accumulates gradients into
the leaves. There is no global tape, so separate graphs on separate threads
cannot interfere.

The operation set is the minimum needed here: matrix products, elementwise
nonlinearities, Cholesky factors and triangular solves for Gaussian terms,
and a few shape utilities. Matrix ops are strictly 2-d; elementwise ops
broadcast like numpy and reduce gradients back to the operand shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erf

from .errors import (
    AlreadyConsumed,
    NonFiniteError,
    NotPositiveDefinite,
    NotScalarRoot,
    ShapeMismatch,
)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "grad", "_consumed")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar so graph code reads like array code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    """Wrap an array as a non-differentiable graph input."""
    return Node(value)


def leaf(value) -> Node:
    """Wrap an array as a differentiable graph input (a parameter)."""
    return Node(value, requires_grad=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value + b.value
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)
    return Node(value, (a, b), vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value - b.value
    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)
    return Node(value, (a, b), vjp)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value * b.value
    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))
    return Node(value, (a, b), vjp)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatch("matmul operands must be 2-d")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value
    def vjp(g):
        return g @ b.value.T, a.value.T @ g
    return Node(value, (a, b), vjp)


def transpose(a) -> Node:
    a = as_node(a)
    return Node(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tile_rows(a, reps: int) -> Node:
    """Stack `reps` copies of a 2-d array along axis 0."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeMismatch("tile_rows expects a 2-d array")
    n = a.value.shape[0]
    value = np.tile(a.value, (reps, 1))
    def vjp(g):
        return (g.reshape(reps, n, -1).sum(axis=0),)
    return Node(value, (a,), vjp)


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape
    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return Node(value, (a,), vjp)


def reduce_mean(a, axis=None) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def gelu(a) -> Node:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    a = as_node(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    value = x * cdf
    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)
    return Node(value, (a,), vjp)


def tanh(a) -> Node:
    a = as_node(a)
    value = np.tanh(a.value)
    return Node(value, (a,), lambda g: (g * (1.0 - value * value),))


def exp(a) -> Node:
    a = as_node(a)
    value = np.exp(a.value)
    return Node(value, (a,), lambda g: (g * value,))


def log(a) -> Node:
    a = as_node(a)
    x = a.value
    return Node(np.log(x), (a,), lambda g: (g / x,))


def _phi_lower(p: np.ndarray) -> np.ndarray:
    """Lower triangle of p with the diagonal halved."""
    out = np.tril(p)
    np.fill_diagonal(out, 0.5 * np.diagonal(p))
    return out


def cholesky(a) -> Node:
    """Lower Cholesky factor of a symmetric PD matrix.

    The input is symmetrized first, so gradients with respect to the raw
    entries are well defined whichever triangle carries the perturbation.
    """
    a = as_node(a)
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise ShapeMismatch(f"cholesky expects a square matrix, got {a.value.shape}")
    sym = 0.5 * (a.value + a.value.T)
    if not np.isfinite(sym).all():
        # LAPACK may hand back a NaN factor without signalling
        raise NonFiniteError("cholesky input contains non-finite values")
    try:
        factor = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("cholesky failed inside the graph") from exc
    def vjp(g):
        p = _phi_lower(factor.T @ g)
        half = solve_triangular(factor, p, lower=True, trans="T")
        s = solve_triangular(factor, half.T, lower=True, trans="T").T
        return (0.5 * (s + s.T),)
    return Node(factor, (a,), vjp)


def triangular_solve(l, b, trans: str = "N") -> Node:
    """Solve op(L) x = b for lower-triangular L; trans is "N" or "T".

    Only the lower triangle of L participates; gradients for the ignored
    upper entries are zero.
    """
    l, b = as_node(l), as_node(b)
    if trans not in ("N", "T"):
        raise ShapeMismatch(f"trans must be 'N' or 'T', got {trans!r}")
    if l.value.ndim != 2 or l.value.shape[0] != l.value.shape[1]:
        raise ShapeMismatch(f"triangular_solve expects square L, got {l.value.shape}")
    tri = np.tril(l.value)
    x = solve_triangular(tri, b.value, lower=True, trans=trans)
    def vjp(g):
        if trans == "N":
            b_bar = solve_triangular(tri, g, lower=True, trans="T")
            l_bar = -_outer_2d(b_bar, x)
        else:
            b_bar = solve_triangular(tri, g, lower=True, trans="N")
            l_bar = -_outer_2d(x, b_bar)
        return np.tril(l_bar), b_bar
    return Node(x, (l, b), vjp)


def _outer_2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T that also accepts 1-d operands."""
    a2 = a if a.ndim == 2 else a[:, None]
    b2 = b if b.ndim == 2 else b[:, None]
    return a2 @ b2.T


def logdet_psd(a) -> Node:
    """Log determinant of a symmetric PD matrix via its Cholesky factor."""
    a = as_node(a)
    sym = 0.5 * (a.value + a.value.T)
    try:
        factor = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("logdet of a non-PD matrix") from exc
    value = 2.0 * np.sum(np.log(np.diagonal(factor)))
    def vjp(g):
        inv = solve_triangular(factor, np.eye(factor.shape[0]), lower=True)
        inv = solve_triangular(factor, inv, lower=True, trans="T")
        return (float(g) * 0.5 * (inv + inv.T),)
    return Node(value, (a,), vjp)


def quadratic_form(a, x) -> Node:
    """x^T A x for a square matrix A and vector x."""
    a, x = as_node(a), as_node(x)
    if x.value.ndim != 1 or a.value.shape != (x.value.shape[0], x.value.shape[0]):
        raise ShapeMismatch(f"quadratic_form: A {a.value.shape}, x {x.value.shape}")
    value = x.value @ a.value @ x.value
    def vjp(g):
        g = float(g)
        return g * np.outer(x.value, x.value), g * (a.value + a.value.T) @ x.value
    return Node(value, (a, x), vjp)


def tril(a) -> Node:
    """Lower-triangular part; upper entries get zero gradient."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeMismatch("tril expects a 2-d array")
    return Node(np.tril(a.value), (a,), lambda g: (np.tril(g),))


def diag_part(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeMismatch("diag_part expects a 2-d array")
    def vjp(g):
        out = np.zeros_like(a.value)
        np.fill_diagonal(out, g)
        return (out,)
    return Node(np.diagonal(a.value).copy(), (a,), vjp)


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar root into every reachable node.

    Each node's vjp runs exactly once, in reverse topological order. A
    second call on the same root raises AlreadyConsumed; rebuild the graph
    instead of reusing it.
    """
    if root.value.size != 1:
        raise NotScalarRoot(f"backward root must be scalar, got shape {root.value.shape}")
    if root._consumed:
        raise AlreadyConsumed("backward was already called on this graph")
    root._consumed = True

    # iterative depth-first topological sort over the differentiable subgraph
    order: list[Node] = []
    state: dict[int, int] = {}  # 0 = on stack, 1 = done
    stack: list[Node] = [root]
    while stack:
        node = stack[-1]
        key = id(node)
        if key not in state:
            state[key] = 0
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in state:
                    stack.append(parent)
        else:
            stack.pop()
            if state[key] == 0:
                state[key] = 1
                order.append(node)

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, pgrad in zip(node.parents, node.vjp(node.grad)):
            if not parent.requires_grad:
                continue
            pgrad = np.asarray(pgrad, dtype=np.float64)
            # never accumulate in place: earlier contributions may be views
            parent.grad = pgrad if parent.grad is None else parent.grad + pgrad


# --- multilayer perceptrons ---

@dataclass(frozen=True)
class Mlp:
    """Fully-connected network: GELU hidden layers, linear output."""

    weights: tuple
    biases: tuple
    activation: str = "gelu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("weights and biases must pair up")
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"bad layer shapes {w.shape}, {b.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


_ACTIVATIONS = {"gelu": gelu, "tanh": tanh}


def mlp_init(rng: np.random.Generator, sizes: list[int], activation: str = "gelu") -> Mlp:
    """Glorot-normal initialization for the given layer sizes."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return Mlp(weights=tuple(weights), biases=tuple(biases), activation=activation)


def mlp_apply(mlp: Mlp, x, layer_leaves=None) -> Node:
    """Run the network inside the graph.

    layer_leaves, when given, is a list of (weight_node, bias_node) pairs
    to differentiate through; otherwise the stored arrays enter as
    constants. Input rows are (n, in_dim).
    """
    act = _ACTIVATIONS[mlp.activation]
    h = as_node(x)
    if h.value.ndim != 2 or h.value.shape[1] != mlp.in_dim:
        raise ShapeMismatch(f"mlp input must be (n, {mlp.in_dim}), got {h.value.shape}")
    n_layers = len(mlp.weights)
    for i in range(n_layers):
        if layer_leaves is not None:
            w, b = layer_leaves[i]
        else:
            w, b = constant(mlp.weights[i]), constant(mlp.biases[i])
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass; must agree with mlp_apply exactly."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != mlp.in_dim:
        raise ShapeMismatch(f"mlp input must have {mlp.in_dim} columns, got {h.shape}")
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i < last:
            if mlp.activation == "gelu":
                h = h * 0.5 * (1.0 + erf(h * _INV_SQRT2))
            else:
                h = np.tanh(h)
    return h[0] if squeeze else h
