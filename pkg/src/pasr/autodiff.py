"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Nodes are evaluated eagerly; creation order is the topological order that
``Graph.backward`` walks in reverse.  Only the shapes the recognizer needs
are supported -- there is no general broadcasting engine.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """A forward value or a gradient stopped being finite."""


def _as_f64(value):
    return np.asarray(value, dtype=np.float64)


def _check_finite(arr, what):
    # One sum is NaN/Inf iff some element is non-finite (desk-scale values
    # cannot overflow the sum of finite elements).
    if not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"non-finite values in {what}")


class Node:
    """One op record: output value, parent nodes, and a vjp closure.

    ``vjp(grad_out)`` returns one gradient array (or None) per parent.
    Leaves have ``vjp=None``.
    """

    __slots__ = ("graph", "value", "parents", "vjp", "grad", "name")

    def __init__(self, graph, value, parents=(), vjp=None, name=None):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name
        if graph.check_finite:
            _check_finite(value, name or "op output")
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"


class Graph:
    """Tape of nodes in creation (topological) order plus a parameter registry."""

    def __init__(self, check_finite=True):
        self.nodes = []
        self.params = {}
        self.check_finite = check_finite

    def constant(self, value, name=None):
        return Node(self, _as_f64(value), name=name)

    def parameter(self, name, value):
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        node = Node(self, _as_f64(value), name=name)
        self.params[name] = node
        return node

    def backward(self, loss):
        """Return gradients of a scalar loss for every registered parameter.

        Parameters unreachable from the loss get an all-zero gradient.
        """
        if loss.graph is not self:
            raise ValueError("loss node belongs to a different graph")
        if loss.value.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones(())
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g
        grads = {}
        for name, node in self.params.items():
            g = node.grad if node.grad is not None else np.zeros_like(node.value)
            grads[name] = g
            if self.check_finite:
                _check_finite(g, f"gradient of {name}")
        return grads


def custom(parents, value, vjp, name=None):
    """A node with a caller-supplied vjp (used for fused ops like CTC)."""
    return Node(parents[0].graph, _as_f64(value), tuple(parents), vjp, name)


def _reject(op, *shapes):
    raise ShapeError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


def matmul(a, b):
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        _reject("matmul", av.shape, bv.shape)
    if av.shape[-1] != (bv.shape[0] if bv.ndim > 0 else None):
        _reject("matmul", av.shape, bv.shape)
    value = av @ bv

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return Node(a.graph, value, (a, b), vjp, "matmul")


def add(a, b):
    """Elementwise add; also (T, n) + (n,) broadcast over the leading dim."""
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        vjp = lambda g: (g, g)
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        vjp = lambda g: (g, g.sum(axis=0))
    else:
        _reject("add", av.shape, bv.shape)
    return Node(a.graph, av + bv, (a, b), vjp, "add")


def mul(a, b):
    if a.value.shape != b.value.shape:
        _reject("mul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    return Node(a.graph, av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, alpha, shift=0.0):
    """alpha * a + shift with scalar constants."""
    return Node(a.graph, alpha * a.value + shift, (a,), lambda g: (alpha * g,), "scale")


def neg(a):
    return scale(a, -1.0)


def tanh(a):
    t = np.tanh(a.value)
    return Node(a.graph, t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(a):
    x = a.value
    # Stable on both tails.
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Node(a.graph, s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_rows(a):
    """Row softmax of a matrix; a vector is treated as a single row."""
    x = a.value
    if x.ndim not in (1, 2):
        _reject("softmax_rows", x.shape)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12):
        raise NonFiniteError("softmax rows do not sum to 1")

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Node(a.graph, s, (a,), vjp, "softmax")


def log_softmax_rows(a):
    x = a.value
    if x.ndim not in (1, 2):
        _reject("log_softmax_rows", x.shape)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Node(a.graph, out, (a,), vjp, "log_softmax")


def concat_last(a, b):
    """Concatenate along the last dim (two vectors, or two matrices row-wise)."""
    av, bv = a.value, b.value
    if av.ndim != bv.ndim or av.ndim not in (1, 2):
        _reject("concat_last", av.shape, bv.shape)
    if av.ndim == 2 and av.shape[0] != bv.shape[0]:
        _reject("concat_last", av.shape, bv.shape)
    k = av.shape[-1]
    value = np.concatenate([av, bv], axis=-1)

    def vjp(g):
        return g[..., :k], g[..., k:]

    return Node(a.graph, value, (a, b), vjp, "concat")


def row(a, i):
    """Single row of a matrix as a vector."""
    x = a.value
    if x.ndim != 2 or not (0 <= i < x.shape[0]):
        _reject(f"row[{i}]", x.shape)

    def vjp(g):
        z = np.zeros_like(x)
        z[i] = g
        return (z,)

    return Node(a.graph, x[i].copy(), (a,), vjp, "row")


def slice_rows(a, start, stop):
    x = a.value
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        _reject(f"slice_rows[{start}:{stop}]", x.shape)

    def vjp(g):
        z = np.zeros_like(x)
        z[start:stop] = g
        return (z,)

    return Node(a.graph, x[start:stop].copy(), (a,), vjp, "slice_rows")


def mean_time(a):
    """Mean over the time (leading) dimension of a T x H matrix."""
    x = a.value
    if x.ndim != 2 or x.shape[0] == 0:
        _reject("mean_time", x.shape)
    t = x.shape[0]

    def vjp(g):
        return (np.broadcast_to(g / t, x.shape),)

    return Node(a.graph, x.mean(axis=0), (a,), vjp, "mean_time")


def reduce_mean(a):
    x = a.value
    n = x.size
    return Node(a.graph, np.asarray(x.mean()), (a,),
                lambda g: (np.full_like(x, float(g) / n),), "reduce_mean")


def reduce_sum(a):
    x = a.value
    return Node(a.graph, np.asarray(x.sum()), (a,),
                lambda g: (np.full_like(x, float(g)),), "reduce_sum")


def embedding(table, ids):
    """Rows ``table[ids]`` with scatter-add gradient into the table."""
    tv = table.value
    idx = np.asarray(ids, dtype=np.int64)
    if tv.ndim != 2 or idx.ndim != 1:
        _reject("embedding", tv.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {tv.shape}")

    def vjp(g):
        z = np.zeros_like(tv)
        np.add.at(z, idx, g)
        return (z,)

    return Node(table.graph, tv[idx].copy(), (table,), vjp, "embedding")


def gather_rows(a, ids):
    """Vector of x[i, ids[i]] picks, one per row."""
    x = a.value
    idx = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        _reject("gather_rows", x.shape, idx.shape)
    rows = np.arange(x.shape[0])

    def vjp(g):
        z = np.zeros_like(x)
        z[rows, idx] = g
        return (z,)

    return Node(a.graph, x[rows, idx].copy(), (a,), vjp, "gather_rows")


def pick(a, i):
    """Scalar element of a vector."""
    x = a.value
    if x.ndim != 1 or not (0 <= i < x.shape[0]):
        _reject(f"pick[{i}]", x.shape)

    def vjp(g):
        z = np.zeros_like(x)
        z[i] = g
        return (z,)

    return Node(a.graph, np.asarray(x[i]), (a,), vjp, "pick")


def stack_rows(rows_):
    """Stack N same-length vectors into an (N, H) matrix."""
    rows_ = tuple(rows_)
    if not rows_ or any(r.value.ndim != 1 for r in rows_):
        raise ShapeError("stack_rows needs a non-empty sequence of vectors")
    value = np.stack([r.value for r in rows_])

    def vjp(g):
        return tuple(g[i] for i in range(len(rows_)))

    return Node(rows_[0].graph, value, rows_, vjp, "stack_rows")


def conv1d_same(kernel, align):
    """1-D convolution of an alignment vector, same padding.

    kernel is (channels, width) with odd width; align is (T,).  Output is
    (T, channels).
    """
    kv, xv = kernel.value, align.value
    if kv.ndim != 2 or xv.ndim != 1 or kv.shape[1] % 2 != 1:
        _reject("conv1d_same", kv.shape, xv.shape)
    c, w = kv.shape
    t = xv.shape[0]
    pad = w // 2
    xp = np.zeros(t + 2 * pad)
    xp[pad:pad + t] = xv
    windows = np.lib.stride_tricks.sliding_window_view(xp, w)  # (T, w)
    value = windows @ kv.T

    def vjp(g):
        dk = g.T @ windows
        dwin = g @ kv  # (T, w)
        dxp = np.zeros_like(xp)
        for j in range(w):
            dxp[j:j + t] += dwin[:, j]
        return dk, dxp[pad:pad + t]

    return Node(align.graph, value, (kernel, align), vjp, "conv1d")


def grad_reverse(a, lam):
    """Identity forward; backward scales the upstream gradient by -lam."""
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda must be >= 0, got {lam}")
    return Node(a.graph, a.value, (a,), lambda g: (-lam * g,), "grad_reverse")


def mean_of(nodes):
    """Mean of a sequence of scalar nodes."""
    nodes = list(nodes)
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return scale(total, 1.0 / len(nodes))


class Adam:
    """Adam with global-norm gradient clipping.

    ``step`` mutates exactly the tensors named in ``grads`` in place; a fresh
    state plus a zero gradient leaves a tensor bitwise unchanged.
    """

    def __init__(self, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=5.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        for name, g in grads.items():
            if not math.isfinite(float(np.sum(g))):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = self.clip_norm / gnorm if gnorm > self.clip_norm else 1.0
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = g * clip
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params
