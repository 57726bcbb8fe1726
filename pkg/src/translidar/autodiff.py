"""Reverse-mode automatic differentiation over numpy arrays.

A Tape records one forward computation as a flat list of nodes. Nodes are
created in evaluation order, so the creation order is already a valid
topological order and reverse accumulation is a single backward sweep over
the list. Values are float64 ndarrays throughout; gradient arrays are never
mutated in place, which keeps views safe to return from vjp closures.

Ops are vectorized: one node per array operation, not per scalar, so the
tape stays short even for large batches.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import DomainError


def _as_array(v):
    return np.asarray(v, dtype=np.float64)


class Node:
    """One value in the recorded computation.

    parents/vjps pair up: vjps[k] maps the output gradient to the gradient
    contribution of parents[k]. Leaves have no parents; `requires` marks
    nodes that can reach a registered parameter leaf.
    """

    __slots__ = ("tape", "value", "parents", "vjps", "requires", "grad")

    # make ndarray <op> Node defer to the reflected Node operator instead of
    # broadcasting over the Node as an object scalar
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), vjps=(), requires=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.requires = requires
        self.grad = None
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Recording of one forward computation.

    nodes:  creation order, which is a valid topological order.
    params: named leaves whose gradients backward() reports.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}

    def constant(self, value):
        return Node(self, _as_array(value))

    def leaf(self, value, name=None):
        node = Node(self, _as_array(value), requires=True)
        if name is not None:
            if name in self.params:
                raise DomainError(f"duplicate parameter name {name!r}")
            self.params[name] = node
        return node


def value_of(x):
    return x.value if isinstance(x, Node) else _as_array(x)


def _wrap(tape, x):
    return x if isinstance(x, Node) else Node(tape, _as_array(x))


def _tape_of(a, b):
    return (a if isinstance(a, Node) else b).tape


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape, output):
    """Reverse accumulation from a scalar output node.

    Returns {param_name: gradient array}; leaves the output cannot reach
    get zeros. Raises DomainError if `output` is not a scalar on `tape`.
    """
    if not isinstance(output, Node) or output.tape is not tape:
        raise DomainError("backward: output node does not belong to this tape")
    if output.value.size != 1:
        raise DomainError("backward: output must be scalar")
    for n in tape.nodes:
        n.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or not node.requires:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires:
                continue
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    out = {}
    for name, leaf in tape.params.items():
        out[name] = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
    return out


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    return Node(tape, a.value + b.value, (a, b),
                (lambda g: _unbroadcast(g, a.value.shape),
                 lambda g: _unbroadcast(g, b.value.shape)),
                a.requires or b.requires)


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    return Node(tape, a.value - b.value, (a, b),
                (lambda g: _unbroadcast(g, a.value.shape),
                 lambda g: _unbroadcast(-g, b.value.shape)),
                a.requires or b.requires)


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    return Node(tape, a.value * b.value, (a, b),
                (lambda g: _unbroadcast(g * b.value, a.value.shape),
                 lambda g: _unbroadcast(g * a.value, b.value.shape)),
                a.requires or b.requires)


def div(a, b):
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    return Node(tape, a.value / b.value, (a, b),
                (lambda g: _unbroadcast(g / b.value, a.value.shape),
                 lambda g: _unbroadcast(-g * a.value / b.value ** 2, b.value.shape)),
                a.requires or b.requires)


def neg(a):
    return Node(a.tape, -a.value, (a,), (lambda g: -g,), a.requires)


def pow_const(a, p):
    return Node(a.tape, a.value ** p, (a,),
                (lambda g: g * p * a.value ** (p - 1),), a.requires)


def exp(a):
    out = np.exp(a.value)
    return Node(a.tape, out, (a,), (lambda g: g * out,), a.requires)


def log(a):
    return Node(a.tape, np.log(a.value), (a,), (lambda g: g / a.value,), a.requires)


def log1p(a):
    return Node(a.tape, np.log1p(a.value), (a,),
                (lambda g: g / (1.0 + a.value),), a.requires)


def sqrt(a):
    out = np.sqrt(a.value)
    return Node(a.tape, out, (a,), (lambda g: g * 0.5 / out,), a.requires)


def absolute(a):
    # subgradient 0 at the kink
    return Node(a.tape, np.abs(a.value), (a,),
                (lambda g: g * np.sign(a.value),), a.requires)


def sigmoid(a):
    out = expit(a.value)
    return Node(a.tape, out, (a,), (lambda g: g * out * (1.0 - out),), a.requires)


def clamp_min(a, floor):
    """max(a, floor) with derivative 0 on the clamped branch and boundary."""
    return Node(a.tape, np.maximum(a.value, floor), (a,),
                (lambda g: g * (a.value > floor),), a.requires)


# ---------------------------------------------------------------------------
# reductions and shape ops

def asum(a, axis=None, keepdims=False):
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape)

    return Node(a.tape, np.asarray(val, dtype=np.float64), (a,), (vjp,), a.requires)


def amean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(asum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum_exclusive(a):
    """out[..., i] = sum_{j<i} a[..., j] along the last axis."""
    cs = np.cumsum(a.value, axis=-1)
    val = np.empty_like(cs)
    val[..., 0] = 0.0
    val[..., 1:] = cs[..., :-1]

    def vjp(g):
        s = np.flip(np.cumsum(np.flip(g, -1), -1), -1)  # sum_{i>=j} g_i
        return s - g

    return Node(a.tape, val, (a,), (vjp,), a.requires)


def reshape(a, shape):
    return Node(a.tape, a.value.reshape(shape), (a,),
                (lambda g: g.reshape(a.value.shape),), a.requires)


def _has_fancy(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def take(a, key):
    """a[key] for basic slicing or integer-array gathers."""
    fancy = _has_fancy(key)

    def vjp(g):
        out = np.zeros_like(a.value)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] += g
        return out

    val = a.value[key]
    if fancy:
        val = np.ascontiguousarray(val)
    return Node(a.tape, val, (a,), (vjp,), a.requires)


def concat(parts, axis=-1):
    tape = next(p.tape for p in parts if isinstance(p, Node))
    parts = [_wrap(tape, p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(bounds[k], bounds[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Node(tape, val, tuple(parts), tuple(make_vjp(k) for k in range(len(parts))),
                any(p.requires for p in parts))


def matmul(a, b):
    """2-D matrix product."""
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    return Node(tape, a.value @ b.value, (a, b),
                (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
                a.requires or b.requires)


# ---------------------------------------------------------------------------
# gather / scatter / convolution kernels used by the renderer

def gather_weighted(values, idx, w):
    """sum_k values[idx[k]] * w[k] over the leading axis of idx.

    values: (M,) node.  idx: (K, N) int array.  w: (K, N) float array.
    Returns an (N,) node. The reverse pass is a single bincount.
    """
    val = np.einsum("kn,kn->n", values.value.take(idx), w)

    def vjp(g):
        return np.bincount(idx.ravel(), weights=(w * g).ravel(),
                           minlength=values.value.shape[0])

    return Node(values.tape, val, (values,), (vjp,), values.requires)


def scatter_add(contrib, idx, size, valid):
    """out[idx[i]] += contrib[i] for entries where valid[i]; out has length size."""
    sel = valid.nonzero()[0]
    val = np.bincount(idx[sel], weights=contrib.value[sel], minlength=size)

    def vjp(g):
        out = np.zeros_like(contrib.value)
        out[sel] = g[idx[sel]]
        return out

    return Node(contrib.tape, val, (contrib,), (vjp,), contrib.requires)


def conv_shift(x, taps, center):
    """Plain-numpy linear convolution along the last axis, output length kept.

    out[..., n] = sum_k taps[k] * x[..., n + center - k]; a one-tap kernel with
    center 0 is the identity.
    """
    out = np.zeros_like(x)
    T = x.shape[-1]
    for k, wk in enumerate(taps):
        if wk == 0.0:
            continue
        s = center - k
        if s >= 0:
            if T - s > 0:
                out[..., :T - s] += wk * x[..., s:]
        else:
            out[..., -s:] += wk * x[..., :T + s]
    return out


def conv_same(x, taps, center):
    """Differentiable wrapper around conv_shift with constant taps."""
    taps = np.asarray(taps, dtype=np.float64)
    rev_center = len(taps) - 1 - center

    def vjp(g):
        return conv_shift(g, taps[::-1], rev_center)

    return Node(x.tape, conv_shift(x.value, taps, center), (x,), (vjp,), x.requires)
