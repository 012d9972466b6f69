"""Reverse-mode automatic differentiation on a recording tape.

Every :class:`TapeValue` wraps a numpy array.  Values that live on a
:class:`GradientTape` carry the index of the node that produced them;
constants carry no node and never receive gradient.  A primitive operation
appends exactly one node holding its parent indices and one vector-Jacobian
product per parent.  Nodes are appended in evaluation order, so reverse index
order is a valid reverse topological order for :meth:`GradientTape.backward`.

A scalar is simply a 0-d array; batching over rays and pixels is what makes
the renderer affordable on a CPU.
"""
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """An operation was evaluated outside the domain where it is defined."""


class Parameter:
    """Persistent optimizable storage (a leaf across many tapes)."""

    def __init__(self, name: str, data):
        self.name = name
        self.data = np.array(data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    @property
    def size(self):
        return self.data.size


class TapeValue:
    __slots__ = ("value", "tape", "node")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape=None, node=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.tape = tape
        self.node = node

    def __repr__(self):
        where = "const" if self.node is None else f"node={self.node}"
        return f"TapeValue({self.value!r}, {where})"

    @property
    def is_constant(self):
        return self.node is None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def numpy(self):
        return self.value

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, k: power(a, k)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(x) -> TapeValue:
    return x if isinstance(x, TapeValue) else TapeValue(x)


def value_of(x):
    return x.value if isinstance(x, TapeValue) else np.asarray(x)


class GradientTape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self._parents: list[tuple] = []
        self._vjps: list[tuple] = []
        self._leaf_params: dict[int, Parameter] = {}
        self._watched: dict[int, TapeValue] = {}
        self.marks: list[int] = []
        self.last_backward_visits = 0

    def __len__(self):
        return len(self._parents)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def clear(self):
        """Drop the recorded graph.

        Backward closures reference the values they were built from, which
        reference the tape again; clearing breaks that cycle so large
        intermediates are freed at once instead of at the next full GC.
        """
        self._parents.clear()
        self._vjps.clear()
        self._leaf_params.clear()
        self._watched.clear()
        self.marks.clear()

    def watch(self, param: Parameter) -> TapeValue:
        """Leaf value for ``param``; one node per parameter per tape."""
        leaf = self._watched.get(id(param))
        if leaf is None:
            node = len(self._parents)
            self._parents.append(())
            self._vjps.append(())
            self._leaf_params[node] = param
            leaf = TapeValue(param.data, self, node)
            self._watched[id(param)] = leaf
        return leaf

    def record(self, value, parents: Sequence[TapeValue], vjps: Sequence[Callable]) -> TapeValue:
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot combine values recorded on different tapes")
        node = len(self._parents)
        self._parents.append(tuple(p.node for p in parents))
        self._vjps.append(tuple(vjps))
        return TapeValue(value, self, node)

    def checkpoint(self) -> int:
        mark = len(self._parents)
        self.marks.append(mark)
        return mark

    def rollback(self, mark: int | None = None):
        if mark is None:
            mark = self.marks.pop()
        else:
            self.marks = [m for m in self.marks if m < mark]
        del self._parents[mark:]
        del self._vjps[mark:]
        for node in [n for n in self._leaf_params if n >= mark]:
            param = self._leaf_params.pop(node)
            self._watched.pop(id(param), None)

    @property
    def parameters(self) -> list[Parameter]:
        return list(self._leaf_params.values())

    def backward(self, output: TapeValue, params=None, wrt=(), seed=None):
        """Gradient table ``{parameter name: d output / d parameter}``.

        Non-scalar outputs are reduced by summation (or weighted by ``seed``).
        Parameters in ``params`` (default: every watched leaf) that the output
        does not reach map to zeros.  ``wrt`` holds intermediate values whose
        adjoints are also returned, keyed by position.
        """
        if not isinstance(output, TapeValue) or (output.tape is not self and output.node is not None):
            raise ValueError("output was not produced on this tape")
        if params is None:
            params = self.parameters
        table = {p.name: np.zeros_like(p.data, dtype=np.result_type(p.data, np.float32)) for p in params}
        want = {v.node: k for k, v in enumerate(wrt) if v.node is not None}
        extra = [np.zeros_like(v.value) for v in wrt]
        self.last_backward_visits = 0
        if output.node is None:
            return (table, extra) if wrt else table
        start = np.ones_like(output.value) if seed is None else np.broadcast_to(seed, output.shape).astype(output.dtype)
        adj = {output.node: start}
        for i in range(output.node, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            self.last_backward_visits += 1
            if i in want:
                extra[want[i]] = extra[want[i]] + g
            param = self._leaf_params.get(i)
            if param is not None:
                if param.name in table:
                    table[param.name] = table[param.name] + g
                continue
            for p, fn in zip(self._parents[i], self._vjps[i]):
                gp = fn(g)
                prev = adj.get(p)
                adj[p] = gp if prev is None else prev + gp
        return (table, extra) if wrt else table


def backward(tape: GradientTape, output: TapeValue, params=None):
    return tape.backward(output, params=params)


# ---------------------------------------------------------------------------
# op construction helpers


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def make_op(value, pairs) -> TapeValue:
    """Record ``value`` with ``pairs = [(parent, vjp), ...]``.

    Constant parents are dropped; with no live parent the result is a constant.
    """
    live = [(p, f) for p, f in pairs if isinstance(p, TapeValue) and p.node is not None]
    if not live:
        return TapeValue(value)
    tape = live[0][0].tape
    return tape.record(value, [p for p, _ in live], [f for _, f in live])


def add(a, b):
    a, b = constant(a), constant(b)
    out = a.value + b.value
    return make_op(out, [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b):
    a, b = constant(a), constant(b)
    out = a.value - b.value
    return make_op(out, [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return make_op(av * bv, [(a, lambda g: _unbroadcast(g * bv, a.shape)),
                             (b, lambda g: _unbroadcast(g * av, b.shape))])


def div(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    return make_op(out, [(a, lambda g: _unbroadcast(g / bv, a.shape)),
                         (b, lambda g: _unbroadcast(-g * out / bv, b.shape))])


def neg(a):
    a = constant(a)
    return make_op(-a.value, [(a, lambda g: -g)])


def power(a, k):
    a = constant(a)
    if isinstance(k, TapeValue):
        raise TypeError("exponent must be a constant")
    av = a.value
    if not float(k).is_integer() and np.any(av < 0):
        raise DomainError("fractional power of a negative number")
    out = av ** k
    return make_op(out, [(a, lambda g: g * k * av ** (k - 1))])


def exp(a):
    a = constant(a)
    out = np.exp(a.value)
    return make_op(out, [(a, lambda g: g * out)])


def log(a):
    a = constant(a)
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of a non-positive number")
    return make_op(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    a = constant(a)
    av = a.value
    if np.any(av < 0) or (a.node is not None and np.any(av == 0)):
        raise DomainError("sqrt outside (0, inf)")
    out = np.sqrt(av)
    return make_op(out, [(a, lambda g: g * 0.5 / out)])


def sigmoid(a):
    a = constant(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return make_op(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    a = constant(a)
    av = a.value
    out = np.logaddexp(0.0, av).astype(av.dtype, copy=False)
    return make_op(out, [(a, lambda g: g * (0.5 * (1.0 + np.tanh(0.5 * av))))])


def leaky_relu(a, slope=0.01):
    a = constant(a)
    av = a.value
    if not 0 <= slope <= 1:
        raise ValueError("slope must lie in [0, 1]")
    out = np.maximum(av, av * np.asarray(slope, dtype=av.dtype))
    pos = av > 0

    def vjp(g):
        scale = pos.astype(av.dtype) * np.asarray(1 - slope, dtype=av.dtype) + np.asarray(slope, dtype=av.dtype)
        return g * scale
    return make_op(out, [(a, vjp)])


def matmul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return make_op(av @ bv, [(a, lambda g: g @ np.swapaxes(bv, -1, -2)),
                             (b, lambda g: np.swapaxes(av, -1, -2) @ g)])


def linear(x, w, b=None):
    """``x @ w + b`` as one node."""
    x, w = constant(x), constant(w)
    xv, wv = x.value, w.value
    out = xv @ wv
    dt = out.dtype
    pairs = [(x, lambda g: g.astype(dt, copy=False) @ wv.T), (w, lambda g: xv.T @ g.astype(dt, copy=False))]
    if b is not None:
        b = constant(b)
        out = out + b.value
        pairs.append((b, lambda g: g.sum(axis=0)))
    return make_op(out, pairs)


def sum_(a, axis=None, keepdims=False):
    a = constant(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()
    return make_op(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = constant(a)
    old = a.shape
    return make_op(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def broadcast_to(a, shape):
    a = constant(a)
    old = a.shape
    return make_op(np.broadcast_to(a.value, shape), [(a, lambda g: _unbroadcast(g, old))])


def _needs_accumulate(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) and np.asarray(i).dtype != bool for i in items)


def getitem(a, idx):
    a = constant(a)
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        if _needs_accumulate(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return out
    return make_op(a.value[idx], [(a, vjp)])


def concat(values, axis=0):
    values = [constant(v) for v in values]
    arrays = [v.value for v in values]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])
    pairs = []
    for k, v in enumerate(values):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[k], bounds[k + 1])
        sl = tuple(sl)
        pairs.append((v, lambda g, sl=sl: g[sl]))
    return make_op(out, pairs)


def stack(values, axis=-1):
    values = [constant(v) for v in values]
    out = np.stack([v.value for v in values], axis=axis)
    return make_op(out, [(v, lambda g, k=k: np.take(g, k, axis=axis)) for k, v in enumerate(values)])


def where(mask, a, b):
    a, b = constant(a), constant(b)
    mask = np.asarray(mask)
    out = np.where(mask, a.value, b.value)
    return make_op(out, [(a, lambda g: _unbroadcast(np.where(mask, g, 0), a.shape)),
                         (b, lambda g: _unbroadcast(np.where(mask, 0, g), b.shape))])


def scatter_rows(n, parts, width, dtype=np.float64):
    """Assemble an ``(n, width)`` result from ``[(row_index, value), ...]``.

    Rows not covered by any part are zero.  Row indices must not overlap.
    """
    out = np.zeros((n, width), dtype=dtype)
    pairs = []
    for rows, v in parts:
        v = constant(v)
        out[rows] = v.value
        pairs.append((v, lambda g, rows=rows, shape=v.shape: _unbroadcast(g[rows], shape)))
    return make_op(out, pairs)


def index_add(base, rows, value):
    """``base`` with ``value`` added at integer ``rows`` (repeated rows accumulate)."""
    base, value = constant(base), constant(value)
    out = np.array(base.value, dtype=np.result_type(base.dtype, value.dtype), copy=True)
    np.add.at(out, rows, value.value)
    return make_op(out, [(base, lambda g: g), (value, lambda g, shape=value.shape: _unbroadcast(g[rows], shape))])


def gather_weighted(table, idx, wts):
    """``out[n] = sum_k wts[n, k] * table[idx[n, k]]`` for a ``(M, C)`` table."""
    table = constant(table)
    tv = table.value
    m, c = tv.shape
    out = np.einsum("nk,nkc->nc", wts, tv[idx])

    def vjp(g):
        grad = np.empty((m, c), dtype=g.dtype)
        flat = idx.ravel()
        for ch in range(c):
            grad[:, ch] = np.bincount(flat, weights=(wts * g[:, ch:ch + 1]).ravel(), minlength=m)
        return grad
    return make_op(out.astype(tv.dtype, copy=False), [(table, vjp)])


def stop_gradient(a):
    """Same value, no node: nothing flows back through the result."""
    return TapeValue(value_of(a))


def dot(a, b, axis=-1):
    return sum_(mul(a, b), axis=axis)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=5e-4, **kw):
        arrays = [value_of(p.data if isinstance(p, Parameter) else p) for p in params]
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], lr=lr, **kw)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(f"length mismatch: {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p = np.asarray(p)
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


class Adam:
    """Adam over a group of :class:`Parameter` objects, updated in place."""

    def __init__(self, params: Sequence[Parameter], lr=5e-4, project=None):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr=lr)
        # optional per-parameter projection applied after each step, e.g. clamp to >= 0
        self.project = project or {}

    def step(self, grad_table: dict):
        if not self.params:
            self.state.t += 1
            return
        grads = [grad_table.get(p.name, np.zeros_like(p.data)) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            fn = self.project.get(p.name)
            p.data = fn(d) if fn is not None else d


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_gradient(f, p, h=1e-5):
    """Central differences of a scalar ``f`` at ``p``; ``h`` scalar or per coordinate."""
    p = np.array(p, dtype=np.float64)
    flat = p.reshape(-1)
    hs = np.broadcast_to(np.asarray(h, dtype=np.float64), flat.shape)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + hs[i]
        fp = float(f(p))
        flat[i] = old - hs[i]
        fm = float(f(p))
        flat[i] = old
        grad[i] = (fp - fm) / (2 * hs[i])
    return grad.reshape(p.shape)
