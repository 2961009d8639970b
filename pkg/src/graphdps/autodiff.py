"""A small reverse-mode automatic differentiation tape over numpy arrays.

Every primitive evaluates eagerly, appends one node to the tape holding its
parents and a vector-Jacobian closure, and returns a :class:`Var`.  Calling
:func:`backward` replays the tape in reverse recording order.

Broadcasting between two recorded variables is limited to scalar-with-array
and row-vector-with-matrix.  Plain numpy arrays mixed into an expression are
constants and may broadcast freely.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class ShapeError(ValueError):
    pass


class Tape:
    """Recording of primitive evaluations, in topological order."""

    def __init__(self):
        self.nodes: list[tuple[tuple[int, ...], Callable | None]] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> "Var":
        """Register a leaf variable."""
        return self._push(np.array(value, dtype=np.float64), (), None)

    def _push(self, value: np.ndarray, parents: tuple, vjp) -> "Var":
        if value.dtype != np.float64:
            value = value.astype(np.float64)
        self.nodes.append((tuple(p.index for p in parents), vjp))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)


class Var:
    __slots__ = ("tape", "index")
    __array_priority__ = 100  # make ndarray OP Var dispatch to Var

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Gradients:
    """Adjoints of a backward pass, indexed by :class:`Var`."""

    def __init__(self, tape: Tape, adj: list):
        self._tape = tape
        self._adj = adj

    def __getitem__(self, v: Var) -> np.ndarray:
        if v.tape is not self._tape:
            raise KeyError("variable belongs to a different tape")
        g = self._adj[v.index]
        return np.zeros_like(v.value) if g is None else g


def backward(loss: Var) -> Gradients:
    """Reverse accumulation from a scalar ``loss``."""
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    adj: list = [None] * (loss.index + 1)
    adj[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        parents, vjp = tape.nodes[i]
        if g is None or vjp is None:
            continue
        for p, gp in zip(parents, vjp(g)):
            if gp is None:
                continue
            adj[p] = gp if adj[p] is None else adj[p] + gp
    adj += [None] * (len(tape.nodes) - len(adj))
    return Gradients(tape, adj)


# --- helpers ---------------------------------------------------------------


def _val(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)


def _check_pair(a, b):
    if not (isinstance(a, Var) and isinstance(b, Var)):
        return
    sa, sb = a.shape, b.shape
    if sa == sb or a.value.size == 1 or b.value.size == 1:
        return
    if len(sa) == 2 and sb == (sa[1],) or len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _record(value, parents, vjps):
    """Push a node; ``vjps`` maps the output adjoint to one adjoint per parent."""
    tape = next((p.tape for p in parents if isinstance(p, Var)), None)
    if tape is None:  # all inputs constant
        return np.asarray(value)
    var_parents = [p for p in parents if isinstance(p, Var)]
    mask = [isinstance(p, Var) for p in parents]

    def vjp(g):
        outs = vjps(g)
        return [o for o, m in zip(outs, mask) if m]

    return tape._push(np.asarray(value), tuple(var_parents), vjp)


def _any_var(*args) -> bool:
    return any(isinstance(a, Var) for a in args)


_scatter_cache: dict = {}


def _scatter_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse (n, len(index)) 0/1 matrix summing rows into ``index`` slots."""
    key = (id(index), n)
    hit = _scatter_cache.get(key)
    if hit is not None and hit[0] is index:
        return hit[1]
    k = len(index)
    mat = sp.csr_matrix((np.ones(k), (index, np.arange(k))), shape=(n, k))
    if len(_scatter_cache) > 256:
        _scatter_cache.clear()
    _scatter_cache[key] = (index, mat)
    return mat


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 2 and index.ndim == 1:
        return np.asarray(_scatter_matrix(index, n) @ values)
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, index, values)
    return out


# --- primitives --------------------------------------------------------------


def add(a, b):
    _check_pair(a, b)
    va, vb = _val(a), _val(b)
    out = va + vb
    if not _any_var(a, b):
        return out
    return _record(out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    _check_pair(a, b)
    va, vb = _val(a), _val(b)
    out = va - vb
    if not _any_var(a, b):
        return out
    return _record(out, (a, b), lambda g: (_unbroadcast(g, va.shape), -_unbroadcast(g, vb.shape)))


def mul(a, b):
    _check_pair(a, b)
    va, vb = _val(a), _val(b)
    out = va * vb
    if not _any_var(a, b):
        return out
    return _record(out, (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def matmul(a, b):
    va, vb = _val(a), _val(b)
    if va.ndim not in (1, 2) or vb.ndim not in (1, 2) or va.shape[-1] != vb.shape[0]:
        raise ShapeError(f"matmul shapes {va.shape} @ {vb.shape}")
    out = va @ vb
    if not _any_var(a, b):
        return out

    def vjp(g):
        if va.ndim == 2 and vb.ndim == 2:
            return g @ vb.T, va.T @ g
        if va.ndim == 2:  # matrix @ vector
            return np.outer(g, vb), va.T @ g
        if vb.ndim == 2:  # vector @ matrix
            return vb @ g, np.outer(va, g)
        return g * vb, g * va

    return _record(out, (a, b), vjp)


def transpose(a):
    va = _val(a)
    if va.ndim != 2:
        raise ShapeError("transpose needs a matrix")
    return _record(va.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    va = _val(a)
    return _record(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def getitem(a, key):
    va = _val(a)
    out = va[key]

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, key, g)
        return (full,)

    return _record(np.array(out), (a,), vjp)


def concat(parts: Sequence, axis: int = -1):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _any_var(*parts):
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(vals))]

    return _record(out, tuple(parts), vjp)


def gather(a, index):
    """Rows ``a[index]``."""
    va = _val(a)
    if not isinstance(index, np.ndarray):
        index = np.asarray(index)
    n = va.shape[0]
    return _record(va[index], (a,), lambda g: (_segment_sum(g, index, n),))


def scatter_add(a, index, n: int):
    """``out[index[k]] += a[k]`` into ``n`` rows."""
    va = _val(a)
    if not isinstance(index, np.ndarray):
        index = np.asarray(index)
    if len(index) != va.shape[0]:
        raise ShapeError("scatter index length must match the number of rows")
    return _record(_segment_sum(va, index, n), (a,), lambda g: (g[index],))


def layer_norm(a, eps: float = 1e-8):
    """Normalize each row (last axis) to zero mean and unit variance."""
    va = _val(a)
    mu = va.mean(axis=-1, keepdims=True)
    xc = va - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(xhat, (a,), vjp)


def selu(a):
    va = _val(a)
    negative = va <= 0
    en = SELU_LAMBDA * SELU_ALPHA * np.exp(va[negative])
    out = np.array(SELU_LAMBDA * va)
    out[negative] = en - SELU_LAMBDA * SELU_ALPHA

    def vjp(g):
        d = np.array(g * SELU_LAMBDA)
        d[negative] = g[negative] * en
        return (d,)

    return _record(out, (a,), vjp)


def sum(a):  # noqa: A001 - mirrors numpy naming
    va = _val(a)
    return _record(np.array(va.sum()), (a,), lambda g: (np.full_like(va, g),))


def mean(a):
    va = _val(a)
    n = va.size
    return _record(np.array(va.mean()), (a,), lambda g: (np.full_like(va, g / n),))


def square(a):
    va = _val(a)
    return _record(va * va, (a,), lambda g: (2.0 * va * g,))


def abs_smooth(a, delta: float = 1e-6):
    """``sqrt(a**2 + delta**2)``, a differentiable stand-in for ``|a|``."""
    va = _val(a)
    r = np.sqrt(va * va + delta * delta)
    return _record(r, (a,), lambda g: (g * va / r,))


def broadcast(a, shape):
    """Scalar to any shape, or row vector ``(n,)`` to matrix ``(m, n)``."""
    va = _val(a)
    shape = tuple(shape)
    if not (va.size == 1 or (len(shape) == 2 and va.shape == (shape[1],))):
        raise ShapeError(f"cannot broadcast {va.shape} to {shape}")
    out = np.broadcast_to(va.reshape(()) if va.size == 1 else va, shape).copy()
    return _record(out, (a,), lambda g: (_unbroadcast(g, va.shape),))


def clip_min(a, floor: float):
    """``max(a, floor)`` with the gradient passed only where ``a > floor``."""
    va = _val(a)
    keep = va > floor
    return _record(np.where(keep, va, floor), (a,), lambda g: (g * keep,))


def custom_vjp(a, value: np.ndarray, vjp: Callable[[np.ndarray], np.ndarray]):
    """Splice an externally differentiated map ``a -> value`` into the tape.

    ``vjp(g)`` must return the adjoint with respect to ``a`` for an output
    adjoint ``g``.
    """
    return _record(np.asarray(value, dtype=np.float64), (a,), lambda g: (vjp(g),))
