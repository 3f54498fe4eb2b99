"""Dense float64 tensors with reverse-mode differentiation.

Each operation records its parents and a closure mapping the output gradient
to one gradient per parent.  ``backward`` walks the recorded graph once in
reverse topological order, keeping intermediate gradients in a local table and
accumulating only into tensors that asked for a gradient buffer.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, NonFiniteEvaluation, NotScalar, ShapeMismatch

# Cleared by tests that deliberately push non-finite values through.
CHECK_FINITE = True

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (evaluation passes, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        arr = _as_array(data)
        if CHECK_FINITE and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op or 'constructor'}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.retains_grad = False
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic accessors --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise NotScalar(f"expected a scalar tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn, op=op)
    return Tensor(data, op=op)


# -- graph traversal --------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | float | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every participating leaf.

    Intermediate tensors receive a gradient buffer only when ``retain_grad``
    was requested.  Calling twice without ``zero_grad`` accumulates.  A
    non-scalar ``loss`` needs ``seed`` of its own shape (a vector-Jacobian product).
    """
    if loss.size != 1 and (seed is None or np.shape(seed) != loss.shape):
        _not_scalar(loss)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) * (1.0 if seed is None else seed)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents or node.retains_grad:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)
    return _make(out, (a, b), fn, "div")


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# -- reductions and shape -----------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def order_free_mean(a, axis: int) -> Tensor:
    """Mean along ``axis`` whose value does not depend on the order of the entries.

    Entries are summed in sorted order, so permuting them along ``axis``
    leaves the result bit-identical.
    """
    a = _wrap(a)
    n = a.shape[axis]
    shape = a.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape),)
    return _make(np.sort(a.data, axis=axis).sum(axis=axis) / n, (a,), fn, "order_free_mean")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return _make(a.data[key], (a,), fn, "getitem")


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape
    key = (slice(None),) * axis + (idx,)

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return _make(np.take(a.data, idx, axis=axis), (a,), fn, "take")


def concat(ts: Iterable, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in ts]
    ax = axis % ts[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


# -- elementwise nonlinearities ---------------------------------------------

def tabs(a) -> Tensor:
    a = _wrap(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), fn, "softmax")


def reverse_gradient(a, scale: float) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by ``-scale``."""
    a = _wrap(a)
    return _make(a.data.copy(), (a,), lambda g: (g * -scale,), "reverse_gradient")


def detach(a) -> Tensor:
    return Tensor(_wrap(a).data.copy(), op="detach")


# -- fused pairwise op used by the edge networks -----------------------------

def _pair_chunk(n_rows: int, n_cols: int, width: int, budget: int = 1 << 21) -> int:
    return max(1, min(n_rows, budget // max(1, n_cols * width)))


def pairwise_absdiff_affine(vs, vt, w, b, chunk: int | None = None) -> Tensor:
    """Rows ``i*C + j`` hold ``|vs[i] - vt[j]| @ w + b``.

    The ``R x C x D`` difference tensor is only ever built ``chunk`` source
    rows at a time, in the forward and in the backward pass.
    """
    vs, vt, w, b = _wrap(vs), _wrap(vt), _wrap(w), _wrap(b)
    if vs.ndim != 2 or vt.ndim != 2 or vs.shape[1] != vt.shape[1] or w.shape[0] != vs.shape[1]:
        raise ShapeMismatch(f"pairwise op: vs {vs.shape}, vt {vt.shape}, w {w.shape}")
    R, D = vs.shape
    C = vt.shape[0]
    H = w.shape[1]
    step = chunk or _pair_chunk(R, C, D)
    S, T, W = vs.data, vt.data, w.data
    out = np.empty((R * C, H))
    for r0 in range(0, R, step):
        r1 = min(R, r0 + step)
        d = np.abs(S[r0:r1, None, :] - T[None, :, :]).reshape(-1, D)
        out[r0 * C:r1 * C] = d @ W
    out += b.data

    def fn(g):
        gS = np.zeros_like(S)
        gT = np.zeros_like(T)
        gW = np.zeros_like(W)
        for r0 in range(0, R, step):
            r1 = min(R, r0 + step)
            diff = S[r0:r1, None, :] - T[None, :, :]
            gc = g[r0 * C:r1 * C]
            gW += np.abs(diff).reshape(-1, D).T @ gc
            gd = (gc @ W.T).reshape(r1 - r0, C, D) * np.sign(diff)
            gS[r0:r1] = gd.sum(axis=1)
            gT -= gd.sum(axis=0)
        return gS, gT, gW, _unbroadcast(g, b.shape)
    return _make(out, (vs, vt, w, b), fn, "pairwise_absdiff_affine")


# -- verification helpers ----------------------------------------------------

def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                               indices: Sequence[int] | None = None) -> Tensor:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    ``f`` receives a perturbed copy of ``x`` as an ndarray.  With ``indices``
    only those flat coordinates are probed and the result has that length.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    out = np.zeros(len(coords) if indices is not None else flat.size)
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(base))
        flat[i] = old - h
        fm = float(f(base))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"f is not finite around coordinate {i}")
        out[n] = (fp - fm) / (2.0 * h)
    if indices is None:
        out = out.reshape(base.shape)
    return Tensor(out)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` on flattened arrays."""
    a = np.ravel(a.data if isinstance(a, Tensor) else a)
    b = np.ravel(b.data if isinstance(b, Tensor) else b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)
