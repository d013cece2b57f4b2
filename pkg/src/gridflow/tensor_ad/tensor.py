"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.  Broadcasting is deliberately limited to adding a bias
vector to the rows of a matrix.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class BackwardOnNonScalar(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, teacher forwards, EMA arithmetic)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise BackwardOnNonScalar(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return slice_(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
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


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _index(idx) -> np.ndarray:
    return np.asarray(idx, dtype=np.int64)


# -- elementwise and linear algebra ------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]


def add(a: Tensor, b: Tensor) -> Tensor:
    if _is_bias(a, b):
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if _is_bias(a, b):
        return _make(a.data - b.data, (a, b), lambda g: (g, -g.sum(axis=0)))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def row_scale(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of a matrix by ``w[i]``."""
    if a.data.ndim != 2 or w.shape != (a.shape[0],):
        raise ShapeMismatch(f"row_scale: {a.shape} rows vs weights {w.shape}")
    ad, wd = a.data, w.data
    return _make(
        ad * wd[:, None], (a, w), lambda g: (g * wd[:, None], (g * ad).sum(axis=1))
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


# -- shape ops -----------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if _fancy(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), backward)


def _fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- reductions ------------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g.reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    out = a.data.sum() if axis is None else a.data.sum(axis=axis)
    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / max(count, 1))


def max_(a: Tensor, axis: int = 0) -> Tensor:
    """Max over ``axis``; the gradient is shared equally between tied maxima."""
    out = a.data.max(axis=axis)
    hit = a.data == np.expand_dims(out, axis)
    share = hit / hit.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (share * np.expand_dims(g, axis),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each row over the feature axis, then apply gain and bias."""
    x = a.data
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (a, gain, bias), backward)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error."""
    _check_same(pred, target, "l1_loss")
    return mean(abs_(sub(pred, target)))


# -- index routing ---------------------------------------------------------------


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    # a 0/1 CSR product is several times faster than np.add.at
    m = len(idx)
    s = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    return np.asarray(s @ g, dtype=DTYPE)


def _segment_reduce_max(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Per-segment max along axis 0; empty segments give ``-inf``."""
    out = np.full((n,) + x.shape[1:], -np.inf)
    if len(seg) == 0:
        return out
    order = np.argsort(seg, kind="stable")
    ss = seg[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    out[ss[starts]] = np.maximum.reduceat(x[order], starts, axis=0)
    return out


def gather(a: Tensor, idx) -> Tensor:
    """Rows ``a[idx]`` (repeats allowed)."""
    idx = _index(idx)
    n = a.shape[0]
    return _make(a.data[idx], (a,), lambda g: (_scatter_rows(g, idx, n),))


def scatter_add(a: Tensor, idx, n: int) -> Tensor:
    """``out[idx[k]] += a[k]`` into ``n`` zero rows; adjoint of :func:`gather`."""
    idx = _index(idx)
    if idx.shape != (a.shape[0],):
        raise ShapeMismatch(f"scatter_add: {len(idx)} indices for {a.shape[0]} rows")
    return _make(_scatter_rows(a.data, idx, n), (a,), lambda g: (g[idx],))


def segment_sum(a: Tensor, seg, n: int) -> Tensor:
    return scatter_add(a, seg, n)


def segment_mean(a: Tensor, seg, n: int) -> Tensor:
    seg = _index(seg)
    counts = np.bincount(seg, minlength=n).astype(DTYPE)
    return row_scale(segment_sum(a, seg, n), Tensor(1.0 / np.maximum(counts, 1.0)))


def segment_max(a: Tensor, seg, n: int) -> Tensor:
    """Per-segment column max of a matrix; empty segments yield zero rows."""
    seg = _index(seg)
    x = a.data
    out = _segment_reduce_max(x, seg, n)
    out[np.isneginf(out)] = 0.0
    hit = (x == out[seg]).astype(DTYPE)
    ties = _scatter_rows(hit, seg, n)
    share = hit / ties[seg]
    return _make(out, (a,), lambda g: (share * g[seg],))


def segment_softmax(a: Tensor, seg, n: int) -> Tensor:
    """Softmax of a vector within each segment."""
    seg = _index(seg)
    x = a.data
    if x.ndim != 1 or seg.shape != x.shape:
        raise ShapeMismatch(f"segment_softmax: {x.shape} values vs {seg.shape} segments")
    top = _segment_reduce_max(x, seg, n)
    e = np.exp(x - top[seg])
    s = e / np.bincount(seg, weights=e, minlength=n)[seg]

    def backward(g):
        dot = np.bincount(seg, weights=g * s, minlength=n)
        return (s * (g - dot[seg]),)

    return _make(s, (a,), backward)


def spmm(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if a.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm: {a.shape} @ {x.shape}")
    at = a.T.tocsr()
    return _make(np.asarray(a @ x.data, dtype=DTYPE), (x,), lambda g: (np.asarray(at @ g, dtype=DTYPE),))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as one node."""
    if b is None:
        return matmul(x, w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data
    return _make(
        out,
        (x, w, b),
        lambda g: (g @ wd.T if x.requires_grad else None, xd.T @ g, g.sum(axis=0)),
    )


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        fp = f()
        arr[i] = orig - eps
        fm = f()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out


def gradcheck(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Worst relative gap between backward() and central differences.

    ``f`` maps leaf tensors (one per array) to a scalar.  For each input the
    error is ``max|analytic - fd| / max(max|fd|, 1e-8)``; the worst input wins.
    """
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    f(*leaves).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)

        def value():
            with no_grad():
                return f(*[Tensor(a) for a in arrays]).item()

        fd = numerical_grad(value, arr, eps)
        worst = max(worst, float(np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-8)))
    return worst


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
