"""Dense tensors with reverse-mode differentiation.

A deliberately small engine: rank 1-3 arrays backed by numpy, a tape built
implicitly through parent links, and a handful of fused kernels (softmax,
layer norm, l2 normalisation) whose backward passes are written by hand.

Broadcasting is restricted to
  * identical shapes,
  * a rank-1 vector over the trailing axis of a rank-2/3 tensor,
  * rank-matched tensors whose mismatched axes have size 1,
  * python scalars.
Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not 1 <= arr.ndim <= 3:
            raise DimensionError(f"tensor rank must be 1-3, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a single element, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype).reshape(1) if np.ndim(x) == 0 else x, dtype=like.dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    if len(b) == 1 and len(a) >= 2 and b[0] == a[-1]:
        return
    if len(a) == 1 and len(b) >= 2 and a[0] == b[-1]:
        return
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return
    raise DimensionError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim > 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, np.ndarray):
        b = Tensor(b, dtype=a.dtype)
    if not isinstance(b, Tensor):
        return _result(a.data + b, (a,), lambda g: (g,))
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, np.ndarray):
        b = Tensor(b, dtype=a.dtype)
    if not isinstance(b, Tensor):
        return _result(a.data - b, (a,), lambda g: (g,))
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, np.ndarray):
        b = Tensor(b, dtype=a.dtype)
    if not isinstance(b, Tensor):
        c = b
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, np.ndarray):
        b = Tensor(b, dtype=a.dtype)
    if not isinstance(b, Tensor):
        c = b
        return _result(a.data / c, (a,), lambda g: (g / c,))
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), back)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    if p == 0:
        return _result(np.ones_like(ad), (a,), lambda g: (np.zeros_like(g),))

    def back(g):
        if p >= 1:
            return (g * p * ad ** (p - 1),)
        safe = np.where(ad != 0, ad, 1.0)
        return (np.where(ad != 0, g * p * safe ** (p - 1), 0.0),)

    return _result(ad**p, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation; smooth everywhere, which keeps finite differences honest."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), back)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = ~(a.data < lo)  # NaN passes through rather than being clamped into a finite value
    return _result(np.where(keep, a.data, lo).astype(a.dtype), (a,), lambda g: (g * keep,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# -- linear algebra / shape ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), batched (B,m,k)@(B,k,n), or (B,m,k)@(k,n) with shared right operand."""
    sa, sb = a.shape, b.shape
    ok = (
        (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0])
        or (len(sa) == 3 and len(sb) == 3 and sa[0] == sb[0] and sa[2] == sb[1])
        or (len(sa) == 3 and len(sb) == 2 and sa[2] == sb[0])
    )
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {sa} x {sb}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim == 3:
            gb = np.einsum("bmk,bmn->kn", ad, g)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {old} into {shape}")
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat of an empty list")
    ranks = {p.ndim for p in parts}
    if len(ranks) != 1:
        raise DimensionError(f"concat rank mismatch: {[p.shape for p in parts]}")
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise DimensionError(f"concat shape mismatch on axis {axis}: {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), back)


def narrow(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise DimensionError(f"narrow [{start}, {stop}) out of range for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), back)


def index_select(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    ax = axis % a.ndim
    ind = np.asarray(indices, dtype=np.int64)
    if ind.ndim != 1 or ind.size == 0:
        raise DimensionError("index_select needs a nonempty 1-d index list")
    if ind.min() < 0 or ind.max() >= a.shape[ax]:
        raise DimensionError(f"index out of range for axis {ax} of {a.shape}")
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (slice(None),) * ax + (ind,), g)
        return (full,)

    return _result(np.take(a.data, ind, axis=ax), (a,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for a 1-d or 2-d integer id array."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim not in (1, 2):
        raise DimensionError(f"embedding needs a 2-d table and 1/2-d ids, got {table.shape}, {ids.shape}")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), back)


# -- reductions ------------------------------------------------------------------

def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _result(a.data.sum().reshape(1), (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    ax = axis % a.ndim
    out = a.data.sum(axis=ax, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax) if a.ndim > 1 else g.reshape(())
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis % a.ndim]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- fused kernels -----------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(out, (x, gain, bias), back)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ||x|| along ``axis``; caller guarantees nonzero norms."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n <= 0):
        raise NumericError("l2_normalize on a zero vector")
    out = x.data / n

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,)

    return _result(out, (x,), back)


def stack_rows(rows: Iterable[Tensor]) -> Tensor:
    """Stack rank-r tensors into rank r+1 along a new leading axis."""
    rows = list(rows)
    return concat([reshape(r, (1,) + r.shape) for r in rows], axis=0)
