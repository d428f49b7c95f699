"""Dense float tensors with a reverse-mode gradient tape.

Arrays are stored as float32 by default. Inside ``shadow64()`` every tensor
built on the current thread is float64, which is what the finite-difference
checks run under.

Recording only happens while a :class:`GradTape` is active on the calling
thread and at least one input of an op requires grad::

    with GradTape() as tape:
        loss = ops.sum(w * w)
    grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_local = threading.local()


class ShapeError(ValueError):
    """Operand extents do not agree."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, double backward, ...)."""


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextmanager
def shadow64():
    """Build every tensor on this thread in float64 for the duration."""
    prev = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = prev


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """Row-major dense array plus an optional gradient slot.

    The constructor always copies, so a tensor never aliases caller data.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=default_dtype(), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=default_dtype())
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators delegate to the module-level ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=default_dtype()))


class _Entry:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`.

    A tape belongs to the thread that entered it. After one backward pass the
    tape must be ``reset()`` before it can be replayed again.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append(_Entry(out, parents, backward))

    def reset(self) -> None:
        self._entries.clear()
        self._consumed = False

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every grad-requiring leaf.

        Returns a map from leaf tensor to gradient array; each leaf's ``.grad``
        is set as well. Tensors in ``wrt`` that the loss never touched get
        exact zeros.
        """
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("tape already replayed; call reset() before another backward")
        self._consumed = True

        produced = {id(e.out) for e in self._entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self._entries):
            for p in entry.parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            pgrads = entry.backward(g)
            for p, gp in zip(entry.parents, pgrads):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss

        out: dict[Tensor, np.ndarray] = {}
        targets = list(leaves.values())
        if wrt is not None:
            seen = set(leaves)
            targets += [t for t in wrt if id(t) not in seen]
        for t in targets:
            g = grads.get(id(t))
            g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g
            out[t] = g
        return out


def _finish(out_arr: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_arr, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, tuple(parents), backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _finish(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _finish(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _finish(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _finish(out, (a, b),
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _finish(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _finish(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _finish(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _finish(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = expit(a.data)
    return _finish(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0))))
    return _finish(out, (a,), lambda g: (g * expit(x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _finish(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _finish(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)

    return _finish(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _finish(out, (a, b), backward)


def conv1d_depthwise(x, weight, bias=None, padding: str = "same") -> Tensor:
    """Per-channel 1-D cross-correlation along the token axis; output length = input length.

    ``x`` is (..., T, C), ``weight`` is (C, K), ``bias`` is (C,).
    ``padding`` places the K-1 zeros: "same" puts (K-1)//2 in front and the
    rest behind, "causal" puts all of them in front (output t sees inputs
    <= t), "anticausal" puts all of them behind (output t sees inputs >= t).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    C, K = weight.shape
    if x.shape[-1] != C:
        raise ShapeError(f"conv1d_depthwise: input channels {x.shape} vs weight {weight.shape}")
    T = x.shape[-2]
    offsets = {"same": (K - 1) // 2, "causal": K - 1, "anticausal": 0}
    if padding not in offsets:
        raise ValueError(f"conv1d_depthwise: unknown padding {padding!r}")
    left = offsets[padding]
    pad = [(0, 0)] * (x.ndim - 2) + [(left, K - 1 - left), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros(x.shape, dtype=x.data.dtype)
    for k in range(K):
        out += xp[..., k:k + T, :] * weight.data[:, k]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents = (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        lead = tuple(range(g.ndim - 1))
        for k in range(K):
            gxp[..., k:k + T, :] += g * weight.data[:, k]
            gw[:, k] = (g * xp[..., k:k + T, :]).sum(axis=lead)
        gx = gxp[..., left:left + T, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    return _finish(out, parents, backward)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _finish(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    basic = not any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _finish(np.array(out), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _finish(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _finish(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _finish(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (unbroadcast(g, a.shape),))
