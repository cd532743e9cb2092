"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active *and* at least
one input requires a gradient, so plain inference pays no bookkeeping cost::

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)

Only leaves created with ``trainable=True`` receive gradients.
"""

from __future__ import annotations

import math
import struct
import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An n-d float64 array, optionally a trainable leaf."""

    __slots__ = ("data", "trainable", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = " trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    @property
    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.trainable:
                    seen.setdefault(id(t), t)
        return list(seen.values())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _record("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (a,), vjp)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    r2 = np.where(r2 > 0, r2, 1.0)
    return _record("atan2", np.arctan2(yd, xd), (y, x),
                   lambda g: (_unbroadcast(g * xd / r2, yd.shape), _unbroadcast(-g * yd / r2, xd.shape)))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# shape and reductions


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    s = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(s),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _record("swapaxes", np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, idx) -> Tensor:
    s = a.shape

    def vjp(g):
        out = np.zeros(s)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _record("getitem", a.data[idx], (a,), vjp)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return _record("stack", np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    s = a.shape
    return _record("broadcast_to", np.broadcast_to(a.data, shape), (a,),
                   lambda g: (_unbroadcast(g, s),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    s = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# network primitives


def softmax_rows(a: Tensor, mask: np.ndarray | None = None, mode: str = "presoftmax") -> Tensor:
    """Softmax over the last axis with an optional binary mask.

    ``presoftmax`` sends masked logits to -inf before normalising, so masked
    columns get exactly zero weight and the remaining row renormalises.
    ``literal`` multiplies the normalised weights by the mask afterwards and
    leaves rows unrenormalised.
    """
    x = a.data
    if mask is not None and mode == "presoftmax":
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if mask is not None and mode == "literal":
        out = p * mask

        def vjp(g):
            gp = g * mask
            return (p * (gp - (gp * p).sum(axis=-1, keepdims=True)),)
    elif mask is not None and mode != "presoftmax":
        raise ValueError(f"unknown mask mode {mode!r}")
    else:
        out = p

        def vjp(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx = gg = gb = None
        if a.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", xhat * gd + bias.data, (a, gain, bias), vjp)


def resample(a: Tensor, index: np.ndarray, weight: np.ndarray) -> Tensor:
    """Fixed-weight gather: ``out[m] = sum_c weight[m, c] * a[index[m, c]]``.

    ``a`` is (P, C) over flattened pixels; this is the linear core of
    bilinear warping and its transpose is a scatter-add.
    """
    x = a.data
    p = x.shape[0]
    out = (x[index] * weight[..., None]).sum(axis=1)

    def vjp(g):
        contrib = g[:, None, :] * weight[..., None]
        flat = index.reshape(-1)
        gx = np.empty_like(x)
        c = contrib.reshape(-1, x.shape[1])
        for ch in range(x.shape[1]):
            gx[:, ch] = np.bincount(flat, weights=c[:, ch], minlength=p)
        return (gx,)

    return _record("resample", out, (a,), vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by trainable leaf.

    Trainable leaves the loss does not depend on are absent from the result.
    """
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    if not any(n.out is loss for n in reversed(tape.nodes)):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if t.trainable:
                leaves[key] = t
    return {t: grads[k].reshape(t.shape) for k, t in leaves.items()}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-4,
               coords: np.ndarray | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``coords`` optionally restricts the comparison to a subset of flat indices.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    was = x.trainable
    x.trainable = x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise NonFiniteError("f(x) is not finite")
        analytic = backward(tape, y).get(x, np.zeros(x.shape)).reshape(-1)
    finally:
        x.trainable = x.requires_grad = was
    base = x.data.copy()
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        x.data = flat.reshape(base.shape)
        fp = f(x).item()
        flat[i] = orig - step
        x.data = flat.reshape(base.shape)
        fm = f(x).item()
        flat[i] = orig
        fd = (fp - fm) / (2 * step)
        err = abs(analytic[i] - fd) / (abs(analytic[i]) + abs(fd) + 1e-12)
        worst = max(worst, err)
    x.data = base
    return worst


# ---------------------------------------------------------------------------
# binary blob format

_MAGIC = b"CTNS"
_VERSION = 1


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    data = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    head = _MAGIC + struct.pack("<HI", _VERSION, data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape)
    return head + data.tobytes()


def tensor_from_bytes(blob: bytes) -> Tensor:
    if blob[:4] != _MAGIC:
        raise ValueError("not a tensor blob")
    version, rank = struct.unpack_from("<HI", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported tensor blob version {version}")
    off = 10
    shape = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
    return Tensor(data.astype(np.float64))
