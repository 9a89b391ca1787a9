"""Dense float64 tensors with an eager reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Gradients are obtained with
:meth:`Tape.gradient`, which never mutates the tape, so replaying it twice
gives bit-identical results.

Most primitives act on the trailing axes and broadcast over leading batch
axes, which lets the model process every patch of a slide in one call.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_ACTIVE_TAPES: contextvars.ContextVar[tuple] = contextvars.ContextVar("tapes", default=())
_ids = itertools.count()


class Tensor:
    """Immutable float64 array with an identity used by the tape."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable  # upstream grad -> tuple of grads (None where not needed)


@dataclass
class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; nested tapes all record.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        self._token = _ACTIVE_TAPES.set(_ACTIVE_TAPES.get() + (self,))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.reset(self._token)
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list:
        """Gradients of scalar ``target`` w.r.t. ``sources`` (zeros if unreachable)."""
        if target.data.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        grads = {target.id: np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output.id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
        return [np.array(grads.get(s.id, np.zeros_like(s.data))) for s in sources]


def _record(op: str, inputs: tuple, out: np.ndarray, vjp: Callable) -> Tensor:
    tapes = _ACTIVE_TAPES.get()
    needs = bool(tapes) and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        node = Node(op, inputs, result, vjp)
        for tape in tapes:
            tape.nodes.append(node)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    z = x.data
    y = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    s = expit(z)
    return _record("softplus", (x,), y, lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def transpose(x: Tensor) -> Tensor:
    return _record(
        "transpose", (x,), np.swapaxes(x.data, -1, -2),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""

    def vjp(g):
        out = np.zeros_like(x.data)
        out[idx] += g
        return (out,)

    return _record("take", (x,), x.data[idx], vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        "concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _record(
        "broadcast_to", (x,), np.broadcast_to(x.data, shape).copy(),
        lambda g: (_unbroadcast(g, x.shape),),
    )


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.sum(x.data, axis=axis), vjp)


def dot(u: Tensor, v: Tensor) -> Tensor:
    return sum(mul(u, v), axis=-1)


# ---------------------------------------------------------------- model blocks


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = m.data - np.max(m.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record("softmax", (m,), y, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _record("layer_norm", (x, gamma, beta), gamma.data * xhat + beta.data, vjp)


def frobenius_norm(m: Tensor, axis=None) -> Tensor:
    """sqrt(sum of squares); with ``axis`` reduces only those axes.

    The subgradient at the origin is taken as zero.
    """
    n = np.sqrt(np.sum(m.data * m.data, axis=axis))

    def vjp(g):
        nk = n if axis is None else np.expand_dims(n, axis)
        gk = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, gk * m.data / safe, 0.0),)

    return _record("frobenius_norm", (m,), n, vjp)


def outer(u: Tensor, v: Tensor) -> Tensor:
    """u[..., i] * v[..., j]; leading axes are batch axes."""
    u, v = as_tensor(u), as_tensor(v)
    out = u.data[..., :, None] * v.data[..., None, :]

    def vjp(g):
        return (
            _unbroadcast(np.sum(g * v.data[..., None, :], axis=-1), u.shape),
            _unbroadcast(np.sum(g * u.data[..., :, None], axis=-2), v.shape),
        )

    return _record("outer", (u, v), out, vjp)


def gated_unit(h: Tensor, vg: Tensor, ug: Tensor) -> Tensor:
    """tanh(Vg h) * sigmoid(Ug h) for h of shape (..., d) and Vg, Ug of shape (L, d)."""
    if vg.shape != ug.shape or vg.shape[-1] != h.shape[-1]:
        raise ValueError(f"gated_unit shape mismatch: h {h.shape}, Vg {vg.shape}, Ug {ug.shape}")
    rows = h if h.ndim > 1 else reshape(h, (1, h.shape[0]))
    g = mul(tanh(matmul(rows, transpose(vg))), sigmoid(matmul(rows, transpose(ug))))
    return g if h.ndim > 1 else reshape(g, (vg.shape[0],))


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Largest |analytic - numeric| / max(1, |numeric|) over the entries of x."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    (analytic,) = tape.gradient(y, [xt])

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        flat[i] = (fp - fm) / (2.0 * eps)
    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
