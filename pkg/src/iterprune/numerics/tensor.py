"""Dense tensors and a tape-based reverse-mode autodiff.

Ops executed while a :class:`Tape` is active append a record holding a
closure that maps the output gradient to input gradients.  ``backward``
replays those records in exact reverse order.  Without an active tape the
ops are plain numpy calls with no bookkeeping, which is what evaluation and
activation capture use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, InputError, NumericError, UsageError

DEFAULT_DTYPE = np.float32

_ACTIVE: list["Tape"] = []


class Tensor:
    """An ndarray plus an optional gradient slot.

    ``requires_grad`` marks leaves (parameters) whose gradients ``backward``
    hands back; intermediate tensors only get gradients transiently.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records primitive ops executed inside its ``with`` block."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(op: str, inputs: tuple, out: Tensor, fn) -> Tensor:
    tape = _tape()
    if tape is not None:
        tape.records.append(TapeRecord(op, inputs, out, fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise / algebra ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record("square", (a,), out, lambda g: (2 * a.data * g,))


def tsum(a) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    a = as_tensor(a)
    out = Tensor(a.data.sum(dtype=a.dtype).reshape(()))
    return _record("sum", (a,), out, lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record("matmul", (a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return _record("transpose", (a,), out, lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {shape}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse every axis after the batch axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    return _record("relu", (x,), out, lambda g: (g * (x.data > 0),))


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for a weight stored as (out_features, in_features)."""
    y = matmul(x, transpose(w))
    return add(y, b) if b is not None else y


# -- convolution and pooling ---------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, f, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col.

    ``x`` is (batch, c_in, h, w) and ``f`` is (c_out, c_in, k, k).
    """
    x, f = as_tensor(x), as_tensor(f)
    if x.data.ndim != 4 or f.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and filters, got {x.shape}, {f.shape}")
    bsz, c_in, h, w = x.shape
    c_out, fc, k, k2 = f.shape
    if fc != c_in or k != k2:
        raise DimensionError(f"conv2d: filters {f.shape} do not fit input {x.shape}")
    if stride < 1 or pad < 0 or k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d: invalid geometry k={k} stride={stride} pad={pad} on {h}x{w}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (b, c, ho, wo, k, k) -> (b*ho*wo, c*k*k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, c_in * k * k)
    fmat = f.data.reshape(c_out, -1)
    y = cols @ fmat.T
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    out = Tensor(np.ascontiguousarray(y.reshape(bsz, ho, wo, c_out).transpose(0, 3, 1, 2)))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, c_out)
        gf = (gmat.T @ cols).reshape(f.shape)
        gcols = (gmat @ fmat).reshape(bsz, ho, wo, c_in, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gf]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    inputs = (x, f) if b is None else (x, f, b)
    return _record("conv2d", inputs, out, backward)


def maxpool2d(x, k: int, stride: Optional[int] = None) -> Tensor:
    """Max over k x k windows; gradient goes to the first maximum in row-major order."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    if k < 1 or stride < 1 or k > h or k > w:
        raise DimensionError(f"maxpool2d: window {k} with stride {stride} does not fit {h}x{w}")
    ho, wo = conv_output_size(h, k, stride, 0), conv_output_size(w, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(bsz, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def backward(g):
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        idx = (rows * w + cols) + (np.arange(bsz * c) * h * w).reshape(bsz, c, 1, 1)
        gx = np.bincount(idx.ravel(), weights=g.ravel(), minlength=bsz * c * h * w)
        return (gx.astype(g.dtype).reshape(x.shape),)

    return _record("maxpool2d", (x,), out, backward)


# -- loss ------------------------------------------------------------------------


def softmax_xent(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch, max-subtracted for stability."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = (logsum - z[np.arange(n), labels]).mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    out = Tensor(np.asarray(loss, dtype=logits.dtype).reshape(()))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _record("softmax_xent", (logits,), out, backward)


# -- reverse sweep -----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> list:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Every tensor in ``params`` gets ``.grad`` set (zeros when the loss does
    not depend on it) and the gradients are returned in the same order.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if params is None:
        return []
    out = []
    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        out.append(p.grad)
    return out
