"""Nesterov-flavoured Adam and SGD plus epoch-indexed learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError, NumericError, UsageError


@dataclass
class OptimizerState:
    """Per-parameter buffers and hyperparameters for one optimizer.

    ``kind`` is ``"nadam"`` (buffers ``m`` and ``v``) or ``"nsgd"`` (buffer
    ``velocity``).  ``step`` counts completed updates.
    """

    kind: str
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def hyperparams(self) -> dict:
        return {
            "kind": self.kind, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "momentum": self.momentum, "weight_decay": self.weight_decay, "step": self.step,
        }

    def reset(self) -> None:
        """Zero every buffer and the step counter, keeping hyperparameters."""
        for bufs in self.buffers.values():
            for arr in bufs:
                arr.fill(0)
        self.step = 0

    def copy(self) -> "OptimizerState":
        new = OptimizerState(**{k: v for k, v in self.hyperparams().items()})
        new.buffers = {k: [a.copy() for a in v] for k, v in self.buffers.items()}
        return new


def init_state(kind: str, params: Sequence[np.ndarray], **hyper) -> OptimizerState:
    """Fresh state with zeroed buffers shaped like ``params``."""
    if kind == "nadam":
        names = ("m", "v")
    elif kind == "nsgd":
        names = ("velocity",)
    else:
        raise UsageError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, **hyper)
    state.buffers = {n: [np.zeros_like(p) for p in params] for n in names}
    return state


def _check(params, grads, state: OptimizerState, lr: float, names) -> None:
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for name in names:
        bufs = state.buffers.get(name)
        if bufs is None or len(bufs) != len(params):
            raise DimensionError(f"optimizer buffer {name!r} does not match the parameter list")
        for p, b in zip(params, bufs):
            if p.shape != b.shape:
                raise DimensionError(f"buffer shape {b.shape} != parameter shape {p.shape}")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")


def nadam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """One in-place Nesterov-Adam update.

    With t the 1-based step index and L2 decay folded into the gradient::

        g    <- g + wd * w
        m    <- b1 * m + (1 - b1) * g
        v    <- b2 * v + (1 - b2) * g^2
        mhat  = m / (1 - b1^(t+1))
        ghat  = g / (1 - b1^t)
        mbar  = b1 * mhat + (1 - b1) * ghat
        w    <- w - lr * mbar / (sqrt(v / (1 - b2^t)) + eps)
    """
    _check(params, grads, state, lr, ("m", "v"))
    t = state.step + 1
    b1, b2, wd = state.beta1, state.beta2, state.weight_decay
    c_m = b1 / (1.0 - b1 ** (t + 1))
    c_g = (1.0 - b1) / (1.0 - b1 ** t)
    c_v = 1.0 / (1.0 - b2 ** t)
    for p, g, m, v in zip(params, grads, state.buffers["m"], state.buffers["v"]):
        # in-place with two scratch arrays; this loop dominates training time
        dt = np.result_type(p, g, m)
        if wd:
            decayed = np.multiply(p, wd, dtype=dt)
            decayed += g
            g = decayed
        tmp = np.multiply(g, 1.0 - b1, dtype=dt)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.multiply(v, c_v, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        mbar = np.multiply(m, c_m, dtype=dt)
        g_term = np.multiply(g, c_g, dtype=dt)
        mbar += g_term
        mbar *= lr
        mbar /= tmp
        p -= mbar.astype(p.dtype, copy=False)
    state.step = t


def nsgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """One in-place SGD update with Nesterov momentum.

    ``g <- g + wd*w; buf <- mu*buf + g; w <- w - lr*(g + mu*buf)``
    """
    _check(params, grads, state, lr, ("velocity",))
    mu, wd = state.momentum, state.weight_decay
    for p, g, buf in zip(params, grads, state.buffers["velocity"]):
        if wd:
            g = g + wd * p
        buf *= mu
        buf += g
        p -= (lr * (g + mu * buf)).astype(p.dtype, copy=False)
    state.step += 1


def optimizer_step(params, grads, state: OptimizerState, lr: float) -> None:
    if state.kind == "nadam":
        nadam_step(params, grads, state, lr)
    elif state.kind == "nsgd":
        nsgd_step(params, grads, state, lr)
    else:
        raise UsageError(f"unknown optimizer kind {state.kind!r}")


@dataclass(frozen=True)
class Segment:
    """Rate ``value`` on epochs ``[start, end)``; with ``warmup`` it ramps as value*t/end."""

    start: int
    end: int
    value: float
    warmup: bool = False


@dataclass
class LrSchedule:
    """Learning rate as a function of the epoch index.

    ``position`` is the epoch the training loop is about to run; rewinding
    only moves this cursor, ``lr_at`` never looks at it.
    """

    segments: tuple
    position: int = 0

    @property
    def kind(self) -> str:
        if len(self.segments) == 1 and not self.segments[0].warmup:
            return "constant"
        return "piecewise-with-warmup"

    @property
    def total_epochs(self) -> int:
        return self.segments[-1].end

    def current(self) -> float:
        return lr_at(self, self.position)

    def rewind(self, epoch: int) -> None:
        if not 0 <= epoch <= self.total_epochs:
            raise UsageError(f"cannot rewind schedule to epoch {epoch}")
        self.position = epoch

    def to_dict(self) -> dict:
        return {
            "segments": [[s.start, s.end, s.value, s.warmup] for s in self.segments],
            "position": self.position,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LrSchedule":
        segs = tuple(Segment(int(a), int(b), float(v), bool(w)) for a, b, v, w in d["segments"])
        return cls(segs, int(d.get("position", 0)))


def constant_schedule(rate: float, epochs: int) -> LrSchedule:
    return LrSchedule((Segment(0, epochs, rate),))


def piecewise_schedule(pieces: Sequence[tuple]) -> LrSchedule:
    """Build from ``(start, end, value[, warmup])`` tuples covering [0, T) contiguously."""
    segs = []
    expected = 0
    for piece in pieces:
        start, end, value = piece[:3]
        warmup = bool(piece[3]) if len(piece) > 3 else False
        if start != expected or end <= start:
            raise UsageError(f"schedule segments must be contiguous from 0, got {pieces}")
        segs.append(Segment(int(start), int(end), float(value), warmup))
        expected = end
    return LrSchedule(tuple(segs))


def resnet_imagenet_schedule() -> LrSchedule:
    """90-epoch step schedule with an 8-epoch linear warmup."""
    return piecewise_schedule([
        (0, 8, 0.4, True), (8, 30, 0.4), (30, 60, 0.04), (60, 80, 0.004), (80, 90, 0.0004),
    ])


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for ``epoch``; raises ``UsageError`` outside ``[0, T)``."""
    if not 0 <= epoch < schedule.total_epochs:
        raise UsageError(f"epoch {epoch} outside schedule range [0, {schedule.total_epochs})")
    for seg in schedule.segments:
        if seg.start <= epoch < seg.end:
            return seg.value * epoch / seg.end if seg.warmup else seg.value
    raise UsageError(f"no schedule segment covers epoch {epoch}")  # pragma: no cover

