"""Parameter and flop accounting over masks, stability and compression summaries.

Flop convention: one multiply-accumulate is 2 flops.  Dense and conv layers
contribute ``linear`` flops (bias adds are not counted); ReLU and max-pool
contribute 1 flop per surviving output element, reported separately as
``elementwise``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import IntegrityError
from .numerics import conv_output_size


@dataclass
class FootprintReport:
    per_layer: dict
    total: int
    original: int

    @property
    def ratio(self) -> float:
        return self.original / self.total if self.total else math.inf

    @property
    def remaining_pct(self) -> float:
        return 100.0 * self.total / self.original


@dataclass
class FlopReport:
    linear: dict = field(default_factory=dict)
    elementwise: dict = field(default_factory=dict)

    @property
    def total_linear(self) -> int:
        return sum(self.linear.values())

    @property
    def total_elementwise(self) -> int:
        return sum(self.elementwise.values())

    @property
    def total(self) -> int:
        return self.total_linear + self.total_elementwise


@dataclass
class StabilityReport:
    l2: float
    n_entries: int


def count_params(model) -> FootprintReport:
    """Unmasked weight elements plus the biases of surviving units."""
    per_layer = {}
    for l in model.spec.weighted_layers:
        wm = model.weight_mask(l.name)
        w = int(np.prod(l.weight_shape)) if wm is None else int(np.broadcast_to(wm, l.weight_shape).sum())
        b = model.masks.n_alive(l.name) if l.name in model.masks else l.units
        per_layer[l.name] = w + b
    return FootprintReport(per_layer, sum(per_layer.values()), model.spec.total_params)


def count_flops(model, input_shape: Sequence[int] = None) -> FlopReport:
    """Flops for one inference at batch 1 on ``input_shape`` (c, h, w)."""
    shape = tuple(input_shape or model.spec.input_shape)
    rep = FlopReport()
    alive_prev = None  # surviving channels/features of the current activation
    relu_idx = pool_idx = 0
    for l in model.spec.layers:
        if l.kind == "flatten":
            n = int(np.prod(shape))
            if alive_prev is not None:
                alive_prev = alive_prev * (n // shape[0])
            shape = (n,)
        elif l.kind == "dense":
            out = model.masks.n_alive(l.name) if l.name in model.masks else l.units
            n_in = alive_prev if (model.cascade and alive_prev is not None) else l.dims[0]
            rep.linear[l.name] = 2 * out * n_in
            alive_prev, shape = out, (l.units,)
        elif l.kind == "conv2d":
            c_in, c_out, k = l.dims
            h = conv_output_size(shape[1], k, l.stride, l.pad)
            w = conv_output_size(shape[2], k, l.stride, l.pad)
            out = model.masks.n_alive(l.name) if l.name in model.masks else c_out
            eff_in = alive_prev if (model.cascade and alive_prev is not None) else c_in
            rep.linear[l.name] = 2 * out * eff_in * k * k * h * w
            alive_prev, shape = out, (c_out, h, w)
        elif l.kind == "relu":
            relu_idx += 1
            live = alive_prev if alive_prev is not None else shape[0]
            rep.elementwise[f"relu{relu_idx}"] = live * int(np.prod(shape[1:]))
        elif l.kind == "maxpool":
            pool_idx += 1
            k, s = l.dims
            shape = (shape[0], conv_output_size(shape[1], k, s, 0), conv_output_size(shape[2], k, s, 0))
            live = alive_prev if alive_prev is not None else shape[0]
            rep.elementwise[f"pool{pool_idx}"] = live * shape[1] * shape[2]
    return rep


def stability(pruned, original, masks=None) -> StabilityReport:
    """L2 distance over unmasked weight entries between two same-architecture models."""
    if pruned.spec.name != original.spec.name or pruned.params.keys() != original.params.keys():
        raise IntegrityError("stability needs two models with the same architecture")
    ref = pruned if masks is None else _with_masks(pruned, masks)
    total, n = 0.0, 0
    for l in pruned.spec.weighted_layers:
        a, b = pruned.params[f"{l.name}.w"].data, original.params[f"{l.name}.w"].data
        if a.shape != b.shape:
            raise IntegrityError(f"{l.name}: shape {a.shape} vs {b.shape}")
        keep = np.broadcast_to(ref.expanded_mask(l.name), a.shape).astype(bool)
        diff = a.astype(np.float64)[keep] - b.astype(np.float64)[keep]
        total += float(diff @ diff)
        n += int(keep.sum())
    return StabilityReport(math.sqrt(total), n)


def _with_masks(model, masks):
    view = model.copy()
    view.masks = masks.copy()
    return view


@dataclass
class DropResult:
    ratio: float
    round: int
    qualified: bool
    flops: int = 0


def compression_at_drop(records: Sequence, baseline_acc: float, drop: float) -> DropResult:
    """Largest compression ratio among pruned rounds with accuracy >= baseline - drop.

    Round 0 (the unpruned model) never counts as a qualifying round.
    ``records`` need ``round``, ``remaining_params``, ``original_params``,
    ``top1_acc`` and ``flops`` attributes; accuracies and ``drop`` are in
    percentage points.  Without a qualifying round the result is 1.0x with
    ``qualified=False``.
    """
    if not records:
        raise ValueError("no records")
    best = None
    for rec in records:
        if rec.round == 0 or rec.top1_acc + 1e-9 < baseline_acc - drop:
            continue
        ratio = rec.original_params / rec.remaining_params
        if best is None or ratio > best.ratio or (ratio == best.ratio and rec.flops < best.flops):
            best = DropResult(ratio, rec.round, True, rec.flops)
    if best is None:
        return DropResult(1.0, -1, False, records[0].flops)
    return best
