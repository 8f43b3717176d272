"""Structured pruning policies: L1-norm (ILP), activation mean (IAP) and
adaptive activation threshold (AIAP).

All policies produce a :class:`PruneDecision`; :func:`apply_decision` is the
only place masks change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import PolicyError, UsageError
from .masks import MaskRegistry

POLICIES = ("ilp", "iap", "aiap")


@dataclass
class PruneDecision:
    units: dict = field(default_factory=dict)
    policy: str = ""
    round: int = 0

    @property
    def empty(self) -> bool:
        return not any(len(v) for v in self.units.values())

    def count(self) -> int:
        return sum(len(v) for v in self.units.values())


@dataclass
class AiapState:
    """Adaptive threshold bookkeeping.

    ``history[r]`` is the remaining prunable-parameter count after round r,
    with ``history[0]`` the unpruned count.  ``thresholds[r]`` is T[r].
    """

    lam: float = 0.01
    threshold: float = 0.0
    history: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)
    min_progress: float = 0.01

    def record(self, r: int, remaining: int) -> None:
        if r != len(self.history):
            raise UsageError(f"AIAP history expects round {len(self.history)}, got {r}")
        self.history.append(int(remaining))


ActivationStats = dict  # layer name -> per-unit mean activation, 0.0 for masked units


# -- scores ---------------------------------------------------------------------


def unit_l1(weight: np.ndarray) -> np.ndarray:
    """L1 norm of each output unit's weight slice (rows / filters)."""
    return np.abs(weight.reshape(weight.shape[0], -1)).sum(axis=1, dtype=np.float64)


def l1_rank(weights: np.ndarray, masks: MaskRegistry, layer: str) -> np.ndarray:
    """Unmasked units of ``layer`` in ascending L1 order; ties go to the lower index."""
    if layer not in masks:
        raise UsageError(f"{layer} is not prunable")
    alive = masks.alive(layer)
    if alive.size == 0:
        raise PolicyError(f"{layer}: no unmasked units to rank")
    norms = unit_l1(weights)[alive]
    return alive[np.argsort(norms, kind="stable")]


def activation_means(act: np.ndarray, per_element: bool = True) -> np.ndarray:
    """Per-unit activation mean over a captured (b, units, ...) tensor.

    ``per_element`` divides the spatial sum by b*h*w; otherwise by b only,
    which scales each layer by its spatial size.
    """
    if act.ndim < 2:
        raise UsageError(f"activation must have a units axis, got shape {act.shape}")
    b, n = act.shape[:2]
    sums = act.reshape(b, n, -1).sum(axis=(0, 2), dtype=np.float64)
    denom = act[0, 0].size * b if per_element else b
    return sums / denom


def activation_mean(acts: Mapping[str, np.ndarray], layer: str, unit: int, per_element: bool = True) -> float:
    if layer not in acts:
        raise UsageError(f"no captured activation for {layer}")
    return float(activation_means(acts[layer][:, unit:unit + 1], per_element)[0])


def collect_stats(model, batch: np.ndarray, per_element: bool = True) -> ActivationStats:
    """Forward ``batch`` once (no tape) and reduce each prunable layer's activations."""
    _, acts = model.forward(batch, capture=True)
    stats = {}
    for name, mask in model.masks.items():
        means = activation_means(acts[name], per_element)
        means[mask == 0] = 0.0
        stats[name] = means
    return stats


def l1_scores(model) -> dict:
    return {name: unit_l1(model.params[f"{name}.w"].data * model.expanded_mask(name))
            for name in model.masks}


# -- selection ------------------------------------------------------------------


def n_to_prune(rate: float, alive: int) -> int:
    """floor(rate * alive), but never every unit."""
    return min(int(math.floor(rate * alive + 1e-9)), max(alive - 1, 0))


def rank_select(scores: Mapping[str, np.ndarray], masks: MaskRegistry, rates: Mapping[str, float],
                policy: str, r: int = 0) -> PruneDecision:
    """Prune floor(p * m) lowest-scoring unmasked units per layer (ties: lower index)."""
    for cls, p in rates.items():
        if not 0 < p < 1:
            raise UsageError(f"{cls} rate must lie in (0, 1), got {p}")
    units = {}
    for name in masks:
        p = rates[masks.rate_class[name]]
        alive = masks.alive(name)
        k = n_to_prune(p, alive.size)
        if k == 0:
            continue
        order = alive[np.argsort(np.asarray(scores[name])[alive], kind="stable")]
        units[name] = tuple(int(u) for u in np.sort(order[:k]))
    return PruneDecision(units, policy, r)


def ilp_select(model, rates: Mapping[str, float], r: int = 0) -> PruneDecision:
    return rank_select(l1_scores(model), model.masks, rates, "ilp", r)


def iap_select(stats: ActivationStats, masks: MaskRegistry, rates: Mapping[str, float],
               r: int = 0) -> PruneDecision:
    return rank_select(stats, masks, rates, "iap", r)


def aiap_update_threshold(state: AiapState, r: int) -> float:
    """Compute T[r] from the remaining-parameter history and store it.

    T is 0 for r <= 3; afterwards it grows by ``lam`` whenever the previous
    round removed less than 1% of the original prunable parameters.
    """
    if r < 1:
        raise UsageError("threshold rounds start at 1")
    if r <= 3:
        t = 0.0
    else:
        if len(state.history) < r or state.history[0] <= 0:
            raise UsageError(f"AIAP round {r} needs remaining counts for rounds {r - 2} and {r - 1}")
        prev = state.thresholds.get(r - 1, state.threshold)
        d = (state.history[r - 2] - state.history[r - 1]) / state.history[0]
        t = prev + state.lam if d < state.min_progress else prev
    state.threshold = t
    state.thresholds[r] = t
    return t


def aiap_select(stats: ActivationStats, masks: MaskRegistry, threshold: float, r: int = 0) -> PruneDecision:
    """Prune every unmasked unit with mean <= threshold, keeping at least the best unit per layer."""
    units = {}
    for name in masks:
        alive = masks.alive(name)
        if alive.size == 0:
            continue
        means = np.asarray(stats[name])[alive]
        doomed = alive[means <= threshold]
        if doomed.size == alive.size:
            keep = alive[int(np.argmax(means))]
            doomed = doomed[doomed != keep]
        if doomed.size:
            units[name] = tuple(int(u) for u in doomed)
    return PruneDecision(units, "aiap", r)


def apply_decision(masks: MaskRegistry, decision: PruneDecision, model=None) -> MaskRegistry:
    """New registry with the decision's units zeroed.

    With ``model`` given, its masks are replaced and the pruned weights zeroed.
    """
    new = masks.copy()
    for name, units in decision.units.items():
        if name not in new:
            raise UsageError(f"{name} is not prunable")
        new.prune(name, units)
        if new.n_alive(name) == 0:
            raise PolicyError(f"decision would empty layer {name}")
    if model is not None:
        model.masks = new
        model.apply_masks()
    return new
