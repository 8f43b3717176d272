"""Per-layer binary unit masks."""

from __future__ import annotations

import numpy as np

from .errors import UsageError


class MaskRegistry(dict):
    """Maps prunable layer name -> 0/1 vector over that layer's units.

    ``rate_class`` records whether a layer prunes at the dense or conv rate;
    ``unit_size`` is the number of weight elements plus bias per unit.
    Units only ever go from 1 to 0.
    """

    def __init__(self, *args, rate_class=None, unit_size=None, **kw):
        super().__init__(*args, **kw)
        self.rate_class = dict(rate_class or {})
        self.unit_size = dict(unit_size or {})

    def copy(self) -> "MaskRegistry":
        return MaskRegistry({k: v.copy() for k, v in self.items()},
                            rate_class=self.rate_class, unit_size=self.unit_size)

    def alive(self, layer: str) -> np.ndarray:
        """Indices of unmasked units, ascending."""
        return np.flatnonzero(self[layer] != 0)

    def n_alive(self, layer: str) -> int:
        return int(np.count_nonzero(self[layer]))

    def prune(self, layer: str, units) -> None:
        units = np.asarray(list(units), dtype=np.int64)
        if units.size == 0:
            return
        vec = self[layer]
        if units.min() < 0 or units.max() >= vec.size:
            raise UsageError(f"{layer}: unit index out of range")
        if not vec[units].all():
            dead = units[vec[units] == 0]
            raise UsageError(f"{layer}: units {dead.tolist()} are already pruned")
        vec[units] = 0

    def remaining_prunable(self) -> int:
        """Weights+biases left in prunable layers (no cascade)."""
        return sum(self.n_alive(k) * self.unit_size[k] for k in self)

    def total_prunable(self) -> int:
        return sum(v.size * self.unit_size[k] for k, v in self.items())
