"""Declarative LeNet definitions and the masked forward pass.

Prunable units are output neurons of dense layers and filters of conv
layers.  Each prunable layer is followed by a ReLU; the post-ReLU tensor is
what activation capture returns for that layer, with units on axis 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import DimensionError, UsageError
from .masks import MaskRegistry


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``dims`` holds (in, out) for dense and (c_in, c_out, k) for conv."""

    kind: str
    name: str = ""
    dims: tuple = ()
    prunable: bool = False
    rate_class: str = ""
    stride: int = 1
    pad: int = 0

    @property
    def has_weights(self) -> bool:
        return self.kind in ("dense", "conv2d")

    @property
    def units(self) -> int:
        return self.dims[1]

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.dims[1], self.dims[0])
        c_in, c_out, k = self.dims
        return (c_out, c_in, k, k)

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))

    @property
    def n_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.units


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    layers: list
    seed: int = 0

    def __post_init__(self):
        weighted = [l for l in self.layers if l.has_weights]
        if not weighted or weighted[-1].prunable or any(not l.prunable for l in weighted[:-1]):
            raise UsageError("exactly the final weighted layer must be non-prunable")
        for l in weighted:
            if min(l.weight_shape) < 1:
                raise DimensionError(f"{l.name}: empty weight shape {l.weight_shape}")

    @property
    def weighted_layers(self) -> list:
        return [l for l in self.layers if l.has_weights]

    @property
    def prunable_layers(self) -> list:
        return [l for l in self.layers if l.prunable]

    @property
    def total_params(self) -> int:
        return sum(l.n_params for l in self.weighted_layers)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)


def dense(name, n_in, n_out, prunable=True) -> LayerSpec:
    return LayerSpec("dense", name, (n_in, n_out), prunable, "dense" if prunable else "")


def conv(name, c_in, c_out, k, pad=0, stride=1) -> LayerSpec:
    return LayerSpec("conv2d", name, (c_in, c_out, k), True, "conv", stride, pad)


def lenet300_spec(seed: int = 0) -> ModelSpec:
    return ModelSpec("lenet300", (1, 28, 28), [
        LayerSpec("flatten"),
        dense("fc1", 784, 300), LayerSpec("relu"),
        dense("fc2", 300, 100), LayerSpec("relu"),
        dense("fc3", 100, 10, prunable=False),
    ], seed)


def lenet5_spec(seed: int = 0) -> ModelSpec:
    return ModelSpec("lenet5", (3, 32, 32), [
        conv("conv1", 3, 64, 5, pad=2), LayerSpec("relu"), LayerSpec("maxpool", dims=(2, 2)),
        conv("conv2", 64, 64, 5, pad=2), LayerSpec("relu"), LayerSpec("maxpool", dims=(2, 2)),
        LayerSpec("flatten"),
        dense("fc1", 4096, 1024), LayerSpec("relu"),
        dense("fc2", 1024, 10, prunable=False),
    ], seed)


SPECS = {"lenet300": lenet300_spec, "lenet5": lenet5_spec}


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in), the ReLU gain."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Parameters and unit masks for a :class:`ModelSpec`.

    ``params`` maps ``"<layer>.w"``/``"<layer>.b"`` to :class:`Tensor`.
    ``masks`` is a :class:`MaskRegistry` with one 0/1 vector per prunable
    layer; all ones means nothing pruned.  ``cascade`` additionally zeroes consumer
    weights fed by pruned units.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float32, cascade: bool = False):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.cascade = cascade
        rng = np.random.default_rng([spec.seed, 0x1A17])
        self.params: dict[str, nx.Tensor] = {}
        for l in spec.weighted_layers:
            bound_fan = l.fan_in
            self.params[f"{l.name}.w"] = nx.Tensor(
                kaiming_uniform(rng, l.weight_shape, bound_fan, self.dtype), requires_grad=True,
                name=f"{l.name}.w")
            b_bound = 1.0 / math.sqrt(bound_fan)
            self.params[f"{l.name}.b"] = nx.Tensor(
                rng.uniform(-b_bound, b_bound, size=l.units).astype(self.dtype), requires_grad=True,
                name=f"{l.name}.b")
        self.masks = MaskRegistry(
            {l.name: np.ones(l.units, dtype=self.dtype) for l in spec.prunable_layers},
            rate_class={l.name: l.rate_class for l in spec.prunable_layers},
            unit_size={l.name: l.fan_in + 1 for l in spec.prunable_layers},
        )

    # -- parameter access ------------------------------------------------------

    @property
    def param_names(self) -> list:
        return list(self.params)

    def param_list(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in self.params.items():
            if k not in state or state[k].shape != v.shape:
                raise DimensionError(f"state for {k} missing or mis-shaped")
            v.data[...] = state[k]

    def copy(self) -> "Model":
        new = Model.__new__(Model)
        new.spec, new.dtype, new.cascade = self.spec, self.dtype, self.cascade
        new.params = {k: nx.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        new.masks = self.masks.copy()
        return new

    # -- masks -----------------------------------------------------------------

    def _producer_of_input(self, layer_name: str) -> Optional[tuple]:
        """(prunable producer, spatial size per unit) feeding ``layer_name``'s input."""
        prev = None
        for l in self.spec.layers:
            if l.name == layer_name:
                break
            if l.has_weights:
                prev = l
        if prev is None or not prev.prunable:
            return None
        me = self.spec.layer(layer_name)
        per_unit = me.weight_shape[1] // prev.units if me.kind == "dense" else 1
        return prev, per_unit

    def weight_mask(self, layer_name: str) -> Optional[np.ndarray]:
        """Elementwise 0/1 mask broadcastable to the layer's weight, or None if unmasked."""
        l = self.spec.layer(layer_name)
        rows = self.masks.get(layer_name)
        shape_tail = (1,) * (len(l.weight_shape) - 1)
        m = rows.reshape(-1, *shape_tail) if rows is not None else None
        if self.cascade:
            src = self._producer_of_input(layer_name)
            if src is not None:
                prev, per_unit = src
                cols = np.repeat(self.masks[prev.name], per_unit)
                cols = cols.reshape(1, -1, *((1,) * (len(l.weight_shape) - 2)))
                m = cols if m is None else m * cols
        return m

    def expanded_mask(self, layer_name: str) -> np.ndarray:
        """Full-shape weight mask (ones where nothing is masked)."""
        l = self.spec.layer(layer_name)
        m = self.weight_mask(layer_name)
        full = np.ones(l.weight_shape, dtype=self.dtype)
        return full if m is None else full * m

    def apply_masks(self) -> None:
        """Force every masked weight and bias to exactly zero."""
        for l in self.spec.weighted_layers:
            m = self.weight_mask(l.name)
            if m is not None:
                self.params[f"{l.name}.w"].data *= m
            if l.name in self.masks:
                self.params[f"{l.name}.b"].data *= self.masks[l.name]

    def zero_masked_grads(self) -> None:
        for l in self.spec.weighted_layers:
            m = self.weight_mask(l.name)
            w, b = self.params[f"{l.name}.w"], self.params[f"{l.name}.b"]
            if m is not None and w.grad is not None:
                w.grad *= m
            if l.name in self.masks and b.grad is not None:
                b.grad *= self.masks[l.name]

    def unit_counts(self) -> dict:
        return {k: int(v.sum()) for k, v in self.masks.items()}

    # -- forward -----------------------------------------------------------------

    def forward(self, x, capture: bool = False, use_masks: bool = True):
        """Logits for batch ``x``; with ``capture`` also the post-ReLU activations.

        Returns ``logits`` or ``(logits, {layer_name: activation})``.
        """
        x = x if isinstance(x, nx.Tensor) else nx.Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"{self.spec.name} expects input {self.spec.input_shape}, got {x.shape[1:]}")
        acts = {}
        last = None
        h = x
        for l in self.spec.layers:
            if l.kind == "flatten":
                h = nx.flatten(h)
            elif l.kind == "relu":
                h = nx.relu(h)
                if capture and last is not None and last.prunable:
                    acts[last.name] = h.data
            elif l.kind == "maxpool":
                h = nx.maxpool2d(h, l.dims[0], l.dims[1])
            elif l.has_weights:
                w, b = self.params[f"{l.name}.w"], self.params[f"{l.name}.b"]
                if use_masks:
                    m = self.weight_mask(l.name)
                    if m is not None:
                        w = nx.mul(w, m)
                    if l.name in self.masks:
                        b = nx.mul(b, self.masks[l.name])
                if l.kind == "dense":
                    if h.data.ndim != 2 or h.shape[1] != l.dims[0]:
                        raise DimensionError(f"{l.name}: expected {l.dims[0]} features, got {h.shape}")
                    h = nx.linear(h, w, b)
                else:
                    h = nx.conv2d(h, w, b, stride=l.stride, pad=l.pad)
                last = l
            else:
                raise UsageError(f"unknown layer kind {l.kind!r}")
        return (h, acts) if capture else h

    def predict(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        out = []
        for s in range(0, len(images), batch_size):
            out.append(self.forward(images[s:s + batch_size]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
        """Top-1 accuracy in percent."""
        return float((self.predict(images, batch_size) == labels).mean() * 100.0)


def build_model(name: str, seed: int, dtype=np.float32, cascade: bool = False) -> Model:
    if name not in SPECS:
        raise UsageError(f"unknown model {name!r}; choose from {sorted(SPECS)}")
    return Model(SPECS[name](seed), dtype=dtype, cascade=cascade)


def build_lenet300(seed: int, **kw) -> Model:
    return build_model("lenet300", seed, **kw)


def build_lenet5(seed: int, **kw) -> Model:
    return build_model("lenet5", seed, **kw)
