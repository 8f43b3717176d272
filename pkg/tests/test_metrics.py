"""Accounting checked against explicit per-element enumeration on random toy models."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iterprune.errors import IntegrityError
from iterprune.metrics import compression_at_drop, count_flops, count_params, stability
from iterprune.models import LayerSpec, Model, ModelSpec, build_lenet5, build_lenet300, conv, dense


def random_toy(rng) -> Model:
    """Small MLP or convnet with random widths, padding and masks."""
    if rng.random() < 0.4:
        d0, d1, d2 = (int(v) for v in rng.integers(2, 9, size=3))
        layers = [LayerSpec("flatten"), dense("d1", 2 * 3 * 3, d0), LayerSpec("relu"),
                  dense("d2", d0, d1), LayerSpec("relu"), dense("out", d1, d2, prunable=False)]
        spec = ModelSpec("toy-mlp", (2, 3, 3), layers)
    else:
        c_in, c1, c2 = (int(v) for v in rng.integers(1, 5, size=3))
        size = int(rng.integers(8, 12))
        pad1, pad2 = (int(v) for v in rng.integers(0, 2, size=2))
        h = size + 2 * pad1 - 2
        h = h // 2
        h2 = h + 2 * pad2 - 2
        layers = [conv("c1", c_in, c1, 3, pad=pad1), LayerSpec("relu"), LayerSpec("maxpool", dims=(2, 2)),
                  conv("c2", c1, c2, 3, pad=pad2), LayerSpec("relu"), LayerSpec("flatten"),
                  dense("out", c2 * h2 * h2, 3, prunable=False)]
        spec = ModelSpec("toy-cnn", (c_in, size, size), layers)
    m = Model(spec, dtype=np.float64, cascade=bool(rng.random() < 0.5))
    for name, vec in m.masks.items():
        k = int(rng.integers(0, vec.size))
        if k:
            m.masks.prune(name, rng.choice(vec.size, size=k, replace=False))
    m.apply_masks()
    return m


def alive_units(model, layer):
    return set(model.masks.alive(layer).tolist()) if layer in model.masks else set(range(layer_spec(model, layer).units))


def layer_spec(model, name):
    return model.spec.layer(name)


def producer(model, name):
    prev = None
    for l in model.spec.layers:
        if l.name == name:
            return prev
        if l.has_weights:
            prev = l


def brute_params(model) -> int:
    total = 0
    for l in model.spec.weighted_layers:
        out_alive = alive_units(model, l.name)
        src = producer(model, l.name)
        shape = l.weight_shape
        per_in = shape[1] // src.units if (src is not None and l.kind == "dense") else 1
        for u in range(shape[0]):
            if u not in out_alive:
                continue
            total += 1  # bias
            for idx in np.ndindex(*shape[1:]):
                if model.cascade and src is not None and src.prunable:
                    if idx[0] // per_in not in alive_units(model, src.name):
                        continue
                total += 1
    return total


def brute_flops(model):
    shape = model.spec.input_shape
    linear = elementwise = 0
    last = None
    for l in model.spec.layers:
        if l.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif l.kind == "dense":
            out_alive = alive_units(model, l.name)
            for u in out_alive:
                for i in range(l.dims[0]):
                    if model.cascade and last is not None and last.prunable:
                        per_in = l.dims[0] // last.units
                        if i // per_in not in alive_units(model, last.name):
                            continue
                    linear += 2
            shape, last = (l.units,), l
        elif l.kind == "conv2d":
            c_in, c_out, k = l.dims
            h = shape[1] + 2 * l.pad - k + 1
            w = shape[2] + 2 * l.pad - k + 1
            for f in alive_units(model, l.name):
                for c in range(c_in):
                    if model.cascade and last is not None and last.prunable and c not in alive_units(model, last.name):
                        continue
                    linear += 2 * h * w * k * k
            shape, last = (c_out, h, w), l
        elif l.kind == "relu":
            elementwise += len(alive_units(model, last.name)) * int(np.prod(shape[1:]))
        elif l.kind == "maxpool":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elementwise += len(alive_units(model, last.name)) * shape[1] * shape[2]
    return linear, elementwise


def test_count_params_matches_enumeration_on_50_models():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        m = random_toy(rng)
        assert count_params(m).total == brute_params(m)


def test_count_flops_matches_enumeration_on_50_models():
    rng = np.random.default_rng(7)
    for _ in range(50):
        m = random_toy(rng)
        rep = count_flops(m)
        assert (rep.total_linear, rep.total_elementwise) == brute_flops(m)


def test_count_params_equals_nonzero_after_masking():
    rng = np.random.default_rng(3)
    for _ in range(10):
        m = random_toy(rng)
        for p in m.params.values():
            p.data[...] = 1.0
        m.apply_masks()
        nonzero = sum(int(np.count_nonzero(p.data)) for p in m.params.values())
        assert count_params(m).total == nonzero


def test_lenet300_hand_counts():
    m = build_lenet300(0)
    rep = count_flops(m)
    assert rep.linear == {"fc1": 2 * 784 * 300, "fc2": 2 * 300 * 100, "fc3": 2 * 100 * 10}
    assert rep.elementwise == {"relu1": 300, "relu2": 100}
    m.masks.prune("fc1", range(150))
    fp = count_params(m)
    assert fp.per_layer["fc1"] == 150 * 785
    assert fp.total == 266610 - 150 * 785
    assert fp.ratio == pytest.approx(266610 / fp.total)


def test_lenet5_conv_flops():
    rep = count_flops(build_lenet5(0))
    assert rep.linear["conv1"] == 2 * 64 * 3 * 25 * 32 * 32
    assert rep.linear["conv2"] == 2 * 64 * 64 * 25 * 16 * 16
    assert rep.elementwise["pool1"] == 64 * 16 * 16


# -- stability ----------------------------------------------------------------------


def test_stability_oracle():
    a, b = build_lenet300(0), build_lenet300(1)
    a.masks.prune("fc1", [0, 5])
    a.apply_masks()
    got = stability(a, b)
    keep = np.ones((300, 784), bool)
    keep[[0, 5]] = False
    total = 0.0
    for name in ("fc1", "fc2", "fc3"):
        wa = a.params[f"{name}.w"].data.astype(np.float64)
        wb = b.params[f"{name}.w"].data.astype(np.float64)
        k = keep if name == "fc1" else np.ones_like(wa, bool)
        total += float(((wa - wb)[k] ** 2).sum())
    assert got.l2 == pytest.approx(math.sqrt(total), rel=1e-9)
    assert got.n_entries == (266610 - 410) - 2 * 784


def test_stability_identity_and_mismatch():
    a = build_lenet300(0)
    assert stability(a, a.copy()).l2 == 0.0
    with pytest.raises(IntegrityError):
        stability(a, build_lenet5(0))


# -- compression at drop ------------------------------------------------------------


def rec(r, remaining, acc, flops=100, original=1000):
    return SimpleNamespace(round=r, remaining_params=remaining, original_params=original, top1_acc=acc, flops=flops)


def test_compression_at_drop_example():
    recs = [rec(0, 1000, 97.0), rec(1, 500, 97.2), rec(2, 200, 96.5), rec(3, 100, 95.0)]
    assert compression_at_drop(recs, 97.0, 0.0).ratio == 2.0
    assert compression_at_drop(recs, 97.0, 1.0).ratio == 5.0
    assert compression_at_drop(recs, 97.0, 1.0).round == 2
    assert compression_at_drop(recs, 97.0, 5.0).ratio == 10.0


def test_compression_at_drop_no_qualifying_round():
    res = compression_at_drop([rec(0, 1000, 97.0), rec(1, 800, 90.0)], 97.0, 1.0)
    assert res.ratio == 1.0 and not res.qualified


def test_compression_at_drop_ignores_round_zero():
    res = compression_at_drop([rec(0, 1000, 97.0)], 97.0, 0.0)
    assert not res.qualified


def test_compression_at_drop_tie_prefers_fewer_flops():
    recs = [rec(0, 1000, 97.0), rec(1, 500, 97.0, flops=80), rec(2, 500, 97.0, flops=60)]
    assert compression_at_drop(recs, 97.0, 0.0).flops == 60


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 1000), st.floats(50, 100)), min_size=1, max_size=12),
       st.floats(0, 10), st.floats(0, 10))
def test_compression_at_drop_monotone(rows, d1, d2):
    recs = [rec(0, 1000, 97.0)] + [rec(i + 1, n, a) for i, (n, a) in enumerate(rows)]
    lo, hi = sorted((d1, d2))
    assert compression_at_drop(recs, 97.0, lo).ratio <= compression_at_drop(recs, 97.0, hi).ratio
