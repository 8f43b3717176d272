import math

import numpy as np
import pytest

from iterprune import numerics as nx
from iterprune.errors import DimensionError, UsageError
from iterprune.models import LayerSpec, ModelSpec, build_lenet5, build_lenet300, build_model, dense, lenet5_spec


def test_lenet300_param_count():
    # 784*300+300 + 300*100+100 + 100*10+10
    assert build_lenet300(0).spec.total_params == 266610
    assert round(266610 / 1e6, 2) == 0.27


def test_lenet5_param_count_close_to_reported():
    spec = lenet5_spec()
    closed = (3 * 64 * 25 + 64) + (64 * 64 * 25 + 64) + (4096 * 1024 + 1024) + (1024 * 10 + 10)
    assert spec.total_params == closed == 4312906
    assert abs(closed - 4.30e6) / 4.30e6 < 0.005


def test_layer_shapes():
    m = build_lenet5(0)
    assert m.params["conv1.w"].shape == (64, 3, 5, 5)
    assert m.params["fc1.w"].shape == (1024, 4096)
    assert m.spec.layer("fc2").prunable is False
    assert [l.name for l in m.spec.prunable_layers] == ["conv1", "conv2", "fc1"]
    assert m.masks.rate_class == {"conv1": "conv", "conv2": "conv", "fc1": "dense"}


def test_forward_shapes_and_capture():
    m = build_lenet300(0)
    x = np.random.default_rng(0).normal(size=(5, 1, 28, 28)).astype(np.float32)
    logits, acts = m.forward(x, capture=True)
    assert logits.shape == (5, 10)
    assert acts["fc1"].shape == (5, 300) and acts["fc2"].shape == (5, 100)
    assert (acts["fc1"] >= 0).all()


def test_lenet5_capture_shapes():
    m = build_lenet5(0)
    x = np.zeros((2, 3, 32, 32), np.float32)
    _, acts = m.forward(x, capture=True)
    assert acts["conv1"].shape == (2, 64, 32, 32)
    assert acts["conv2"].shape == (2, 64, 16, 16)
    assert acts["fc1"].shape == (2, 1024)


def test_forward_matches_manual():
    m = build_lenet300(3)
    x = np.random.default_rng(1).normal(size=(4, 1, 28, 28))
    p = {k: v.data.astype(np.float64) for k, v in m.params.items()}
    h = x.reshape(4, -1)
    h = np.maximum(h @ p["fc1.w"].T + p["fc1.b"], 0)
    h = np.maximum(h @ p["fc2.w"].T + p["fc2.b"], 0)
    want = h @ p["fc3.w"].T + p["fc3.b"]
    assert np.allclose(m.forward(x).data, want, atol=1e-4)


def test_wrong_input_shape():
    with pytest.raises(DimensionError):
        build_lenet300(0).forward(np.zeros((2, 3, 32, 32), np.float32))


def test_init_deterministic_and_bounded():
    a, b, c = build_lenet300(5), build_lenet300(5), build_lenet300(6)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["fc1.w"].data, c.params["fc1.w"].data)
    w = a.params["fc1.w"].data
    assert np.abs(w).max() <= math.sqrt(6 / 784)
    assert abs(float(w.std()) - math.sqrt(6 / 784) / math.sqrt(3)) < 0.002


def test_masked_unit_outputs_zero():
    m = build_lenet300(0)
    m.masks.prune("fc1", [3, 7])
    m.apply_masks()
    _, acts = m.forward(np.random.default_rng(0).normal(size=(3, 1, 28, 28)), capture=True)
    assert (acts["fc1"][:, [3, 7]] == 0).all()
    assert (m.params["fc1.w"].data[[3, 7]] == 0).all() and (m.params["fc1.b"].data[[3, 7]] == 0).all()


def test_mask_blocks_gradient_path():
    m = build_lenet300(0)
    m.masks.prune("fc2", [0])
    x = np.random.default_rng(0).normal(size=(6, 1, 28, 28))
    with nx.Tape() as tape:
        loss = nx.softmax_xent(m.forward(x), np.arange(6))
    nx.backward(tape, loss, m.param_list())
    assert (m.params["fc2.w"].grad[0] == 0).all()
    assert m.params["fc2.b"].grad[0] == 0


def test_cascade_mask_covers_consumer_columns():
    m = build_lenet5(0, cascade=True)
    m.masks.prune("conv2", [1])
    wm = np.broadcast_to(m.weight_mask("fc1"), (1024, 4096))
    # conv2 unit 1 feeds flattened features 64..127 after two pools
    assert (wm[:, 64:128] == 0).all() and (wm[:, :64] == 1).all()
    plain = build_lenet5(0)
    plain.masks.prune("conv2", [1])
    assert plain.weight_mask("fc1").shape == (1024, 1)


def test_copy_is_independent():
    m = build_lenet300(0)
    c = m.copy()
    c.params["fc1.w"].data[0, 0] = 99
    c.masks.prune("fc1", [0])
    assert m.params["fc1.w"].data[0, 0] != 99 and m.masks.n_alive("fc1") == 300


def test_state_dict_round_trip():
    a, b = build_lenet300(1), build_lenet300(2)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    bad = a.state_dict()
    bad["fc1.w"] = bad["fc1.w"][:5]
    with pytest.raises(DimensionError):
        b.load_state_dict(bad)


def test_spec_validation():
    with pytest.raises(UsageError):
        ModelSpec("bad", (4,), [dense("a", 4, 3), dense("b", 3, 2)])
    with pytest.raises(UsageError):
        build_model("resnet", 0)
    assert LayerSpec("dense", "x", (7, 3)).n_params == 24


def test_accuracy_percent():
    m = build_lenet300(0)
    x = np.random.default_rng(0).normal(size=(20, 1, 28, 28)).astype(np.float32)
    labels = m.predict(x)
    assert m.accuracy(x, labels) == 100.0
    assert m.accuracy(x, (labels + 1) % 10) == 0.0
