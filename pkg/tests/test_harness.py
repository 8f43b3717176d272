import csv

import numpy as np
import pytest

from conftest import toy_mnist
from iterprune import numerics as nx
from iterprune.config import config_for_model
from iterprune.errors import IntegrityError, NumericError, UsageError
from iterprune.harness import (
    CSV_COLUMNS,
    Experiment,
    decide,
    prune_round,
    read_records,
    rewind,
    run_experiment,
    sweep_rewind,
    train_epochs,
    train_to_completion,
)
from iterprune.pruning import AiapState, PruneDecision, apply_decision


def toy_cfg(**kw):
    base = dict(epochs=3, rewind_epoch=2, stop_value=2, lr=0.002)
    base.update(kw)
    return config_for_model("lenet300", **base)


@pytest.fixture(scope="module")
def trained():
    data = (toy_mnist(240, 0), toy_mnist(100, 1, "test"))
    return train_to_completion(toy_cfg(), data, save_epochs=[0, 1]), data


def test_round_zero_record(trained):
    exp, _ = trained
    rec = exp.records[0]
    assert rec.round == 0 and rec.remaining_params == 266610 and rec.remaining_pct == 100.0
    assert rec.top1_acc > 50  # toy classes are separable
    assert set(exp.checkpoints) == {0, 1, 2}
    assert exp.checkpoints[2].epoch == 2


def test_checkpoint_taken_exactly_after_epoch_k(trained):
    exp, data = trained
    fresh = Experiment.create(exp.config, data)
    train_epochs(fresh, 0, 2)
    for k, v in fresh.model.state_dict().items():
        assert v.tobytes() == exp.checkpoints[2].params[k].tobytes()


def test_mask_persistence_100_steps():
    rng = np.random.default_rng(0)
    data = (toy_mnist(6000, 3), toy_mnist(60, 4, "test"))
    for cascade in (False, True):
        exp = Experiment.create(toy_cfg(cascade=cascade, weight_decay=1e-2), data)
        dead1 = rng.choice(300, 90, replace=False)
        dead2 = rng.choice(100, 30, replace=False)
        apply_decision(exp.model.masks, PruneDecision({"fc1": tuple(dead1), "fc2": tuple(dead2)}), exp.model)
        train_epochs(exp, 0, 1)  # 6000 / 60 = 100 steps
        assert exp.optimizer.step == 100
        for name in ("fc1", "fc2", "fc3"):
            w = exp.model.params[f"{name}.w"].data
            keep = np.broadcast_to(exp.model.expanded_mask(name), w.shape)
            assert np.abs(w[keep == 0]).max(initial=0.0) == 0.0
        assert np.abs(exp.model.params["fc1.b"].data[dead1]).max() == 0.0


def test_rewind_weights_exact(trained):
    exp, _ = trained
    e = exp.fork()
    apply_decision(e.model.masks, PruneDecision({"fc1": (0, 1, 2), "fc2": (5,)}), e.model)
    ck = exp.checkpoints[2]
    rewind(e, ck, "weights")
    for name, p in e.model.params.items():
        layer = name.split(".")[0]
        keep = np.broadcast_to(e.model.expanded_mask(layer) if name.endswith(".w") else
                               e.model.masks.get(layer, np.ones(p.shape)), p.shape).astype(bool)
        assert p.data[keep].tobytes() == ck.params[name][keep].tobytes()
        assert (p.data[~keep] == 0).all()
    assert e.schedule.position == 2
    assert e.optimizer.step == ck.optimizer.step
    assert all(a.tobytes() == b.tobytes() for a, b in zip(e.optimizer.buffers["m"], ck.optimizer.buffers["m"]))


def test_rewind_unpruned_is_identity(trained):
    exp, _ = trained
    e = exp.fork()
    rewind(e, exp.checkpoints[1], "weights")
    assert all(e.model.params[k].data.tobytes() == v.tobytes() for k, v in exp.checkpoints[1].params.items())


def test_rewind_lr_only(trained):
    exp, _ = trained
    e = exp.fork()
    before = e.model.state_dict()
    rewind(e, exp.checkpoints[2], "lr")
    assert all(e.model.params[k].data.tobytes() == v.tobytes() for k, v in before.items())
    assert e.schedule.position == 2 and e.optimizer.step == 0
    assert all(not b.any() for b in e.optimizer.buffers["v"])


def test_rewind_shape_mismatch(trained):
    exp, _ = trained
    e = exp.fork()
    ck = exp.checkpoints[2]
    bad = type(ck)(ck.epoch, dict(ck.params), ck.optimizer)
    bad.params["fc2.w"] = bad.params["fc2.w"][:10]
    with pytest.raises(IntegrityError):
        rewind(e, bad, "weights")


def test_max_rounds_zero(trained):
    exp, _ = trained
    res = run_experiment(toy_cfg(stop_value=0), base=exp)
    assert [r.round for r in res.records] == [0] and res.status == "max_rounds"


def test_target_compression_stop(trained):
    exp, _ = trained
    res = run_experiment(toy_cfg(policy="ilp", stop_rule="target_compression", stop_value=2), base=exp)
    last = res.records[-1]
    assert res.status == "target_compression"
    assert last.remaining_params * 2 <= last.original_params
    assert all(r.remaining_params * 2 > r.original_params for r in res.records[:-1])


def test_records_contiguous_and_monotone(trained):
    exp, _ = trained
    res = run_experiment(toy_cfg(policy="iap", stop_value=4), base=exp)
    assert [r.round for r in res.records] == list(range(5))
    counts = [r.remaining_params for r in res.records]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    assert res.records[1].units == {"fc1": 240, "fc2": 80}


def test_saturation_status(trained):
    exp, _ = trained
    res = run_experiment(toy_cfg(policy="ilp", rate_dense=0.9, stop_value=50), base=exp)
    assert res.status == "saturated"
    assert res.records[-1].units == {"fc1": 1, "fc2": 1}


def test_aiap_empty_round_matches_retraining(trained):
    exp, _ = trained
    e = exp.fork(toy_cfg(policy="aiap"))
    e.aiap = AiapState(lam=0.01)
    e.aiap.record(0, e.model.masks.remaining_prunable())
    e.records = e.records[:1]
    prune_round(e, 1)
    prune_round(e, 2)
    rec = e.records[-1]
    assert rec.status == "unchanged" and rec.pruned_units == 0
    # the skipped retraining, done for real, reproduces round 1's weights bit for bit
    again = e.fork()
    rewind(again, exp.checkpoints[2], "weights")
    train_epochs(again, 2, 3, round_idx=2)
    for k, v in e.model.params.items():
        assert again.model.params[k].data.tobytes() == v.data.tobytes()
    assert rec.top1_acc == e.records[1].top1_acc


def test_nan_loss_aborts(trained):
    _, data = trained
    cfg = toy_cfg(optimizer="nsgd", lr=1e30, momentum=0.9)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericError):
        train_to_completion(cfg, data)


def test_artifacts_and_determinism(tmp_path, trained):
    _, data = trained
    outs = []
    for name in ("a", "b"):
        cfg = toy_cfg(policy="iap", stop_value=2, seed=3)
        run_experiment(cfg, tmp_path / name, data=data)
        outs.append(tmp_path / name)
    for d in outs:
        names = {p.name for p in d.iterdir()}
        assert {"records.csv", "records.json", "manifest.json", "ckpt_epoch2.iprc", "round_0.iprc",
                "round_2.iprc", "accuracy_vs_params.svg"} <= names
    rows = [list(csv.reader(open(d / "records.csv"))) for d in outs]
    assert rows[0][0] == CSV_COLUMNS
    wall = CSV_COLUMNS.index("wall_s")
    strip = [[r[:wall] + r[wall + 1:] for r in rs] for rs in rows]
    assert strip[0] == strip[1]
    records, status, cfg = read_records(outs[0])
    assert status == "max_rounds" and cfg["policy"] == "iap" and len(records) == 3


def test_sweep_rewind(trained):
    exp, _ = trained
    cfg = toy_cfg(policy="ilp")
    decision, _ = decide(exp.fork(cfg), 1)
    masks = apply_decision(exp.model.masks, decision)
    rows = sweep_rewind(cfg, [0, 2, 3], masks=masks, base=exp)
    assert [r.rewind_epoch for r in rows] == [0, 2, 3]
    assert [r.retrain_epochs for r in rows] == [3, 1, 0]
    # k = T: no retraining, just the pruned trained model
    pruned = exp.model.copy()
    pruned.masks = masks.copy()
    pruned.apply_masks()
    assert rows[-1].top1_acc == pruned.accuracy(exp.test.images, exp.test.labels)
    with pytest.raises(UsageError):
        sweep_rewind(cfg, [4], base=exp)


def test_lr_schedule_drives_training(trained):
    exp, _ = trained
    assert nx.lr_at(exp.schedule, 0) == pytest.approx(0.002)
