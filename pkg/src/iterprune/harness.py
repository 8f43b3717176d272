"""Iterative structured pruning with rewinding.

Round 0 trains from scratch for T epochs, checkpointing after epoch k.  Each
later round prunes the trained model, rewinds (weights and learning rate,
or learning rate only) to epoch k and retrains for T - k epochs.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .datasets import BatchPlan, Dataset, augment, load_dataset, resolve_data_dir, stats_batch
from .errors import IntegrityError, NumericError, UsageError
from .metrics import count_flops, count_params, stability
from .models import Model, build_model
from .pruning import (
    AiapState,
    PruneDecision,
    aiap_select,
    aiap_update_threshold,
    apply_decision,
    collect_stats,
    iap_select,
    ilp_select,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["round", "remaining_params", "remaining_pct", "flops", "top1_acc", "threshold_T", "wall_s"]


@dataclass
class PruneRoundRecord:
    round: int
    remaining_params: int
    remaining_pct: float
    flops: int
    top1_acc: float
    threshold_T: float
    wall_s: float
    original_params: int = 0
    units: dict = field(default_factory=dict)
    pruned_units: int = 0
    status: str = "ok"

    @property
    def compression(self) -> float:
        return self.original_params / self.remaining_params

    def csv_row(self) -> list:
        return [self.round, self.remaining_params, f"{self.remaining_pct:.6f}", self.flops,
                f"{self.top1_acc:.4f}", f"{self.threshold_T:.6f}", f"{self.wall_s:.3f}"]


# -- data ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def _cached_dataset(name: str, root: str, split: str) -> Dataset:
    return load_dataset(name, root, split)


def load_data(cfg: ExperimentConfig) -> tuple:
    """(train, test) for the config, honouring ``train_subset``/``test_subset`` (leading examples)."""
    root = str(resolve_data_dir(cfg.data_dir or None).resolve())
    train = _cached_dataset(cfg.dataset, root, "train")
    test = _cached_dataset(cfg.dataset, root, "test")
    if cfg.train_subset:
        train = Dataset(train.name, "train", train.images[:cfg.train_subset], train.labels[:cfg.train_subset],
                        train.mean, train.std)
    if cfg.test_subset:
        test = Dataset(test.name, "test", test.images[:cfg.test_subset], test.labels[:cfg.test_subset],
                       test.mean, test.std)
    return train, test


# -- training state -------------------------------------------------------------------


def make_schedule(cfg: ExperimentConfig) -> nx.LrSchedule:
    if cfg.lr_schedule == "resnet":
        return nx.resnet_imagenet_schedule()
    return nx.constant_schedule(cfg.lr, cfg.epochs)


def make_optimizer(cfg: ExperimentConfig, model: Model) -> nx.OptimizerState:
    return nx.init_state(cfg.optimizer, [p.data for p in model.param_list()],
                         weight_decay=cfg.weight_decay, momentum=cfg.momentum)


@dataclass
class Experiment:
    """Everything a round needs: data, live model/optimizer/schedule and history."""

    config: ExperimentConfig
    train: Dataset
    test: Dataset
    model: Model
    optimizer: nx.OptimizerState
    schedule: nx.LrSchedule
    stats_images: np.ndarray
    checkpoints: dict = field(default_factory=dict)
    original: Optional[Model] = None
    records: list = field(default_factory=list)
    aiap: Optional[AiapState] = None
    status: str = "running"

    @classmethod
    def create(cls, cfg: ExperimentConfig, data: Optional[tuple] = None) -> "Experiment":
        cfg.validate()
        train, test = data if data is not None else load_data(cfg)
        model = build_model(cfg.model, cfg.seed_for("init"), cascade=cfg.cascade)
        if train.sample_shape != tuple(model.spec.input_shape):
            raise UsageError(f"{cfg.model} expects {model.spec.input_shape}, dataset gives {train.sample_shape}")
        sb = stats_batch(train, min(cfg.stats_batch_size, len(train)), cfg.seed_for("stats"),
                         augmented=cfg.stats_augmented)
        return cls(cfg, train, test, model, make_optimizer(cfg, model), make_schedule(cfg), sb)

    def fork(self, cfg: Optional[ExperimentConfig] = None) -> "Experiment":
        """Independent copy sharing data and saved checkpoints (read-only)."""
        cfg = cfg or self.config
        if cfg.baseline_key() != self.config.baseline_key():
            raise UsageError("forked config must share the baseline training setup")
        sb = self.stats_images
        key = lambda c: (c.stats_batch_size, c.stats_augmented, c.seed_for("stats"))
        if key(cfg) != key(self.config):
            sb = stats_batch(self.train, min(cfg.stats_batch_size, len(self.train)), cfg.seed_for("stats"),
                             augmented=cfg.stats_augmented)
        sched = nx.LrSchedule(self.schedule.segments, self.schedule.position)
        return Experiment(cfg, self.train, self.test, self.model.copy(), self.optimizer.copy(), sched, sb,
                          dict(self.checkpoints), self.original, list(self.records), None, self.status)

    def evaluate(self, model: Optional[Model] = None) -> float:
        m = model or self.model
        return m.accuracy(self.test.images, self.test.labels)

    def snapshot(self, epoch: int) -> Checkpoint:
        cfg = self.config
        return Checkpoint(
            epoch=epoch,
            params=self.model.state_dict(),
            optimizer=self.optimizer.copy(),
            rng={"master_seed": cfg.seed, **{p: str(cfg.seed_for(p)) for p in ("init", "order", "augment", "stats")}},
            schedule=self.schedule.to_dict(),
            masks={k: v.copy() for k, v in self.model.masks.items()},
        )


def train_epochs(exp: Experiment, start: int, end: int, round_idx: int = 0,
                 save_epochs: Iterable[int] = ()) -> None:
    """Run epochs [start, end) with masked weights pinned at zero after every step."""
    cfg, model = exp.config, exp.model
    params = model.param_list()
    arrays = [p.data for p in params]
    plan = BatchPlan(cfg.seed_for("order"), cfg.batch_size, len(exp.train))
    pruned = any(not v.all() for v in model.masks.values()) or model.cascade
    save_epochs = set(save_epochs)
    for epoch in range(start, end):
        lr = nx.lr_at(exp.schedule, epoch)
        aug_rng = np.random.default_rng([cfg.seed_for("augment"), round_idx, epoch])
        for idx in plan.batches(epoch):
            x = exp.train.images[idx]
            if cfg.augment_enabled:
                x = augment(x, aug_rng)
            with nx.Tape() as tape:
                loss = nx.softmax_xent(model.forward(x), exp.train.labels[idx])
            grads = nx.backward(tape, loss, params)
            if pruned:
                model.zero_masked_grads()
            if lr > 0:
                nx.optimizer_step(arrays, grads, exp.optimizer, lr)
            if pruned:
                model.apply_masks()
        if not all(np.isfinite(a).all() for a in arrays):
            raise NumericError(f"parameters diverged during epoch {epoch}")
        exp.schedule.position = epoch + 1
        if epoch + 1 in save_epochs:
            exp.checkpoints[epoch + 1] = exp.snapshot(epoch + 1)
        log.debug("round %d epoch %d done (loss %.4f)", round_idx, epoch, float(loss.data))


def make_record(exp: Experiment, r: int, acc: float, threshold: float, wall: float,
                decision: Optional[PruneDecision] = None, status: str = "ok") -> PruneRoundRecord:
    fp = count_params(exp.model)
    return PruneRoundRecord(
        round=r, remaining_params=fp.total, remaining_pct=fp.remaining_pct,
        flops=count_flops(exp.model).total, top1_acc=acc, threshold_T=threshold, wall_s=wall,
        original_params=fp.original, units=exp.model.unit_counts(),
        pruned_units=decision.count() if decision else 0, status=status,
    )


def train_to_completion(cfg: ExperimentConfig, data: Optional[tuple] = None,
                        save_epochs: Iterable[int] = ()) -> Experiment:
    """Round 0: train T epochs from scratch, checkpointing after epoch k (and ``save_epochs``)."""
    t0 = time.perf_counter()
    exp = Experiment.create(cfg, data)
    wanted = {cfg.rewind_epoch, *save_epochs}
    if any(not 0 <= e <= cfg.epochs for e in wanted):
        raise UsageError(f"checkpoint epochs {sorted(wanted)} outside [0, {cfg.epochs}]")
    if 0 in wanted:
        exp.checkpoints[0] = exp.snapshot(0)
    train_epochs(exp, 0, cfg.epochs, 0, wanted)
    exp.original = exp.model.copy()
    acc = exp.evaluate()
    exp.records = [make_record(exp, 0, acc, 0.0, time.perf_counter() - t0)]
    exp.aiap = AiapState(lam=cfg.lam)
    exp.aiap.record(0, exp.model.masks.remaining_prunable())
    log.info("baseline %s: top-1 %.2f%%", cfg.model, acc)
    return exp


def rewind(exp: Experiment, ckpt: Checkpoint, mode: str) -> None:
    """Reset the live state for retraining from ``ckpt.epoch``.

    ``weights``: unmasked weights and the optimizer state come from the
    checkpoint; masked weights stay zero.  ``lr``: weights are kept and the
    optimizer buffers are zeroed.  Both move the schedule to the checkpoint epoch.
    """
    model = exp.model
    if mode == "weights":
        for name, p in model.params.items():
            src = ckpt.params.get(name)
            if src is None or src.shape != p.shape:
                raise IntegrityError(f"checkpoint tensor {name} missing or mis-shaped")
        model.load_state_dict(ckpt.params)
        model.apply_masks()
        if ckpt.optimizer is None:
            raise IntegrityError("checkpoint has no optimizer state")
        exp.optimizer = ckpt.optimizer.copy()
    elif mode == "lr":
        exp.optimizer.reset()
    else:
        raise UsageError(f"unknown rewind mode {mode!r}")
    exp.schedule.rewind(ckpt.epoch)


def decide(exp: Experiment, r: int) -> tuple:
    """Pruning decision for round ``r`` from the current (fully trained) model."""
    cfg = exp.config
    threshold = 0.0
    if cfg.policy == "ilp":
        decision = ilp_select(exp.model, cfg.rates, r)
    else:
        stats = collect_stats(exp.model, exp.stats_images, per_element=cfg.activation_mean == "element")
        if cfg.policy == "iap":
            decision = iap_select(stats, exp.model.masks, cfg.rates, r)
        else:
            threshold = aiap_update_threshold(exp.aiap, r)
            decision = aiap_select(stats, exp.model.masks, threshold, r)
    return decision, threshold


def prune_round(exp: Experiment, r: int) -> PruneRoundRecord:
    """Prune, rewind, retrain and evaluate one round; appends and returns the record.

    An empty decision from ILP/IAP means the floor rule can no longer remove
    anything; the record is marked ``saturated`` and the model left as is.
    For AIAP an empty decision under weight rewinding reproduces the previous
    round exactly (same masks, same checkpoint, same batch order), so the
    retraining is skipped and the previous accuracy carried over.
    """
    cfg = exp.config
    if len(exp.records) != r:
        raise UsageError(f"round {r} requested but {len(exp.records)} rounds are recorded")
    t0 = time.perf_counter()
    decision, threshold = decide(exp, r)
    prev = exp.records[-1]
    if decision.empty and cfg.policy != "aiap":
        rec = make_record(exp, r, prev.top1_acc, threshold, time.perf_counter() - t0, decision, "saturated")
    elif decision.empty and cfg.rewind_mode == "weights" and not cfg.augment_enabled and r > 1:
        rec = make_record(exp, r, prev.top1_acc, threshold, time.perf_counter() - t0, decision, "unchanged")
    else:
        apply_decision(exp.model.masks, decision, exp.model)
        rewind(exp, exp.checkpoints[cfg.rewind_epoch], cfg.rewind_mode)
        train_epochs(exp, cfg.rewind_epoch, cfg.epochs, r)
        acc = exp.evaluate()
        rec = make_record(exp, r, acc, threshold, time.perf_counter() - t0, decision)
    exp.records.append(rec)
    if exp.aiap is not None:
        exp.aiap.record(r, exp.model.masks.remaining_prunable())
    log.info("round %d [%s]: %.2f%% params, top-1 %.2f%% (T=%.3f, -%d units, %s)",
             r, cfg.policy, rec.remaining_pct, rec.top1_acc, threshold, rec.pruned_units, rec.status)
    return rec


def should_stop(cfg: ExperimentConfig, records: list) -> Optional[str]:
    last, base = records[-1], records[0]
    r = last.round
    if last.status == "saturated":
        return "saturated"
    if all(n <= 1 for n in last.units.values()):
        return "saturated"
    if cfg.stop_rule == "max_rounds" and r >= cfg.stop_value:
        return "max_rounds"
    if cfg.stop_rule == "target_compression" and r > 0 and last.compression >= cfg.stop_value:
        return "target_compression"
    if cfg.stop_rule == "target_drop" and r > 0 and base.top1_acc - last.top1_acc > cfg.stop_value:
        return "target_drop"
    if r >= cfg.round_cap:
        return "round_cap"
    return None


@dataclass
class RunResult:
    records: list
    status: str
    experiment: Experiment
    out_dir: Optional[Path] = None


def run_experiment(cfg: ExperimentConfig, out_dir=None, base: Optional[Experiment] = None,
                   data: Optional[tuple] = None) -> RunResult:
    """Round 0 (or a fork of ``base``) followed by pruning rounds until a stop rule fires."""
    cfg.validate()
    exp = base.fork(cfg) if base is not None else train_to_completion(cfg, data)
    exp.records = exp.records[:1]
    exp.aiap = AiapState(lam=cfg.lam)
    exp.aiap.record(0, exp.model.masks.remaining_prunable())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg)
        save_checkpoint(exp.checkpoints[cfg.rewind_epoch], out / f"ckpt_epoch{cfg.rewind_epoch}.iprc")
        if cfg.save_round_checkpoints:
            save_checkpoint(exp.snapshot(cfg.epochs), out / "round_0.iprc")
    status = should_stop(cfg, exp.records)
    r = 0
    while status is None:
        r += 1
        prune_round(exp, r)
        if out is not None and cfg.save_round_checkpoints and exp.records[-1].status == "ok":
            save_checkpoint(exp.snapshot(cfg.epochs), out / f"round_{r}.iprc")
        status = should_stop(cfg, exp.records)
    exp.status = status
    if out is not None:
        write_records(out, exp.records, status)
        from .report import write_svg
        write_svg(out / "accuracy_vs_params.svg", {cfg.policy: exp.records}, title=f"{cfg.model} {cfg.policy}")
    return RunResult(exp.records, status, exp, out)


# -- rewind sweep ---------------------------------------------------------------------


@dataclass
class SweepRow:
    rewind_epoch: int
    top1_acc: float
    stability_l2: float
    remaining_pct: float
    retrain_epochs: int


def sweep_rewind(cfg: ExperimentConfig, epochs: Iterable[int], masks=None,
                 base: Optional[Experiment] = None, data: Optional[tuple] = None,
                 mode: str = "weights") -> list:
    """One pruning round per rewind epoch at a fixed mask.

    ``masks`` defaults to a single application of the configured policy to the
    trained model.  Epoch T is allowed and means no retraining at all.
    """
    epochs = list(epochs)
    for e in epochs:
        if not 0 <= e <= cfg.epochs:
            raise UsageError(f"rewind epoch {e} outside [0, {cfg.epochs}]")
    if base is None:
        base = train_to_completion(cfg, data, save_epochs=[e for e in epochs if e < cfg.epochs])
    missing = [e for e in epochs if e < cfg.epochs and e not in base.checkpoints]
    if missing:
        raise UsageError(f"no checkpoints for epochs {missing}")
    if masks is None:
        probe = base.fork(cfg)
        probe.aiap = AiapState(lam=cfg.lam)
        probe.aiap.record(0, probe.model.masks.remaining_prunable())
        decision, _ = decide(probe, 1)
        masks = apply_decision(probe.model.masks, decision)
    rows = []
    for e in epochs:
        exp = base.fork(cfg)
        exp.model.masks = masks.copy()
        exp.model.apply_masks()
        if e < cfg.epochs:
            rewind(exp, base.checkpoints[e], mode)
            train_epochs(exp, e, cfg.epochs, round_idx=1)
        acc = exp.evaluate()
        st = stability(exp.model, base.original)
        rows.append(SweepRow(e, acc, st.l2, count_params(exp.model).remaining_pct, cfg.epochs - e))
        log.info("sweep k=%d: top-1 %.2f%%, L2 %.4f", e, acc, st.l2)
    return rows


# -- artifacts ----------------------------------------------------------------------


def write_manifest(out: Path, cfg: ExperimentConfig, extra: Optional[dict] = None) -> Path:
    data = {"config": cfg.to_dict()}
    if extra:
        data.update(extra)
    path = Path(out) / "manifest.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def write_records(out: Path, records: list, status: str) -> None:
    out = Path(out)
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.csv_row())
    (out / "records.json").write_text(json.dumps(
        {"status": status, "records": [asdict(r) for r in records]}, indent=2))


def read_records(run_dir) -> tuple:
    """(records, status, config dict) from a run directory."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    blob = json.loads((run_dir / "records.json").read_text())
    records = [PruneRoundRecord(**r) for r in blob["records"]]
    return records, blob["status"], manifest["config"]


def load_round_model(run_dir, r: int, cfg: ExperimentConfig) -> Model:
    """Rebuild the model saved after round ``r`` (weights and masks)."""
    ckpt = load_checkpoint(Path(run_dir) / f"round_{r}.iprc")
    model = build_model(cfg.model, cfg.seed_for("init"), cascade=cfg.cascade)
    model.load_state_dict(ckpt.params)
    for k, v in ckpt.masks.items():
        model.masks[k] = v.astype(model.dtype)
    return model
