"""Experiment configuration: defaults, INI-style files and ``key=value`` overrides.

A config file is ``configparser`` syntax.  Section names are only for
readability; every key must be a field of :class:`ExperimentConfig`::

    [experiment]
    model = lenet300
    seed = 0

    [pruning]
    policy = iap
    rate_dense = 0.2

    [stop]
    stop_rule = max_rounds
    stop_value = 20
"""

from __future__ import annotations

import configparser
import math
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

# per-purpose offsets fed to SeedSequence together with the master seed
SEED_PURPOSES = {"init": 0, "order": 1, "augment": 2, "stats": 3}

MODEL_DEFAULTS = {
    "lenet300": {"dataset": "mnist", "lr": 0.0012, "epochs": 6, "rewind_epoch": 5},
    "lenet5": {"dataset": "cifar10", "lr": 0.0002, "epochs": 24, "rewind_epoch": 22},
}

STOP_RULES = ("max_rounds", "target_drop", "target_compression")


def derive_seed(master: int, purpose: str) -> int:
    """64-bit seed for one purpose (init / order / augment / stats)."""
    ss = np.random.SeedSequence([int(master) & (2**64 - 1), SEED_PURPOSES[purpose]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def default_rewind_epoch(epochs: int) -> int:
    """ceil(0.9 T), clamped strictly inside (0, T)."""
    return min(max(math.ceil(0.9 * epochs - 1e-9), 1), epochs - 1)


@dataclass
class ExperimentConfig:
    model: str = "lenet300"
    dataset: str = "mnist"
    data_dir: str = ""
    optimizer: str = "nadam"
    lr: float = 0.0012
    lr_schedule: str = "constant"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 60
    epochs: int = 6
    rewind_epoch: int = 5
    rewind_mode: str = "weights"
    policy: str = "iap"
    rate_dense: float = 0.2
    rate_conv: float = 0.1
    lam: float = 0.01
    stats_batch_size: int = 60
    stats_seed: int = -1  # -1: derive from the master seed
    stats_augmented: bool = False
    activation_mean: str = "element"
    cascade: bool = False
    augment: str = "auto"
    stop_rule: str = "max_rounds"
    stop_value: float = 20
    round_cap: int = 200
    seed: int = 0
    train_subset: int = 0
    test_subset: int = 0
    save_round_checkpoints: bool = True
    sweep_epochs: str = ""

    # -- derived -----------------------------------------------------------------

    @property
    def augment_enabled(self) -> bool:
        if self.augment == "auto":
            return self.dataset == "cifar10"
        return self.augment in ("true", "yes", "1", "on")

    @property
    def rates(self) -> dict:
        return {"dense": self.rate_dense, "conv": self.rate_conv}

    def seed_for(self, purpose: str) -> int:
        if purpose == "stats" and self.stats_seed >= 0:
            return self.stats_seed
        return derive_seed(self.seed, purpose)

    def baseline_key(self) -> tuple:
        """Fields that determine the unpruned training run."""
        return (self.model, self.dataset, self.optimizer, self.lr, self.lr_schedule, self.weight_decay,
                self.momentum, self.batch_size, self.epochs, self.seed, self.train_subset,
                self.test_subset, self.augment_enabled, self.cascade)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- validation ---------------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.model in MODEL_DEFAULTS, f"unknown model {self.model!r}")
        need(self.dataset in ("mnist", "cifar10"), f"unknown dataset {self.dataset!r}")
        need(self.optimizer in ("nadam", "nsgd"), f"unknown optimizer {self.optimizer!r}")
        need(self.lr_schedule in ("constant", "resnet"), f"unknown lr_schedule {self.lr_schedule!r}")
        need(self.lr > 0, "lr must be positive")
        need(self.batch_size > 0, "batch_size must be positive")
        need(self.epochs >= 2, "epochs must be at least 2")
        need(0 < self.rewind_epoch < self.epochs,
             f"rewind_epoch must satisfy 0 < k < T, got k={self.rewind_epoch}, T={self.epochs}")
        need(self.rewind_mode in ("weights", "lr"), f"rewind_mode must be weights or lr, got {self.rewind_mode!r}")
        need(self.policy in ("ilp", "iap", "aiap"), f"unknown policy {self.policy!r}")
        need(0 < self.rate_dense < 1 and 0 < self.rate_conv < 1, "prune rates must lie in (0, 1)")
        need(self.lam > 0, "lambda must be positive")
        need(self.stats_batch_size > 0, "stats_batch_size must be positive")
        need(self.activation_mean in ("element", "batch"), "activation_mean must be element or batch")
        need(self.augment in ("auto", "true", "false", "yes", "no", "on", "off", "1", "0"),
             f"augment must be auto/true/false, got {self.augment!r}")
        need(self.stop_rule in STOP_RULES, f"stop_rule must be one of {STOP_RULES}")
        need(self.stop_value >= 0, "stop_value must be non-negative")
        if self.stop_rule == "target_compression":
            need(self.stop_value >= 1, "target_compression needs a ratio >= 1")
        need(self.round_cap >= 0, "round_cap must be non-negative")
        need(self.train_subset >= 0 and self.test_subset >= 0, "subsets must be non-negative")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_ALIASES = {"lambda": "lam"}


def _coerce(name: str, raw):
    f = _FIELDS[name]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if f.type in ("int", int):
            return int(text)
        if f.type in ("float", float):
            return float(text)
        if f.type in ("bool", bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {f.type}") from exc
    return text


def config_for_model(model: str, **overrides) -> ExperimentConfig:
    """Defaults for ``model`` (dataset, lr, T, k) with keyword overrides applied."""
    if model not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {model!r}")
    cfg = ExperimentConfig(model=model, **MODEL_DEFAULTS[model])
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Set fields from a mapping or ``key=value`` strings; unknown keys raise ConfigError."""
    items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
    values = dataclasses.asdict(cfg)
    for key, raw in items:
        key = key.strip().split(".")[-1]
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return ExperimentConfig(**values)


def _split(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    k, v = item.split("=", 1)
    return k, v


def load_config(path, overrides=()) -> ExperimentConfig:
    """Parse a config file, applying model defaults first and file values on top."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            values[key] = val
    for key, val in parser.defaults().items():
        values.setdefault(key, val)
    extra = dict(_split(o) for o in overrides)
    model = (extra.get("model") or values.get("model") or "lenet300").strip()
    if model not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {model!r}")
    cfg = ExperimentConfig(model=model, **MODEL_DEFAULTS[model])
    explicit = {**values, **extra}
    cfg = apply_overrides(cfg, values)
    cfg = apply_overrides(cfg, extra)
    if "rewind_epoch" not in explicit and "epochs" in explicit:
        cfg.rewind_epoch = default_rewind_epoch(cfg.epochs)
    return cfg.validate()


def write_config(cfg: ExperimentConfig, path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {k: str(v) for k, v in cfg.to_dict().items()}
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path
