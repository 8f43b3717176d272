"""``iterprune`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, config_for_model, default_rewind_epoch, load_config
from .datasets import resolve_data_dir, verify_dir
from .errors import ConfigError, FormatError, NumericError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("iterprune")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iterprune", description="Iterative structured pruning with rewinding.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", nargs="?", help="INI-style experiment config")
            sp.add_argument("--model", help="use built-in defaults for this model instead of a config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config field (repeatable)")
        sp.add_argument("--data-dir", help="dataset root (default $ITERPRUNE_DATA_DIR or ./data)")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("verify-data", help="check dataset files")
    common(sp, config=False)
    sp.add_argument("--dataset", choices=["mnist", "cifar10", "all"], default="all")

    common(sub.add_parser("train", help="round 0 only: train and checkpoint"))
    common(sub.add_parser("iterate", help="full prune/rewind/retrain experiment"))
    sp = sub.add_parser("sweep-rewind", help="one pruning round per rewind epoch")
    common(sp)
    sp.add_argument("--epochs", help="comma-separated rewind epochs (default: sweep_epochs or 0..T)")

    sp = sub.add_parser("report", help="compare stored runs")
    sp.add_argument("runs", nargs="+", help="run directories written by iterate")
    sp.add_argument("--baseline", help="run directory to normalise flops against (default: first ILP run or first)")
    sp.add_argument("--out", help="write report.txt, report.csv and a combined SVG here")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.data_dir:
        overrides.append(f"data_dir={args.data_dir}")
    if args.config:
        return load_config(args.config, overrides)
    cfg = config_for_model(args.model or "lenet300")
    cfg = apply_overrides(cfg, overrides)
    keys = {o.split("=", 1)[0].strip().split(".")[-1] for o in overrides}
    if "epochs" in keys and "rewind_epoch" not in keys:
        cfg.rewind_epoch = default_rewind_epoch(cfg.epochs)
    return cfg.validate()


def check_data(cfg: ExperimentConfig) -> list:
    root = resolve_data_dir(cfg.data_dir or None)
    if not root.is_dir():
        return [f"{root}: data directory not found"]
    return verify_dir(cfg.dataset, root)


def cmd_verify(args) -> int:
    root = resolve_data_dir(args.data_dir)
    names = ["mnist", "cifar10"] if args.dataset == "all" else [args.dataset]
    failed = False
    for name in names:
        problems = verify_dir(name, root)
        if problems:
            failed = True
            print(f"{name}: FAIL")
            for msg in problems:
                print(f"  {msg}")
        else:
            counts = "60000/10000" if name == "mnist" else "50000/10000"
            print(f"{name}: ok ({counts} train/test)")
    return EXIT_DATA if failed else EXIT_OK


def _prepare(args, default_out):
    cfg = resolve_config(args)
    problems = check_data(cfg)
    if problems:
        for msg in problems:
            print(f"data error: {msg}", file=sys.stderr)
        return cfg, None, EXIT_DATA
    return cfg, Path(args.out or default_out.format(model=cfg.model, policy=cfg.policy)), None


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .harness import train_to_completion, write_manifest, write_records

    cfg, out, code = _prepare(args, "runs/train")
    if code is not None:
        return code
    exp = train_to_completion(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg)
    save_checkpoint(exp.checkpoints[cfg.rewind_epoch], out / f"ckpt_epoch{cfg.rewind_epoch}.iprc")
    save_checkpoint(exp.snapshot(cfg.epochs), out / "round_0.iprc")
    write_records(out, exp.records, "trained")
    print(f"round 0: top-1 {exp.records[0].top1_acc:.2f}%  -> {out}")
    return EXIT_OK


def cmd_iterate(args) -> int:
    from .harness import run_experiment
    from .report import comparison_rows, format_table, summarize

    cfg, out, code = _prepare(args, "runs/{model}_{policy}")
    if code is not None:
        return code
    res = run_experiment(cfg, out)
    last = res.records[-1]
    print(f"{len(res.records) - 1} rounds ({res.status}); last: {last.remaining_pct:.2f}% params, "
          f"top-1 {last.top1_acc:.2f}%")
    s = summarize(cfg.policy, cfg.model, res.records)
    print(format_table(comparison_rows([s], s)))
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import sweep_rewind, write_manifest
    from .report import rows_to_csv

    cfg, out, code = _prepare(args, "runs/sweep")
    if code is not None:
        return code
    spec = args.epochs or cfg.sweep_epochs
    try:
        epochs = [int(e) for e in spec.split(",")] if spec else list(range(cfg.epochs))
    except ValueError as exc:
        raise ConfigError(f"bad epoch list {spec!r}") from exc
    rows = sweep_rewind(cfg, epochs)
    table = [["rewind_epoch", "retrain_epochs", "remaining_pct", "top1_acc", "stability_l2"]]
    for r in rows:
        table.append([r.rewind_epoch, r.retrain_epochs, f"{r.remaining_pct:.4f}", f"{r.top1_acc:.4f}",
                      f"{r.stability_l2:.6f}"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, {"sweep_epochs": epochs})
    (out / "sweep.csv").write_text(rows_to_csv(table))
    for row in table:
        print("  ".join(str(c).rjust(14) for c in row))
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import read_records
    from .report import comparison_rows, format_table, rows_to_csv, summarize, write_svg

    runs, series = [], {}
    for d in args.runs:
        try:
            records, _, cfg = read_records(d)
        except (OSError, KeyError, ValueError) as exc:
            print(f"cannot read run {d}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        label = cfg.get("policy", Path(d).name)
        if label in series:
            label = f"{label}:{Path(d).name}"
        runs.append((Path(d), summarize(label, cfg.get("model", "?"), records)))
        series[label] = records
    if args.baseline:
        matches = [s for p, s in runs if p.resolve() == Path(args.baseline).resolve()]
        if not matches:
            try:
                records, _, cfg = read_records(args.baseline)
            except (OSError, KeyError, ValueError) as exc:
                print(f"cannot read baseline {args.baseline}: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            matches = [summarize(f"baseline:{Path(args.baseline).name}", cfg.get("model", "?"), records)]
        baseline = matches[0]
    else:
        ilp = [s for _, s in runs if s.label.startswith("ilp")]
        baseline = ilp[0] if ilp else runs[0][1]
    summaries = [s for _, s in runs]
    rows = comparison_rows(summaries, baseline)
    print(format_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(format_table(rows) + "\n")
        (out / "report.csv").write_text(rows_to_csv(rows))
        write_svg(out / "comparison.svg", series, title="top-1 accuracy vs remaining parameters")
    return EXIT_OK


COMMANDS = {"verify-data": cmd_verify, "train": cmd_train, "iterate": cmd_iterate,
            "sweep-rewind": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    created = None
    if getattr(args, "out", None) and not Path(args.out).exists():
        created = Path(args.out)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    if created is not None and code == EXIT_DATA and created.exists():
        shutil.rmtree(created)
    return code


if __name__ == "__main__":
    sys.exit(main())
