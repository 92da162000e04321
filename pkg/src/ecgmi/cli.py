"""Command-line entry point: ``ecgmi index | train | eval | ablate``.

Settings resolve as defaults < ``--config`` JSON file < flags, and every run
that writes outputs also writes the resolved settings next to them.

Exit codes: 0 ok, 2 usage, config or data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .ablation import ExperimentPlan, report, run_plan, set_name
from .checkpoint import load_checkpoint
from .dataset import Split, SplitSpec, SignalStore
from .errors import DivergedTraining, EcgMiError, InfeasibleSplit
from .ingest import PTB_LEADS, build_index
from .trainer import TrainConfig, evaluate, resolve_split, train_trial

log = logging.getLogger("ecgmi")

DATA_ROOT_ENV = "ECGMI_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
_CLI_KEYS = {"data_root", "out", "threads", "verbosity"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


def _leads(text: str) -> list[str]:
    leads = [t.strip().lower() for t in text.split(",") if t.strip()]
    if not leads:
        raise argparse.ArgumentTypeError("expected a comma-separated lead list")
    return leads


def _common(threads_help: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--data-root", help=f"PTB database root (fallback: ${DATA_ROOT_ENV})")
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--threads", type=int, help=threads_help)
    p.add_argument("-v", "--verbose", action="count", default=None, help="more logging (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgmi", description="MI detection on PTB ECG records.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[_common("unused")], help="catalog the database")
    p.add_argument("--out", help="write the summary JSON here as well as to stdout")

    p = sub.add_parser("train", parents=[_common("threads for record loading (numerics are single-threaded)")],
                       help="run one training trial")
    p.add_argument("--leads", type=_leads, help=f"1 to 3 of {','.join(PTB_LEADS)}")
    p.add_argument("--split", choices=("record", "patient"), help="split regime (default record)")
    p.add_argument("--seed", type=int, help="weight-init and sampler seed (default 0)")
    p.add_argument("--split-seed", type=int, help="split shuffle seed (default: --seed)")
    p.add_argument("--split-manifest", help="reuse a saved split instead of drawing one")
    p.add_argument("--epochs", type=int, help="maximum epochs (default 50)")
    p.add_argument("--windows-per-epoch", type=int, help="training windows per epoch (default 2000)")
    p.add_argument("--batch-size", type=int, help="default 10")
    p.add_argument("--lr", type=float, help="Adam step size (default 1e-4)")
    p.add_argument("--label-smoothing", type=float, help="default 0.1")
    p.add_argument("--patience", type=int, help="epochs without val improvement before stopping (default 10)")
    p.add_argument("--out", help="output directory (default runs/train)")

    p = sub.add_parser("eval", parents=[_common("unused")], help="score a checkpoint on a saved split")
    p.add_argument("checkpoint")
    p.add_argument("--split-manifest", required=True)
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--leads", type=_leads, help="expected leads; must match the checkpoint")
    p.add_argument("--json", action="store_true", help="print metrics as JSON")
    p.add_argument("--out", help="also write metrics and resolved settings to this directory")

    p = sub.add_parser("ablate", parents=[_common("worker processes (default: CPU count)")],
                       help="run an experiment plan")
    p.add_argument("plan")
    p.add_argument("--out", help="output directory (default runs/<plan name>)")
    p.add_argument("--resume", action="store_true", help="keep finished trials in --out and run the rest")
    p.add_argument("--population-std", action="store_true", help="report population instead of sample std")
    return parser


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - _CLI_KEYS - _TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    return cfg


def _settings(args, file_cfg: dict, default_out: str) -> dict:
    def pick(flag, key, default):
        if flag is not None:
            return flag
        return file_cfg.get(key, default)

    data_root = pick(args.data_root, "data_root", os.environ.get(DATA_ROOT_ENV))
    return {"command": args.command,
            "data_root": data_root,
            "out": pick(getattr(args, "out", None), "out", default_out),
            "threads": pick(args.threads, "threads", os.cpu_count() or 1),
            "verbosity": pick(args.verbose, "verbosity", 0)}


def _index(settings: dict):
    root = settings["data_root"]
    if not root:
        raise UsageError(f"no data root: pass --data-root or set ${DATA_ROOT_ENV}")
    if not Path(root).is_dir():
        raise UsageError(f"data root {root} is not a directory")
    return build_index(root)


def _freeze(out: Path, settings: dict, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {**settings, **extra}
    if snap.get("data_root"):
        snap["data_root"] = str(Path(snap["data_root"]).resolve())
    (out / "config.resolved.json").write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n")


def _train_config(args, file_cfg: dict) -> TrainConfig:
    d = {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}
    flags = {"leads": args.leads, "seed": args.seed, "epochs": args.epochs,
             "windows_per_epoch": args.windows_per_epoch, "batch_size": args.batch_size, "lr": args.lr,
             "label_smoothing": args.label_smoothing, "patience": args.patience,
             "split_manifest": args.split_manifest}
    d.update({k: v for k, v in flags.items() if v is not None})
    if "leads" not in d:
        raise UsageError("--leads is required")
    split = dict(d.get("split") or {})
    if args.split is not None:
        split["mode"] = args.split
    if args.split_seed is not None:
        split["seed"] = args.split_seed
    split.setdefault("seed", d.get("seed", 0))
    d["split"] = split
    for lead in d["leads"]:
        if lead not in PTB_LEADS:
            raise UsageError(f"unknown lead {lead!r}; choose from {','.join(PTB_LEADS)}")
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


# ----------------------------------------------------------------- commands


def cmd_index(args, file_cfg: dict) -> int:
    settings = _settings(args, file_cfg, default_out=None)
    index = _index(settings)
    summary = index.summary()
    text = json.dumps(summary, indent=1, sort_keys=True)
    print(text)
    for rid, err in index.failures:
        log.warning("could not parse %s: %s", rid, err)
    if settings["out"]:
        out = Path(settings["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return EXIT_OK


def cmd_train(args, file_cfg: dict) -> int:
    settings = _settings(args, file_cfg, default_out="runs/train")
    config = _train_config(args, file_cfg)
    index = _index(settings)
    out = Path(settings["out"])
    _freeze(out, settings, train=config.to_dict())
    split = resolve_split(index, config)
    split.save(out / "split.json")
    store = SignalStore(index, config.leads)
    store.preload(split.train + split.val + split.test, max(1, int(settings["threads"])))
    result = train_trial(index, config, out / "checkpoint.ckpt", split=split, store=store)
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"leads {set_name(config.leads)}  split {split.spec.mode}/{split.split_id()}  "
          f"best epoch {result.best_epoch} of {result.epochs_run}")
    print("val  " + result.val.format())
    print("test " + result.test.format())
    return EXIT_OK


def cmd_eval(args, file_cfg: dict) -> int:
    settings = _settings(args, file_cfg, default_out=None)
    ckpt = load_checkpoint(args.checkpoint, expect_leads=args.leads)
    leads = ckpt.leads
    if args.leads is not None:
        if leads and tuple(args.leads) != leads:
            raise UsageError(f"checkpoint was trained on {set_name(leads)}, not {set_name(args.leads)}")
        leads = tuple(args.leads)
    if not leads:
        raise UsageError("checkpoint does not name its leads; pass --leads")
    try:
        split = Split.load(args.split_manifest)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read split manifest {args.split_manifest}: {exc}") from None
    index = _index(settings)
    ids = split.partition(args.partition)
    missing = [r for r in ids if r not in index or not index[r].usable]
    if missing:
        raise InfeasibleSplit(f"manifest names records not usable under this data root, e.g. {missing[0]}")
    metrics = evaluate(ckpt.params, ids, SignalStore(index, leads))
    if args.json:
        print(json.dumps({"partition": args.partition, **metrics.to_dict()}, sort_keys=True))
    else:
        print(f"{args.partition}: " + metrics.format())
    if settings["out"]:
        out = Path(settings["out"])
        _freeze(out, settings, checkpoint=str(Path(args.checkpoint).resolve()),
                split_manifest=str(Path(args.split_manifest).resolve()), partition=args.partition)
        (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate(args, file_cfg: dict) -> int:
    try:
        plan = ExperimentPlan.load(args.plan)
    except OSError as exc:
        raise UsageError(f"cannot read plan {args.plan}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid plan {args.plan}: {exc}") from None
    settings = _settings(args, file_cfg, default_out=f"runs/{Path(args.plan).stem}")
    index = _index(settings)
    for s in plan.lead_sets:
        for lead in s:
            if lead not in PTB_LEADS:
                raise UsageError(f"plan names unknown lead {lead!r}")
    out = Path(settings["out"])
    _freeze(out, settings, plan=plan.to_dict(), population_std=args.population_std)
    try:
        results = run_plan(index, plan, out, workers=max(1, int(settings["threads"])), resume=args.resume)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    paths = report(results, out, population=args.population_std)
    print(paths["tables.txt"].read_text(), end="")

    code = EXIT_OK
    by_set = results.results
    for s in plan.lead_sets:
        if s in by_set:
            continue
        errors = [r.error for r in results.failures if r.lead_set == s]
        log.error("lead set %s: every trial failed", set_name(s))
        numeric = all(e.startswith("DivergedTraining") for e in errors)
        code = max(code, EXIT_NUMERIC if numeric else EXIT_USAGE)
    if results.failures and code == EXIT_OK:
        log.warning("%d trials failed; see %s", len(results.failures), paths["tables.txt"])
    return code


COMMANDS = {"index": cmd_index, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        file_cfg = _load_config(args.config)
        verbosity = args.verbose if args.verbose is not None else file_cfg.get("verbosity", 0)
        level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
        return COMMANDS[args.command](args, file_cfg)
    except DivergedTraining as exc:
        print(f"ecgmi: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, EcgMiError, ValueError, OSError) as exc:
        print(f"ecgmi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
