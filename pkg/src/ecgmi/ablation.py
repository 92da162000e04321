"""Experiment grids over lead sets, with a resumable results log and summary statistics."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .dataset import SPLIT_MODES, SignalStore, SplitSpec
from .errors import EmptyResults, KTooLarge
from .ingest import DatasetIndex
from .trainer import TrainConfig, TrialResult, train_trial

log = logging.getLogger(__name__)

LeadSet = tuple[str, ...]
TOP_K = (20, 50)


def set_name(lead_set: Sequence[str]) -> str:
    return ",".join(lead_set)


@dataclass(frozen=True)
class ExperimentPlan:
    lead_sets: tuple[LeadSet, ...]
    trials_per_set: int
    split_mode: str = "record"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    root_seed: int = 0
    manifest_path: str | None = None
    train_overrides: dict = field(default_factory=dict)
    save_checkpoints: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lead_sets", tuple(tuple(s) for s in self.lead_sets))
        if self.trials_per_set < 1:
            raise ValueError("trials_per_set must be at least 1")
        if not self.lead_sets:
            raise ValueError("plan has no lead sets")
        for s in self.lead_sets:
            if not 1 <= len(s) <= 3:
                raise ValueError(f"lead set {list(s)} must hold 1 to 3 leads")
        if len(set(self.lead_sets)) != len(self.lead_sets):
            raise ValueError("duplicate lead sets in plan")
        if self.split_mode not in SPLIT_MODES:
            raise ValueError(f"split mode must be one of {SPLIT_MODES}")
        SplitSpec(self.split_mode, self.ratios, 0)
        bad = {"leads", "seed", "split", "split_manifest"} & set(self.train_overrides)
        if bad:
            raise ValueError(f"train_overrides may not set {sorted(bad)}; the plan controls them")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> ExperimentPlan:
        unknown = set(d) - {"name", "description", "lead_sets", "trials_per_set", "split", "train_overrides",
                            "save_checkpoints"}
        if unknown:
            raise ValueError(f"unknown plan keys {sorted(unknown)}")
        split = d.get("split", {})
        manifest = split.get("manifest_path")
        if manifest and base_dir is not None and not Path(manifest).is_absolute():
            manifest = str(Path(base_dir) / manifest)
        return cls(lead_sets=tuple(tuple(s) for s in d["lead_sets"]),
                   trials_per_set=int(d["trials_per_set"]),
                   split_mode=split.get("mode", "record"),
                   ratios=tuple(split.get("ratios", (0.8, 0.1, 0.1))),
                   root_seed=int(split.get("seed", 0)),
                   manifest_path=manifest,
                   train_overrides=dict(d.get("train_overrides", {})),
                   save_checkpoints=bool(d.get("save_checkpoints", False)))

    @classmethod
    def load(cls, path: str | Path) -> ExperimentPlan:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        split = {"mode": self.split_mode, "ratios": list(self.ratios), "seed": self.root_seed}
        if self.manifest_path:
            split["manifest_path"] = self.manifest_path
        return {"lead_sets": [list(s) for s in self.lead_sets], "trials_per_set": self.trials_per_set,
                "split": split, "train_overrides": self.train_overrides,
                "save_checkpoints": self.save_checkpoints}

    def tasks(self) -> list[tuple[LeadSet, int]]:
        return [(s, t) for s in self.lead_sets for t in range(self.trials_per_set)]


def derive_seed(root: int, lead_set: Sequence[str], trial: int, purpose: str) -> int:
    """64-bit seed from (root, set, trial, purpose); independent of run order and wall clock."""
    blob = f"{root}|{set_name(lead_set)}|{trial}|{purpose}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def trial_config(plan: ExperimentPlan, lead_set: LeadSet, trial: int) -> TrainConfig:
    d = dict(plan.train_overrides)
    d["leads"] = lead_set
    d["seed"] = derive_seed(plan.root_seed, lead_set, trial, "init")
    d["split"] = SplitSpec(plan.split_mode, plan.ratios, derive_seed(plan.root_seed, lead_set, trial, "split"))
    d["split_manifest"] = plan.manifest_path
    return TrainConfig.from_dict(d)


@dataclass
class TrialRecord:
    lead_set: LeadSet
    trial: int
    result: TrialResult | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None

    def to_dict(self) -> dict:
        d = {"lead_set": list(self.lead_set), "trial": self.trial, "status": "ok" if self.ok else "failed"}
        if self.ok:
            d["result"] = self.result.to_dict()
        else:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrialRecord:
        res = TrialResult.from_dict(d["result"]) if d.get("status") == "ok" else None
        return cls(tuple(d["lead_set"]), int(d["trial"]), res, d.get("error"))


@dataclass
class PlanResults:
    records: list[TrialRecord]

    @property
    def results(self) -> dict[LeadSet, list[TrialResult]]:
        out: dict[LeadSet, list[TrialResult]] = {}
        for r in sorted(self.records, key=lambda r: r.trial):
            if r.ok:
                out.setdefault(r.lead_set, []).append(r.result)
        return out

    @property
    def failures(self) -> list[TrialRecord]:
        return [r for r in self.records if not r.ok]

    def lead_sets(self) -> list[LeadSet]:
        return list(dict.fromkeys(r.lead_set for r in self.records))


# ------------------------------------------------------------------- runner

_WORKER: dict = {}


def _worker_init(index: DatasetIndex):
    _WORKER.clear()
    _WORKER["index"] = index


def _run_task(plan: ExperimentPlan, lead_set: LeadSet, trial: int, out_dir: str) -> dict:
    index = _WORKER["index"]
    # one store per worker, swapped when the lead set changes
    store = _WORKER.get("store")
    if store is None or store.leads != lead_set:
        store = _WORKER["store"] = SignalStore(index, lead_set)
    ckpt = None
    if plan.save_checkpoints:
        ckpt = Path(out_dir) / "checkpoints" / f"{set_name(lead_set)}_{trial:04d}.ckpt"
    try:
        config = trial_config(plan, lead_set, trial)
        result = train_trial(index, config, ckpt, store=store)
        record = TrialRecord(lead_set, trial, result)
    except Exception as exc:  # one bad trial must not sink the plan
        log.warning("trial %s #%d failed: %s", set_name(lead_set), trial, exc)
        record = TrialRecord(lead_set, trial, error=f"{type(exc).__name__}: {exc}")
    return record.to_dict()


def read_log(path: str | Path) -> list[TrialRecord]:
    """Parse a results log; an unterminated last line (interrupted write) is dropped."""
    path = Path(path)
    if not path.exists():
        return []
    records = {}
    for line in path.read_text().splitlines():
        try:
            rec = TrialRecord.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError):
            log.warning("skipping unreadable results line in %s", path)
            continue
        records[(rec.lead_set, rec.trial)] = rec
    return list(records.values())


def run_plan(index: DatasetIndex, plan: ExperimentPlan, out_dir: str | Path, workers: int = 1,
             resume: bool = False) -> PlanResults:
    """Run every (lead set, trial) of the plan, appending to ``out_dir/results.jsonl``.

    With ``resume`` the completed trials of an earlier run of the same plan are
    kept and only missing or failed ones are run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if plan.save_checkpoints:
        (out / "checkpoints").mkdir(exist_ok=True)
    log_path = out / "results.jsonl"
    plan_path = out / "plan.resolved.json"
    previous: list[TrialRecord] = []
    if log_path.exists() and log_path.stat().st_size > 0:
        if not resume:
            raise FileExistsError(f"{log_path} exists; pass resume or use a fresh output directory")
        if plan_path.exists() and json.loads(plan_path.read_text()) != plan.to_dict():
            raise ValueError(f"{out} holds results of a different plan")
        previous = read_log(log_path)
    plan_path.write_text(json.dumps(plan.to_dict(), indent=1) + "\n")

    done = {(r.lead_set, r.trial): r for r in previous if r.ok}
    # rewrite so a torn final line cannot merge with the next append
    with log_path.open("w") as fh:
        for rec in done.values():
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    todo = [t for t in plan.tasks() if t not in done]
    log.info("%d trials done, %d to run", len(done), len(todo))

    records = list(done.values())
    with log_path.open("a") as fh:
        def collect(d: dict):
            fh.write(json.dumps(d, sort_keys=True) + "\n")
            fh.flush()
            records.append(TrialRecord.from_dict(d))

        if workers <= 1:
            _worker_init(index)
            for lead_set, trial in todo:
                collect(_run_task(plan, lead_set, trial, str(out)))
        else:
            with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(index,)) as pool:
                futures = [pool.submit(_run_task, plan, s, t, str(out)) for s, t in todo]
                for fut in as_completed(futures):
                    collect(fut.result())

    order = {t: i for i, t in enumerate(plan.tasks())}
    records.sort(key=lambda r: order[(r.lead_set, r.trial)])
    return PlanResults(records)


# -------------------------------------------------------------- statistics


@dataclass(frozen=True)
class AggregateStats:
    mean: float
    std_dev: float
    median: float
    n: int
    values: tuple[float, ...]
    std_flag: bool = False  # std undefined for n = 1, reported as 0
    population: bool = False

    @property
    def min(self) -> float:
        return min(self.values)

    @property
    def max(self) -> float:
        return max(self.values)


def _accuracy(item) -> float:
    acc = item.test.accuracy if isinstance(item, TrialResult) else item
    if acc is None or not math.isfinite(acc):
        raise ValueError(f"accuracy {acc!r} cannot be aggregated")
    return float(acc)


def aggregate(results: Iterable, population: bool = False) -> AggregateStats:
    """Mean, standard deviation and median of test accuracies (or plain numbers)."""
    values = tuple(_accuracy(r) for r in results)
    if not values:
        raise EmptyResults("nothing to aggregate")
    n = len(values)
    mean = statistics.fmean(values)
    if population:
        std, flag = statistics.pstdev(values), False
    elif n == 1:
        std, flag = 0.0, True
    else:
        std, flag = statistics.stdev(values), False
    return AggregateStats(mean, std, statistics.median(values), n, values, flag, population)


def top_k(results: Sequence, k: int, population: bool = False) -> AggregateStats:
    """Aggregate the k best accuracies; ties keep the lower trial index."""
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(results):
        raise KTooLarge(f"k={k} exceeds {len(results)} results")
    ranked = sorted(enumerate(results), key=lambda p: (-_accuracy(p[1]), p[0]))
    return aggregate([r for _, r in ranked[:k]], population)


def rank_leads(stats_by_set: dict) -> list:
    """Keys ordered by mean accuracy, then median, then name."""
    if not stats_by_set:
        raise EmptyResults("no lead sets to rank")

    def name(key):
        return key if isinstance(key, str) else set_name(key)

    return sorted(stats_by_set, key=lambda k: (-stats_by_set[k].mean, -stats_by_set[k].median, name(k)))


def candidate_pairs(ranked: Sequence, top: int = 5) -> list[tuple[str, str]]:
    """All unordered pairs among the ``top`` best single leads."""
    leads = [k if isinstance(k, str) else k[0] for k in ranked[:top]]
    return list(itertools.combinations(leads, 2))


# ----------------------------------------------------------------- reports

DETAIL_COLUMNS = ("lead_set", "trial", "seed", "split_id", "accuracy", "sensitivity", "specificity", "precision")
SUMMARY_COLUMNS = ("lead_set", "n", "mean", "std_dev", "median", "min", "max",
                   *(f"top{k}_mean" for k in TOP_K))


def _cell(v) -> str:
    return "n/a" if v is None else repr(v)


def _pct(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def summarize(results: dict[LeadSet, list[TrialResult]], population: bool = False) -> dict[LeadSet, AggregateStats]:
    return {s: aggregate(rs, population) for s, rs in results.items() if rs}


def report(plan_results: PlanResults, out_dir: str | Path, population: bool = False) -> dict[str, Path]:
    """Write detail/summary CSVs, text tables and plot series; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = plan_results.results
    stats = summarize(results, population)
    paths = {name: out / name for name in ("detail.csv", "summary.csv", "tables.txt", "series.json")}

    with paths["detail.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETAIL_COLUMNS)
        for rec in plan_results.records:
            if rec.ok:
                t = rec.result.test
                w.writerow([set_name(rec.lead_set), rec.trial, rec.result.seed, rec.result.split["split_id"],
                            _cell(t.accuracy), _cell(t.sensitivity), _cell(t.specificity), _cell(t.precision)])

    ranked = rank_leads(stats) if stats else []
    with paths["summary.csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in ranked:
            a = stats[s]
            tops = [_cell(top_k(results[s], k, population).mean) if k <= a.n else "" for k in TOP_K]
            w.writerow([set_name(s), a.n, repr(a.mean), repr(a.std_dev), repr(a.median), repr(a.min),
                        repr(a.max), *tops])

    lines = [f"{'lead set':<14}{'n':>5}{'mean %':>10}{'std %':>9}{'median %':>10}{'min %':>9}{'max %':>9}"]
    for s in ranked:
        a = stats[s]
        std = _pct(a.std_dev) + ("*" if a.std_flag else "")
        lines.append(f"{set_name(s):<14}{a.n:>5}{_pct(a.mean):>10}{std:>9}{_pct(a.median):>10}"
                     f"{_pct(a.min):>9}{_pct(a.max):>9}")
    if any(a.std_flag for a in stats.values()):
        lines.append("* single trial: standard deviation undefined, shown as 0")
    lines.append(f"std: {'population' if population else 'sample (n-1)'}; "
                 "model selection: best validation accuracy, ties to the earlier epoch")
    for s in ranked:
        tops = [f"top-{k} mean {_pct(top_k(results[s], k, population).mean)}" for k in TOP_K if k <= stats[s].n]
        if tops:
            lines.append(f"{set_name(s)}: " + ", ".join(tops))
    if plan_results.failures:
        lines.append("")
        lines.append(f"failed trials: {len(plan_results.failures)}")
        lines.extend(f"  {set_name(r.lead_set)} #{r.trial}: {r.error}" for r in plan_results.failures)
    if ranked and all(len(s) == 1 for s in ranked) and len(ranked) >= 2:
        pairs = candidate_pairs(ranked)
        paths["pair_grid.json"] = out / "pair_grid.json"
        paths["pair_grid.json"].write_text(json.dumps([list(p) for p in pairs]) + "\n")
        lines.append("")
        lines.append("candidate pairs: " + "; ".join(set_name(p) for p in pairs))
    paths["tables.txt"].write_text("\n".join(lines) + "\n")

    series = {set_name(s): [[rec.trial, rec.result.test.accuracy] for rec in plan_results.records
                            if rec.ok and rec.lead_set == s] for s in plan_results.lead_sets()}
    paths["series.json"].write_text(json.dumps(series, indent=1) + "\n")
    return paths


def load_summary(path: str | Path) -> dict[str, dict]:
    with Path(path).open(newline="") as fh:
        return {row["lead_set"]: row for row in csv.DictReader(fh)}


def load_detail(path: str | Path) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["lead_set"], []).append(float(row["accuracy"]))
    return out
