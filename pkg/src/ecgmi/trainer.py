"""One training trial: balanced-batch training, best-val selection, single test read."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import save_checkpoint, write_sidecar
from .dataset import SignalStore, Split, SplitSpec, balanced_batches, eval_windows, make_split
from .errors import DivergedTraining, EmptyPartition, InfeasibleSplit, NonFiniteGradient
from .ingest import DatasetIndex
from .nn import (AdamState, ModelParams, adam_step, build_model, commit_running_stats, model_backward,
                 model_forward, predict, smoothed_cross_entropy)

log = logging.getLogger(__name__)

_ARCH_KEYS = ("channels", "kernel", "stride", "num_layers", "activation", "bn_momentum", "bn_eps")


@dataclass(frozen=True)
class TrainConfig:
    leads: tuple[str, ...]
    split: SplitSpec = field(default_factory=SplitSpec)
    batch_size: int = 10
    lr: float = 1e-4
    label_smoothing: float = 0.1
    epochs: int = 50
    windows_per_epoch: int = 2000
    seed: int = 0
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    arch: dict = field(default_factory=dict)
    split_manifest: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "leads", tuple(self.leads))
        if not 1 <= len(self.leads) <= 3:
            raise ValueError(f"between 1 and 3 leads required, got {list(self.leads)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batchnorm")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.windows_per_epoch < self.batch_size:
            raise ValueError("windows_per_epoch must cover at least one batch")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        unknown = set(self.arch) - set(_ARCH_KEYS)
        if unknown:
            raise ValueError(f"unknown architecture keys {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leads"] = list(self.leads)
        d["split"] = {"mode": self.split.mode, "ratios": list(self.split.ratios), "seed": self.split.seed}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("split"), dict):
            s = d["split"]
            d["split"] = SplitSpec(s.get("mode", "record"), tuple(s.get("ratios", (0.8, 0.1, 0.1))),
                                   int(s.get("seed", 0)))
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Metrics:
    """Confusion counts with MI as the positive class; ratios are percentages or None."""

    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _pct(num: int, den: int) -> float | None:
        return 100.0 * num / den if den > 0 else None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float | None:
        return self._pct(self.tp + self.tn, self.total)

    @property
    def sensitivity(self) -> float | None:
        return self._pct(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return self._pct(self.tn, self.tn + self.fp)

    @property
    def precision(self) -> float | None:
        return self._pct(self.tp, self.tp + self.fp)

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> Metrics:
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p)))

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "precision": self.precision}

    @classmethod
    def from_dict(cls, d: dict) -> Metrics:
        return cls(int(d["tp"]), int(d["fp"]), int(d["tn"]), int(d["fn"]))

    def format(self) -> str:
        def f(v):
            return "n/a" if v is None else f"{v:.2f}%"
        return (f"accuracy {f(self.accuracy)}  sensitivity {f(self.sensitivity)}  "
                f"specificity {f(self.specificity)}  precision {f(self.precision)}  "
                f"(TP={self.tp} FP={self.fp} TN={self.tn} FN={self.fn})")


@dataclass
class TrialResult:
    config: dict
    seed: int
    leads: tuple[str, ...]
    split: dict
    best_epoch: int
    epochs_run: int
    val: Metrics
    test: Metrics
    history: list[dict]
    wall_time: float
    partition_reads: dict[str, int]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leads"] = list(self.leads)
        d["val"] = self.val.to_dict()
        d["test"] = self.test.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> TrialResult:
        d = dict(d)
        d["leads"] = tuple(d["leads"])
        d["val"] = Metrics.from_dict(d["val"])
        d["test"] = Metrics.from_dict(d["test"])
        return cls(**d)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock time."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


class PartitionAccess:
    """Hands out partition record ids and counts every read."""

    def __init__(self, split: Split):
        self._split = split
        self.reads = {"train": 0, "val": 0, "test": 0}

    def read(self, name: str) -> tuple[str, ...]:
        ids = self._split.partition(name)
        self.reads[name] += 1
        return ids


def evaluate(params: ModelParams, partition: Sequence[str], store: SignalStore, batch_size: int = 32) -> Metrics:
    """Argmax on one centred window per record, eval-mode batchnorm."""
    if len(partition) == 0:
        raise EmptyPartition("cannot evaluate an empty partition")
    windows = eval_windows(partition, store, params.arch.input_len)
    if not windows:
        raise EmptyPartition("no record in the partition is long enough for a window")
    x = np.stack([w.data for w in windows])
    y_true = np.array([w.label for w in windows])
    return Metrics.from_predictions(y_true, predict(x, params, batch_size))


def init_model(config: TrainConfig, rng: np.random.Generator) -> tuple[ModelParams, AdamState]:
    params = build_model(len(config.leads), rng, np.float32, **config.arch)
    state = AdamState.zeros_like(params.learnables(), lr=config.lr, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.adam_eps)
    return params, state


def train_one_epoch(params: ModelParams, state: AdamState, train_ids: Sequence[str], store: SignalStore,
                    config: TrainConfig, rng: np.random.Generator):
    """Returns (params, state, mean_loss, batch_accuracy); ``params`` is not mutated."""
    params = params.copy()
    losses, correct, seen = [], 0, 0
    for batch in balanced_batches(train_ids, store, config.batch_size, config.windows_per_epoch, rng,
                                  params.arch.input_len):
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
            logits, cache = model_forward(batch.data, params, "train")
            loss, dlogits = smoothed_cross_entropy(logits, batch.labels, config.label_smoothing)
        if not math.isfinite(loss):
            raise DivergedTraining(f"non-finite loss at optimizer step {state.step_count + 1}")
        grads = model_backward(cache, dlogits)
        commit_running_stats(params, cache)
        try:
            new, state = adam_step(params.learnables(), grads, state)
        except NonFiniteGradient as exc:
            raise DivergedTraining(f"{exc} at optimizer step {state.step_count + 1}") from None
        params = params.replace_arrays(new)
        losses.append(loss)
        correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
        seen += len(batch)
    return params, state, float(np.mean(losses)), 100.0 * correct / seen


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, sampler_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(sampler_ss)


def resolve_split(index: DatasetIndex, config: TrainConfig) -> Split:
    if config.split_manifest:
        split = Split.load(config.split_manifest)
        missing = [r for r in split.train + split.val + split.test if r not in index or not index[r].usable]
        if missing:
            raise InfeasibleSplit(f"split manifest names {len(missing)} records not usable here, e.g. {missing[0]}")
        return split
    return make_split(index, config.split)


def train_trial(index: DatasetIndex, config: TrainConfig, checkpoint_path: str | Path | None = None,
                split: Split | None = None, store: SignalStore | None = None) -> TrialResult:
    """Train from scratch, keep the best-val model, evaluate it once on test.

    Numerics run single-threaded so results do not depend on BLAS threading.
    """
    started = time.perf_counter()
    split = split or resolve_split(index, config)
    store = store or SignalStore(index, config.leads)
    access = PartitionAccess(split)
    init_rng, sampler_rng = _seeds(config.seed)

    with threadpool_limits(limits=1):
        params, state = init_model(config, init_rng)
        train_ids = access.read("train")
        best = None  # (val_accuracy, epoch, params, state, val_metrics)
        history = []
        for epoch in range(config.epochs):
            params, state, loss, train_acc = train_one_epoch(params, state, train_ids, store, config, sampler_rng)
            val = evaluate(params, access.read("val"), store)
            history.append({"epoch": epoch, "train_loss": loss, "train_accuracy": train_acc,
                            "val": val.to_dict()})
            log.info("epoch %d loss %.4f val %s", epoch, loss, val.format())
            if best is None or val.accuracy > best[0]:
                best = (val.accuracy, epoch, params.copy(), state, val)
            elif epoch - best[1] >= config.patience:
                log.info("early stop at epoch %d, best epoch %d", epoch, best[1])
                break
        _, best_epoch, best_params, best_state, best_val = best
        test = evaluate(best_params, access.read("test"), store)

    if access.reads["test"] != 1:
        raise AssertionError("test partition must be read exactly once")
    split_ref = {"mode": split.spec.mode, "seed": split.spec.seed, "attempt": split.attempt,
                 "split_id": split.split_id(), "manifest": config.split_manifest}
    result = TrialResult(config.to_dict(), config.seed, config.leads, split_ref, best_epoch, len(history),
                         best_val, test, history, time.perf_counter() - started, dict(access.reads))
    if checkpoint_path is not None:
        save_checkpoint(best_params, best_state, checkpoint_path, config.leads)
        write_sidecar(checkpoint_path, {"seed": config.seed, "config_hash": config.config_hash(),
                                        "config": config.to_dict(), "best_epoch": best_epoch,
                                        "split_id": split_ref["split_id"], "history": history})
    return result
