"""Windows, splits and the class-balanced batch sampler."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InfeasibleSplit, MissingClass, TooShort, UnknownLead
from .ingest import DatasetIndex, EcgRecord, read_record

log = logging.getLogger(__name__)

WINDOW_LEN = 10_000
SPLIT_MODES = ("record", "patient")
MAX_SPLIT_ATTEMPTS = 100


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "record"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"split mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        if len(self.ratios) != 3 or min(self.ratios) <= 0 or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValueError(f"ratios must be three positive fractions summing to 1, got {self.ratios}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    spec: SplitSpec
    attempt: int = 0

    def partition(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {"mode": self.spec.mode, "seed": self.spec.seed, "ratios": list(self.spec.ratios),
                "attempt": self.attempt, "train": list(self.train), "val": list(self.val),
                "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> Split:
        spec = SplitSpec(d["mode"], tuple(d.get("ratios", (0.8, 0.1, 0.1))), int(d["seed"]))
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), spec, int(d.get("attempt", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Split:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def split_id(self) -> str:
        blob = json.dumps([self.train, self.val, self.test]).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Window:
    leads: tuple[str, ...]
    data: np.ndarray
    label: int
    source_record: str
    offset: int


@dataclass
class WindowBatch:
    windows: list[Window]
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.array([w.label for w in self.windows], dtype=np.int64)

    def __len__(self):
        return len(self.windows)

    @property
    def data(self) -> np.ndarray:
        return np.stack([w.data for w in self.windows])


# -------------------------------------------------------------------- windows


def select_leads(record: EcgRecord, leads: Sequence[str]) -> np.ndarray:
    missing = [ld for ld in leads if ld not in record.channels]
    if missing:
        raise UnknownLead(missing[0])
    if len(set(leads)) != len(leads):
        log.info("duplicate leads requested: %s", list(leads))
    return np.stack([record.channels[ld] for ld in leads])


def random_window(signal: np.ndarray, window_len: int, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    n = signal.shape[-1]
    if n < window_len:
        raise TooShort(f"{n} samples < window of {window_len}")
    offset = int(rng.integers(0, n - window_len + 1))
    return offset, signal[..., offset:offset + window_len]


def normalize(window: np.ndarray) -> np.ndarray:
    """Per-row z-score; rows with std below 1e-8 become zeros.

    Moments are taken in float64; the result keeps a floating input's dtype.
    """
    window = np.asarray(window)
    dtype = window.dtype if window.dtype.kind == "f" else np.float64
    x = window.astype(np.float64)
    centered = x - x.mean(axis=-1, keepdims=True)
    sd = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    flat = sd < 1e-8
    out = np.where(flat, 0.0, centered / np.where(flat, 1.0, sd))
    return out.astype(dtype, copy=False)


# --------------------------------------------------------------------- splits


def _class_ok(ids: Sequence[str], index: DatasetIndex) -> bool:
    classes = {index[r].label.binary for r in ids}
    return classes == {0, 1}


def _cut(n: int, ratios) -> tuple[int, int]:
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    return n - n_val - n_test, n_val


def make_split(index: DatasetIndex, spec: SplitSpec) -> Split:
    """Shuffle usable records (or patients) into train/val/test.

    Retries with sub-seeds (seed, attempt) until every partition holds both
    classes; attempt 0 uses the seed itself.
    """
    usable = index.usable()
    if {e.label.binary for e in usable} != {0, 1}:
        raise InfeasibleSplit("need at least one usable record of each class")
    if spec.mode == "record":
        units = [[e.record_id] for e in usable]
    else:
        groups: dict[str, list[str]] = {}
        for e in usable:
            groups.setdefault(e.patient_id, []).append(e.record_id)
        units = [groups[p] for p in sorted(groups)]
    n_train, n_val = _cut(len(units), spec.ratios)
    for attempt in range(MAX_SPLIT_ATTEMPTS):
        rng = np.random.default_rng(spec.seed if attempt == 0 else [spec.seed, attempt])
        order = rng.permutation(len(units))
        parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
        ids = [tuple(sorted(r for i in p for r in units[i])) for p in parts]
        if all(_class_ok(p, index) for p in ids):
            return Split(ids[0], ids[1], ids[2], spec, attempt)
    raise InfeasibleSplit(f"no split with both classes in every partition after {MAX_SPLIT_ATTEMPTS} attempts")


# -------------------------------------------------------------------- signals


class SignalStore:
    """Lazy per-record cache of the selected leads as float32 millivolts."""

    def __init__(self, index: DatasetIndex, leads: Sequence[str], on_checksum: str = "warn"):
        self.index = index
        self.leads = tuple(leads)
        self.on_checksum = on_checksum
        self._cache: dict[str, np.ndarray] = {}

    def _load(self, record_id: str) -> np.ndarray:
        entry = self.index[record_id]
        for lead in self.leads:
            if lead not in entry.lead_names:
                raise UnknownLead(lead)
        rec = read_record(self.index.record_path(record_id), set(self.leads), self.on_checksum)
        return select_leads(rec, self.leads).astype(np.float32)

    def matrix(self, record_id: str) -> np.ndarray:
        m = self._cache.get(record_id)
        if m is None:
            m = self._cache[record_id] = self._load(record_id)
        return m

    def label(self, record_id: str) -> int:
        return self.index[record_id].label.binary

    def preload(self, record_ids: Sequence[str], threads: int = 1) -> None:
        """Decode records ahead of time; only file reads run concurrently."""
        todo = [r for r in dict.fromkeys(record_ids) if r not in self._cache]
        if threads <= 1 or len(todo) <= 1:
            for r in todo:
                self.matrix(r)
            return
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            loaded = list(pool.map(self._load, todo))
        self._cache.update(zip(todo, loaded))


def _by_class(ids: Sequence[str], store: SignalStore) -> tuple[list[str], list[str]]:
    neg = [r for r in ids if store.label(r) == 0]
    pos = [r for r in ids if store.label(r) == 1]
    return neg, pos


def balanced_batches(partition: Sequence[str], store: SignalStore, batch_size: int,
                     windows_per_epoch: int, rng: np.random.Generator,
                     window_len: int = WINDOW_LEN) -> Iterator[WindowBatch]:
    """Yield ``windows_per_epoch // batch_size`` batches.

    Each element: fair coin for the class, uniform record within the class,
    uniform crop, per-lead normalization.
    """
    neg, pos = _by_class(partition, store)
    if not neg or not pos:
        raise MissingClass("partition lacks " + ("healthy" if not neg else "MI") + " records")
    pools = (neg, pos)
    for _ in range(windows_per_epoch // batch_size):
        windows = []
        for _ in range(batch_size):
            cls = int(rng.random() < 0.5)
            pool = pools[cls]
            rid = pool[int(rng.integers(len(pool)))]
            offset, crop = random_window(store.matrix(rid), window_len, rng)
            windows.append(Window(store.leads, normalize(crop), cls, rid, offset))
        yield WindowBatch(windows)


def centered_offset(length: int, window_len: int = WINDOW_LEN) -> int:
    return (length - window_len) // 2


def eval_windows(partition: Sequence[str], store: SignalStore, window_len: int = WINDOW_LEN) -> list[Window]:
    out = []
    for rid in partition:
        m = store.matrix(rid)
        if m.shape[-1] < window_len:
            log.info("skipping %s: %d samples < %d", rid, m.shape[-1], window_len)
            continue
        off = centered_offset(m.shape[-1], window_len)
        out.append(Window(store.leads, normalize(m[:, off:off + window_len]), store.label(rid), rid, off))
    return out

