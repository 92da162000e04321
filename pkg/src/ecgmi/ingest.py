"""WFDB (format 16) reader for the PTB diagnostic ECG database.

Only what PTB needs is supported: single-segment records, storage format 16
(little-endian int16, frame-interleaved across the signals of one file) and
the ``# Reason for admission:`` comment that carries the diagnosis.
PTB stores the 12 standard leads in ``<rec>.dat`` and the Frank leads in
``<rec>.xyz``; both are plain format-16 files described by the same header.
"""
from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, EmptyDataset, MalformedHeader, TruncatedFile, UnsupportedFormat

log = logging.getLogger(__name__)

PTB_LEADS = ("i", "ii", "iii", "avr", "avl", "avf",
             "v1", "v2", "v3", "v4", "v5", "v6", "vx", "vy", "vz")
FRANK_LEADS = ("vx", "vy", "vz")
DEFAULT_GAIN = 200.0
WINDOW_SECONDS = 10
INVALID_SAMPLE = -32768

_FMT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)(?:\(([-+]?\d+)\))?(?:/(\S*))?$")
_FS_RE = re.compile(r"^([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)(?:/[^(]*)?(?:\(.*\))?$")


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    storage_format: int
    gain: float
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int
    block_size: int
    lead_name: str
    baseline: int
    byte_offset: int = 0
    units: str = "mV"
    gain_defaulted: bool = False


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    num_signals: int
    sampling_rate: int
    num_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]

    def files(self) -> dict[str, list[int]]:
        """Signal indices grouped by file, in header order."""
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.signals):
            out.setdefault(s.file_name, []).append(i)
        return out


class Diagnosis(enum.Enum):
    MI = "Myocardial infarction"
    HEALTHY = "Healthy control"
    OTHER = "Other"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class DiagnosisLabel:
    kind: Diagnosis
    text: str | None = None

    @property
    def name(self) -> str:
        if self.kind is Diagnosis.OTHER:
            return self.text or ""
        return self.kind.value

    @property
    def trainable(self) -> bool:
        return self.kind in (Diagnosis.MI, Diagnosis.HEALTHY)

    @property
    def binary(self) -> int:
        """MI is the positive class."""
        if not self.trainable:
            raise ValueError(f"label {self.name!r} has no binary class")
        return int(self.kind is Diagnosis.MI)

    @classmethod
    def from_name(cls, name: str) -> DiagnosisLabel:
        for kind in (Diagnosis.MI, Diagnosis.HEALTHY, Diagnosis.UNKNOWN):
            if name == kind.value:
                return cls(kind)
        return cls(Diagnosis.OTHER, name)


MI = DiagnosisLabel(Diagnosis.MI)
HEALTHY = DiagnosisLabel(Diagnosis.HEALTHY)
UNKNOWN = DiagnosisLabel(Diagnosis.UNKNOWN)


@dataclass(frozen=True)
class EcgRecord:
    patient_id: str
    record_name: str
    channels: dict[str, np.ndarray]
    sampling_rate: int
    label: DiagnosisLabel

    @property
    def num_samples(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    @property
    def record_id(self) -> str:
        return f"{self.patient_id}/{self.record_name}"


# --------------------------------------------------------------------- header


def _int(tok: str, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {tok!r}") from None


def _parse_record_line(line: str) -> tuple[str, int, int, int]:
    toks = line.split()
    if len(toks) < 4:
        raise MalformedHeader(f"record line needs name, nsig, fs and nsamp, got {line!r}")
    name = toks[0]
    if "/" in name:
        raise UnsupportedFormat(f"multi-segment record {name!r}")
    nsig = _int(toks[1], "signal count")
    if nsig < 0:
        raise MalformedHeader(f"negative signal count {nsig}")
    m = _FS_RE.match(toks[2])
    if not m:
        raise MalformedHeader(f"bad sampling frequency {toks[2]!r}")
    fs = float(m.group(1))
    if not np.isfinite(fs) or fs <= 0 or fs != int(fs):
        raise MalformedHeader(f"sampling frequency must be a positive integer, got {toks[2]!r}")
    nsamp = _int(toks[3], "sample count")
    if nsamp < 0:
        raise MalformedHeader(f"negative sample count {nsamp}")
    return name, nsig, int(fs), nsamp


def _parse_signal_line(line: str) -> SignalSpec:
    toks = line.split(maxsplit=8)
    if len(toks) < 9 or not toks[8].strip():
        raise MalformedHeader(f"signal line needs 9 fields, got {line!r}")
    file_name, fmt, gain_tok, res, zero, init, csum, bsize, desc = toks
    m = _FMT_RE.match(fmt)
    if not m:
        raise MalformedHeader(f"bad format field {fmt!r}")
    code, spf, skew, offset = m.groups()
    if int(code) != 16:
        raise UnsupportedFormat(f"storage format {code} (only 16 is supported)")
    if (spf and int(spf) != 1) or (skew and int(skew) != 0):
        raise UnsupportedFormat(f"format modifiers not supported: {fmt!r}")
    g = _GAIN_RE.match(gain_tok)
    if not g:
        raise MalformedHeader(f"bad gain field {gain_tok!r}")
    gain = float(g.group(1))
    if not np.isfinite(gain) or gain < 0:
        raise MalformedHeader(f"gain must be positive, got {gain_tok!r}")
    defaulted = gain == 0
    if defaulted:
        gain = DEFAULT_GAIN
    adc_zero = _int(zero, "adc zero")
    baseline = int(g.group(2)) if g.group(2) is not None else adc_zero
    return SignalSpec(
        file_name=file_name,
        storage_format=16,
        gain=gain,
        adc_resolution=_int(res, "adc resolution"),
        adc_zero=adc_zero,
        initial_value=_int(init, "initial value"),
        checksum=_int(csum, "checksum"),
        block_size=_int(bsize, "block size"),
        lead_name=desc.strip().lower(),
        baseline=baseline,
        byte_offset=int(offset) if offset else 0,
        units=g.group(3) or "mV",
        gain_defaulted=defaulted,
    )


def parse_header(data: bytes | str) -> RecordHeader:
    """Parse the text of a ``.hea`` file.

    Raises MalformedHeader or UnsupportedFormat; never anything else.
    """
    text = data.decode("latin-1") if isinstance(data, (bytes, bytearray)) else data
    comments: list[str] = []
    body: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            body.append(line)
    if not body:
        raise MalformedHeader("no record line")
    name, nsig, fs, nsamp = _parse_record_line(body[0])
    if len(body) - 1 != nsig:
        raise MalformedHeader(f"header declares {nsig} signals but has {len(body) - 1} signal lines")
    signals = tuple(_parse_signal_line(line) for line in body[1:])
    seen = set()
    for s in signals:
        if s.lead_name in seen:
            raise MalformedHeader(f"duplicate lead name {s.lead_name!r}")
        seen.add(s.lead_name)
        if s.gain_defaulted:
            log.warning("record %s lead %s: zero gain replaced by %g", name, s.lead_name, DEFAULT_GAIN)
    return RecordHeader(name, nsig, fs, nsamp, signals, tuple(comments))


def extract_diagnosis(header: RecordHeader) -> DiagnosisLabel:
    for c in header.comments:
        key, sep, value = c.partition(":")
        if not sep or key.strip().casefold() != "reason for admission":
            continue
        value = value.strip()
        folded = value.casefold()
        if folded == "myocardial infarction":
            return MI
        if folded == "healthy control":
            return HEALTHY
        # PTB writes "n/a" for the subjects without a diagnostic class
        if folded in ("", "n/a"):
            return UNKNOWN
        return DiagnosisLabel(Diagnosis.OTHER, value)
    return UNKNOWN


# --------------------------------------------------------------------- signal


def checksum16(values) -> int:
    """16-bit two's-complement wrapping sum, as stored in WFDB headers."""
    s = int(np.asarray(values, dtype=np.int64).sum()) & 0xFFFF
    return s - 0x10000 if s >= 0x8000 else s


def decode_adc(data: bytes, header: RecordHeader, file_name: str | None = None,
               on_checksum: str = "warn") -> dict[str, np.ndarray]:
    """Raw int16 ADC samples for the signals stored in ``file_name``."""
    files = header.files()
    if file_name is None:
        if len(files) != 1:
            raise ValueError(f"record spans {len(files)} files; pass file_name")
        file_name = next(iter(files))
    idx = files[file_name]
    offset = header.signals[idx[0]].byte_offset
    n = header.num_samples
    need = offset + n * len(idx) * 2
    if len(data) < need:
        raise TruncatedFile(f"{file_name}: {len(data)} bytes, need {need}")
    frames = np.frombuffer(data, dtype="<i2", count=n * len(idx), offset=offset).reshape(n, len(idx))
    out = {}
    for col, i in enumerate(idx):
        spec = header.signals[i]
        adc = frames[:, col].astype(np.int16)
        total = checksum16(adc)
        if total != spec.checksum:
            err = ChecksumMismatch(spec.lead_name, spec.checksum, total)
            if on_checksum == "error":
                raise err
            if on_checksum == "warn":
                log.warning("%s: %s", header.record_name, err)
        out[spec.lead_name] = adc
    return out


def adc_to_physical(adc: np.ndarray, spec: SignalSpec) -> np.ndarray:
    mv = (adc.astype(np.float64) - spec.baseline) / spec.gain
    mv[adc == INVALID_SAMPLE] = np.nan
    return mv


def decode_signal_file(data: bytes, header: RecordHeader, file_name: str | None = None,
                       on_checksum: str = "warn") -> dict[str, np.ndarray]:
    """Decode one format-16 file into millivolt samples keyed by lead name."""
    adc = decode_adc(data, header, file_name, on_checksum)
    by_name = {s.lead_name: s for s in header.signals}
    return {lead: adc_to_physical(a, by_name[lead]) for lead, a in adc.items()}


def read_header(path: str | Path) -> RecordHeader:
    path = Path(path)
    return parse_header(path.with_name(path.name + ".hea").read_bytes())


def read_record(path: str | Path, leads=None, on_checksum: str = "warn") -> EcgRecord:
    """Load ``<path>.hea`` and its signal files. ``path`` omits the extension.

    Only files holding at least one requested lead are read.
    """
    path = Path(path)
    header = read_header(path)
    wanted = set(header.lead_names if leads is None else leads)
    channels: dict[str, np.ndarray] = {}
    for fname, idx in header.files().items():
        if not any(header.signals[i].lead_name in wanted for i in idx):
            continue
        data = (path.parent / fname).read_bytes()
        for lead, mv in decode_signal_file(data, header, fname, on_checksum).items():
            if lead in wanted:
                channels[lead] = mv
    ordered = {s.lead_name: channels[s.lead_name] for s in header.signals if s.lead_name in channels}
    return EcgRecord(path.parent.name, header.record_name, ordered, header.sampling_rate,
                     extract_diagnosis(header))


# --------------------------------------------------------------------- writer


def encode_format16(adc: np.ndarray) -> bytes:
    """Frame-interleave a [num_signals x num_samples] int array as format 16."""
    adc = np.asarray(adc)
    if adc.ndim != 2:
        raise ValueError("expected [num_signals x num_samples]")
    if adc.size and (adc.min() < -32768 or adc.max() > 32767):
        raise ValueError("ADC values out of int16 range")
    return np.ascontiguousarray(adc.T).astype("<i2").tobytes()


def format_header(header: RecordHeader) -> str:
    lines = [f"{header.record_name} {header.num_signals} {header.sampling_rate} {header.num_samples}"]
    for s in header.signals:
        fmt = "16" if not s.byte_offset else f"16+{s.byte_offset}"
        gain = f"{s.gain:g}" if s.baseline == s.adc_zero else f"{s.gain:g}({s.baseline})"
        lines.append(f"{s.file_name} {fmt} {gain} {s.adc_resolution} {s.adc_zero} "
                     f"{s.initial_value} {s.checksum} {s.block_size} {s.lead_name}")
    lines += [f"# {c}" for c in header.comments]
    return "\n".join(lines) + "\n"


def write_record(directory: str | Path, record_name: str, adc: dict[str, np.ndarray],
                 sampling_rate: int = 1000, gain: float = 2000.0, comments=(),
                 split_frank: bool = True) -> RecordHeader:
    """Write a synthetic record in PTB layout (Frank leads in ``.xyz``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    leads = list(adc)
    lengths = {len(a) for a in adc.values()}
    if len(lengths) > 1:
        raise ValueError("all leads must have equal length")
    n = lengths.pop() if lengths else 0
    groups: dict[str, list[str]] = {}
    for lead in leads:
        ext = "xyz" if split_frank and lead in FRANK_LEADS else "dat"
        groups.setdefault(f"{record_name}.{ext}", []).append(lead)
    specs = []
    for fname, members in groups.items():
        block = np.stack([np.asarray(adc[m]) for m in members]) if members else np.zeros((0, n))
        (directory / fname).write_bytes(encode_format16(block.reshape(len(members), n)))
        for m in members:
            a = np.asarray(adc[m])
            specs.append(SignalSpec(fname, 16, float(gain), 16, 0, int(a[0]) if n else 0,
                                    checksum16(a), 0, m, 0))
    # header order follows the caller's lead order
    specs.sort(key=lambda s: leads.index(s.lead_name))
    header = RecordHeader(record_name, len(specs), sampling_rate, n, tuple(specs), tuple(comments))
    (directory / f"{record_name}.hea").write_text(format_header(header))
    return header


# ---------------------------------------------------------------------- index


@dataclass(frozen=True)
class IndexEntry:
    patient_id: str
    record_name: str
    label: DiagnosisLabel
    num_samples: int
    sampling_rate: int
    lead_names: tuple[str, ...]
    usable: bool
    reason: str | None = None

    @property
    def record_id(self) -> str:
        return f"{self.patient_id}/{self.record_name}"


@dataclass
class DatasetIndex:
    root: Path
    records: list[IndexEntry]
    failures: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {e.record_id: e for e in self.records}

    def __getitem__(self, record_id: str) -> IndexEntry:
        return self._by_id[record_id]

    def __contains__(self, record_id) -> bool:
        return record_id in self._by_id

    @property
    def patients(self) -> dict[str, list[IndexEntry]]:
        out: dict[str, list[IndexEntry]] = {}
        for e in self.records:
            out.setdefault(e.patient_id, []).append(e)
        return out

    def usable(self) -> list[IndexEntry]:
        return [e for e in self.records if e.usable]

    def record_histogram(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.records:
            out[e.label.name] = out.get(e.label.name, 0) + 1
        return dict(sorted(out.items()))

    def patient_histogram(self) -> dict[str, int]:
        """Patients per label; a patient with records of two labels counts under both."""
        out: dict[str, int] = {}
        for entries in self.patients.values():
            for name in sorted({e.label.name for e in entries}):
                out[name] = out.get(name, 0) + 1
        return dict(sorted(out.items()))

    def summary(self) -> dict:
        return {
            "patients": len(self.patients),
            "records": len(self.records),
            "label_histogram": {"patients": self.patient_histogram(),
                                "records": self.record_histogram()},
            "unusable": [[e.record_id, e.reason] for e in self.records if not e.usable],
            "failures": [list(f) for f in self.failures],
        }

    def record_path(self, record_id: str) -> Path:
        return self.root / record_id


def _usability(label: DiagnosisLabel, nsamp: int, fs: int) -> str | None:
    if not label.trainable:
        return f"label {label.name}"
    if nsamp < WINDOW_SECONDS * fs:
        return f"shorter than {WINDOW_SECONDS} s ({nsamp} samples)"
    return None


def _record_paths(root: Path) -> list[str]:
    manifest = root / "RECORDS"
    if manifest.is_file():
        names = [ln.strip().rstrip("/") for ln in manifest.read_text().splitlines()]
        return sorted(n for n in names if n and not n.startswith("#"))
    return sorted(f"{p.parent.name}/{p.stem}" for p in root.glob("*/*.hea"))


def build_index(root: str | Path) -> DatasetIndex:
    """Catalog ``root/<patient>/<record>.hea``; only headers are read."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    entries, failures = [], []
    for rel in _record_paths(root):
        patient, _, rec = rel.rpartition("/")
        try:
            header = read_header(root / rel)
        except (OSError, MalformedHeader, UnsupportedFormat) as exc:
            failures.append((rel, f"{type(exc).__name__}: {exc}"))
            continue
        label = extract_diagnosis(header)
        reason = _usability(label, header.num_samples, header.sampling_rate)
        entries.append(IndexEntry(patient or root.name, rec, label, header.num_samples,
                                  header.sampling_rate, tuple(header.lead_names),
                                  reason is None, reason))
    if not entries:
        raise EmptyDataset(f"no parseable records under {root}")
    entries.sort(key=lambda e: (e.patient_id, e.record_name))
    for rel, why in failures:
        log.warning("skipped %s: %s", rel, why)
    return DatasetIndex(root, entries, failures)
