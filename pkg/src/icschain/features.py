"""Feature vectors, fused multi-source windows and synthetic datasets."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .crypto import derive_seed
from .records import NETWORK, RawRecord, parse_records, write_records
from .topology import build_topology
from .traffic import (
    FLOODING,
    LABEL_THRESHOLD,
    MITM,
    SPOOFING,
    Attack,
    AttackSchedule,
    generate_traffic,
)

N_FEATURES = 12
FEATURE_NAMES = (
    "src_port",
    "dst_port",
    "protocol",
    "packet_length",
    "ttl",
    "flags",
    "window_size",
    "seq_delta",
    "ack_delta",
    "payload_length",
    "direction",
    "inter_arrival_time",
)

DEFAULT_WINDOW_LEN = 50
DEFAULT_STRIDE = 25
DEFAULT_MAX_STEPS = 64
CLAMP = (-0.5, 1.5)
NORMAL = 0


def category_name(label: int, sources: Sequence[str]) -> str:
    return "normal" if label == NORMAL else f"anomalous@{sources[label - 1]}"


# -- per-record features ---------------------------------------------------------

def extract_features(rec: RawRecord, prev: RawRecord | None = None) -> np.ndarray:
    """12-vector for one record; deltas and inter-arrival need the previous
    record of the same source (zero without one)."""
    out = np.zeros(N_FEATURES)
    if rec.kind == NETWORK:
        h = rec.header
        out[:7] = h[:7]
        if prev is not None:
            out[7] = (h[7] - prev.header[7]) % 2**32
            out[8] = (h[8] - prev.header[8]) % 2**32
            out[11] = rec.tick - prev.tick
        out[9] = h[9]
        out[10] = h[10]
    else:
        vals = rec.values[:N_FEATURES]
        out[:len(vals)] = vals
    return out


def extract_stream(records: Sequence[RawRecord]) -> np.ndarray:
    """Feature matrix (n x 12) for one source's ordered records."""
    n = len(records)
    out = np.zeros((n, N_FEATURES))
    if n == 0:
        return out
    if records[0].kind == NETWORK:
        h = np.array([r.header for r in records], dtype=np.int64)
        ticks = np.array([r.tick for r in records], dtype=np.int64)
        out[:, :7] = h[:, :7]
        out[1:, 7] = (h[1:, 7] - h[:-1, 7]) % 2**32
        out[1:, 8] = (h[1:, 8] - h[:-1, 8]) % 2**32
        out[:, 9] = h[:, 9]
        out[:, 10] = h[:, 10]
        out[1:, 11] = ticks[1:] - ticks[:-1]
    else:
        for i, r in enumerate(records):
            vals = r.values[:N_FEATURES]
            out[i, :len(vals)] = vals
    return out


# -- normalisation ---------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationParams:
    lo: np.ndarray
    hi: np.ndarray

    def to_line(self) -> str:
        return " ".join(f"{a!r}:{b!r}" for a, b in zip(self.lo.tolist(), self.hi.tolist()))

    @classmethod
    def from_line(cls, line: str) -> "NormalizationParams":
        pairs = [p.split(":") for p in line.split()]
        return cls(np.array([float(a) for a, _ in pairs]), np.array([float(b) for _, b in pairs]))


def fit_normalizer(train: Sequence[np.ndarray] | np.ndarray) -> NormalizationParams:
    x = np.asarray(train, dtype=float).reshape(-1, N_FEATURES)
    if len(x) == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    return NormalizationParams(x.min(axis=0), x.max(axis=0))


def apply_normalizer(params: NormalizationParams, v: np.ndarray) -> np.ndarray:
    """Min-max scale; constant features map to 0; result clamped to [-0.5, 1.5]."""
    v = np.asarray(v, dtype=float)
    span = params.hi - params.lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (v - params.lo) / safe, 0.0)
    return np.clip(out, *CLAMP)


# -- windows ---------------------------------------------------------------------

@dataclass
class SequenceWindow:
    start: int
    end: int
    per_source: list[np.ndarray]
    label: int = NORMAL
    ticks: list[np.ndarray] = field(default_factory=list)

    @property
    def n_sources(self) -> int:
        return len(self.per_source)

    @property
    def length(self) -> int:
        return max(1, max((len(a) for a in self.per_source), default=0))

    def fused(self, normalizers: Sequence[NormalizationParams] | None = None) -> np.ndarray:
        """Time-major (T x 12S) matrix; short sources zero-padded at the tail."""
        out = np.zeros((self.length, N_FEATURES * self.n_sources))
        for s, rows in enumerate(self.per_source):
            if len(rows) == 0:
                continue
            if normalizers is not None:
                rows = apply_normalizer(normalizers[s], rows)
            out[:len(rows), s * N_FEATURES:(s + 1) * N_FEATURES] = rows
        return out


def attacked_mask(ticks: np.ndarray, source: str, attacks: Sequence[Attack]) -> np.ndarray:
    """Boolean mask of records of ``source`` that fall inside one of its attacks."""
    mask = np.zeros(len(ticks), dtype=bool)
    for a in attacks:
        if a.source == source:
            lo, hi = np.searchsorted(ticks, [a.start, a.end])
            mask[lo:hi] = True
    return mask


def choose_label(fractions: Sequence[float]) -> int:
    """anomalous@s for the source with the largest attacked share >= 50%."""
    best, label = -1.0, NORMAL
    for s, f in enumerate(fractions):
        if f >= LABEL_THRESHOLD and f > best:
            best, label = f, s + 1
    return label


def build_windows(
    records: Mapping[str, Sequence[RawRecord]],
    window_len: int = DEFAULT_WINDOW_LEN,
    stride: int = DEFAULT_STRIDE,
    labels: Sequence[Attack] = (),
    duration: int | None = None,
    max_steps: int | None = DEFAULT_MAX_STEPS,
    start: int = 0,
) -> list[SequenceWindow]:
    """Slice per-source streams into aligned tick windows.

    ``records`` maps source name to its ordered records, in source order.
    ``labels`` is the ground-truth attack list; a window is anomalous@s when
    at least half of source s's records in it fall inside an attack on s.
    Sources with more than ``max_steps`` records in a window keep the latest.
    """
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    sources = list(records)
    if not any(records[s] for s in sources):
        return []
    if duration is None:
        duration = max(r[-1].tick for r in records.values() if r) + 1
    feats = {s: extract_stream(records[s]) for s in sources}
    ticks = {s: np.array([r.tick for r in records[s]], dtype=np.int64) for s in sources}
    hits = {s: attacked_mask(ticks[s], s, labels) for s in sources}
    out = []
    for w in range(start, duration - window_len + 1, stride):
        rows, wticks, fracs = [], [], []
        for s in sources:
            lo, hi = np.searchsorted(ticks[s], [w, w + window_len])
            fracs.append(float(hits[s][lo:hi].mean()) if hi > lo else 0.0)
            if max_steps is not None and hi - lo > max_steps:
                lo = hi - max_steps
            rows.append(feats[s][lo:hi])
            wticks.append(ticks[s][lo:hi])
        out.append(SequenceWindow(w, w + window_len, rows, choose_label(fracs), wticks))
    return out


# -- datasets --------------------------------------------------------------------

PROFILES = ("swat-like", "factory-like", "two-site")
_SWAT_ATTACKS = [(SPOOFING, "A", "A-tap"), (MITM, "A", "A-sensors"), (MITM, "A", "A-actuators")]
_FACTORY_ATTACKS = [(FLOODING, "B", f"B-{stage}-tap") for stage in ("conveyor", "tank", "vessel")]
PROFILE_ATTACKS = {
    "swat-like": _SWAT_ATTACKS,
    "factory-like": _FACTORY_ATTACKS,
    "two-site": _SWAT_ATTACKS + _FACTORY_ATTACKS,
}


@dataclass
class Dataset:
    profile: str
    seed: int
    sources: list[str]
    train: list[SequenceWindow]
    test: list[SequenceWindow]
    normalizers: list[NormalizationParams]
    window_len: int = DEFAULT_WINDOW_LEN
    stride: int = DEFAULT_WINDOW_LEN
    max_steps: int = DEFAULT_MAX_STEPS
    attacks: list[Attack] = field(default_factory=list)
    records: dict[str, list[RawRecord]] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.sources) + 1

    def arrays(self, split: str) -> tuple[list[np.ndarray], np.ndarray]:
        windows = self.train if split == "train" else self.test
        return ([w.fused(self.normalizers) for w in windows],
                np.array([w.label for w in windows], dtype=np.int64))


def synthetic_attacks(profile: str, seed: int, n_windows: int, window_len: int) -> list[Attack]:
    """Window-aligned attack schedule: gaps of 4-12 windows, bursts of 2-5."""
    rng = np.random.default_rng(int.from_bytes(derive_seed(seed, "schedule", profile)[:8], "big"))
    menu = PROFILE_ATTACKS[profile]
    sched = AttackSchedule(n_windows * window_len)
    w = int(rng.integers(4, 13))
    while w < n_windows:
        span = int(rng.integers(2, 6))
        kind, site, source = menu[int(rng.integers(0, len(menu)))]
        end = min(w + span, n_windows)
        sched.inject(Attack(kind, site, source, w * window_len, end * window_len))
        w = end + int(rng.integers(4, 13))
    return list(sched)


def generate_synthetic(
    profile: str,
    seed: int,
    n_train: int = 2000,
    n_test: int = 1000,
    window_len: int = DEFAULT_WINDOW_LEN,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> Dataset:
    """Simulated site traffic, windowed and split by time (train first).

    Windows do not overlap and attacks are aligned to window boundaries, so
    every window is either clean or fully inside one attack.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    if n_train < 1 or n_test < 1:
        raise ValueError("split sizes must be >= 1")
    n = n_train + n_test
    duration = n * window_len
    topo = build_topology(profile, seed)
    attacks = synthetic_attacks(profile, seed, n, window_len)
    records = {d.name: generate_traffic(d, duration, attacks, seed) for d in topo.sources()}
    windows = build_windows(records, window_len, window_len, attacks, duration, max_steps)
    train, test = windows[:n_train], windows[n_train:]
    sources = list(records)
    normalizers = [fit_normalizer(np.concatenate([w.per_source[s] for w in train]))
                   for s in range(len(sources))]
    return Dataset(profile, seed, sources, train, test, normalizers, window_len, window_len,
                   max_steps, attacks, records)


# -- bundle on disk --------------------------------------------------------------

WINDOWS_MAGIC = b"ICSWIN01"


def _encode_windows(ds: Dataset) -> bytes:
    out = [WINDOWS_MAGIC, struct.pack(">I", len(ds.sources))]
    for s in ds.sources:
        b = s.encode()
        out.append(struct.pack(">I", len(b)) + b)
    allw = [(0, w) for w in ds.train] + [(1, w) for w in ds.test]
    out.append(struct.pack(">I", len(allw)))
    for split, w in allw:
        out.append(struct.pack(">QQIB", w.start, w.end, w.label, split))
        for rows, ticks in zip(w.per_source, w.ticks):
            out.append(struct.pack(">I", len(rows)))
            out.append(np.asarray(ticks, dtype=">i8").tobytes())
            out.append(np.asarray(rows, dtype=">f8").tobytes())
    return b"".join(out)


def _decode_windows(data: bytes) -> tuple[list[str], list[SequenceWindow], list[SequenceWindow]]:
    if not data.startswith(WINDOWS_MAGIC):
        raise ValueError("not a windows.bin file")
    pos = len(WINDOWS_MAGIC)

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n_src,) = take(">I")
    sources = []
    for _ in range(n_src):
        (ln,) = take(">I")
        sources.append(data[pos:pos + ln].decode())
        pos += ln
    (n_win,) = take(">I")
    train, test = [], []
    for _ in range(n_win):
        start, end, label, split = take(">QQIB")
        rows, ticks = [], []
        for _ in range(n_src):
            (n,) = take(">I")
            ticks.append(np.frombuffer(data, ">i8", n, pos).astype(np.int64))
            pos += 8 * n
            rows.append(np.frombuffer(data, ">f8", n * N_FEATURES, pos).astype(float).reshape(n, N_FEATURES))
            pos += 8 * n * N_FEATURES
        (train if split == 0 else test).append(SequenceWindow(start, end, rows, label, ticks))
    return sources, train, test


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    (d / "records").mkdir(parents=True, exist_ok=True)
    for s, recs in ds.records.items():
        write_records(d / "records" / f"{s}.csv", recs)
    (d / "windows.bin").write_bytes(_encode_windows(ds))
    lines = ["split,window_start,window_end,label,category"]
    for split, ws in (("train", ds.train), ("test", ds.test)):
        lines += [f"{split},{w.start},{w.end},{w.label},{category_name(w.label, ds.sources)}" for w in ws]
    (d / "labels.csv").write_text("\n".join(lines) + "\n")
    (d / "normalizer.txt").write_text(normalizer_text(ds.sources, ds.normalizers))
    meta = [
        f"profile={ds.profile}",
        f"seed={ds.seed}",
        f"window_len={ds.window_len}",
        f"stride={ds.stride}",
        f"max_steps={ds.max_steps}",
    ] + [a.line() for a in ds.attacks]
    (d / "dataset.txt").write_text("\n".join(meta) + "\n")
    return d


def normalizer_text(sources: Sequence[str], normalizers: Sequence[NormalizationParams]) -> str:
    return "".join(f"{s} {p.to_line()}\n" for s, p in zip(sources, normalizers))


def read_normalizer(path: str | Path) -> tuple[list[str], list[NormalizationParams]]:
    sources, params = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, rest = line.split(" ", 1)
        sources.append(name)
        params.append(NormalizationParams.from_line(rest))
    return sources, params


def load_dataset(directory: str | Path, with_records: bool = False) -> Dataset:
    d = Path(directory)
    sources, train, test = _decode_windows((d / "windows.bin").read_bytes())
    nsrc, normalizers = read_normalizer(d / "normalizer.txt")
    if nsrc != sources:
        raise ValueError("normalizer sources do not match windows.bin")
    meta: dict[str, str] = {}
    attacks = []
    for line in (d / "dataset.txt").read_text().splitlines():
        k, v = line.split("=", 1)
        if k == "attack":
            kind, site, source, start, end = v.split(",")
            attacks.append(Attack(kind, site, source, int(start), int(end)))
        else:
            meta[k] = v
    records = {}
    if with_records:
        records = {s: parse_records(d / "records" / f"{s}.csv").records for s in sources}
    return Dataset(meta["profile"], int(meta["seed"]), sources, train, test, normalizers,
                   int(meta["window_len"]), int(meta["stride"]), int(meta["max_steps"]),
                   attacks, records)
