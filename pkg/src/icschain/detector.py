"""Site and organisation anomaly detection over the ledger, plus evaluation metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .crypto import AuthenticationError, CryptoError, Entropy, KeyPair, envelope_decrypt
from .features import (
    DEFAULT_MAX_STEPS,
    DEFAULT_WINDOW_LEN,
    FEATURE_NAMES,
    NORMAL,
    Dataset,
    NormalizationParams,
    SequenceWindow,
    build_windows,
    category_name,
    normalizer_text,
    read_normalizer,
)
from .ledger import Chain, Transaction, TxKind, build_device_tx
from .msdnn import BlstmModel, forward, load_model, save_model
from .records import RawRecord
from .simulation import parse_kv_lines

log = logging.getLogger(__name__)


# -- trained model plus the context it was trained in ---------------------------

@dataclass
class ModelBundle:
    model: BlstmModel
    sources: list[str]
    normalizers: list[NormalizationParams]
    window_len: int = DEFAULT_WINDOW_LEN
    stride: int = DEFAULT_WINDOW_LEN
    max_steps: int = DEFAULT_MAX_STEPS
    profile: str = ""

    def __post_init__(self):
        if len(self.sources) != len(self.normalizers):
            raise ValueError("one normalizer per source required")
        if self.model.C != len(self.sources) + 1:
            raise ValueError(f"model has {self.model.C} outputs for {len(self.sources)} sources")

    @classmethod
    def from_dataset(cls, model: BlstmModel, ds: Dataset) -> "ModelBundle":
        return cls(model, list(ds.sources), list(ds.normalizers), ds.window_len, ds.stride,
                   ds.max_steps, ds.profile)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_model(self.model, d / "model.bin")
        (d / "normalizer.txt").write_text(normalizer_text(self.sources, self.normalizers))
        (d / "bundle.txt").write_text(
            f"profile={self.profile}\nwindow_len={self.window_len}\n"
            f"stride={self.stride}\nmax_steps={self.max_steps}\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "ModelBundle":
        d = Path(directory)
        sources, normalizers = read_normalizer(d / "normalizer.txt")
        meta = dict(parse_kv_lines((d / "bundle.txt").read_text()))
        return cls(load_model(d / "model.bin"), sources, normalizers, int(meta["window_len"]),
                   int(meta["stride"]), int(meta["max_steps"]), meta.get("profile", ""))

    def probabilities(self, windows: Sequence[SequenceWindow]) -> np.ndarray:
        """One forward pass per window, so a window's scores do not depend on
        which other windows it was classified alongside."""
        if not windows:
            return np.zeros((0, self.model.C))
        return np.stack([forward(self.model, w.fused(self.normalizers)).probabilities
                         for w in windows])


# -- reports ---------------------------------------------------------------------

@dataclass(frozen=True)
class AnomalyReport:
    suspect_pk: bytes
    category: str
    window: tuple[int, int]
    score: float
    pattern: dict[str, tuple[float, float]]

    def to_json(self) -> str:
        """Canonical form: sorted keys, no whitespace, shortest round-trip floats."""
        obj = {
            "suspect_pk": self.suspect_pk.hex(),
            "category": self.category,
            "window": list(self.window),
            "score": self.score,
            "pattern": {k: list(v) for k, v in self.pattern.items()},
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_json(cls, text: str | bytes) -> "AnomalyReport":
        obj = json.loads(text)
        return cls(bytes.fromhex(obj["suspect_pk"]), obj["category"], tuple(obj["window"]),
                   obj["score"], {k: tuple(v) for k, v in obj["pattern"].items()})


def pattern_summary(rows: np.ndarray) -> dict[str, tuple[float, float]]:
    """Per-feature mean and standard deviation of one source's raw features."""
    if len(rows) == 0:
        return {n: (0.0, 0.0) for n in FEATURE_NAMES}
    mu, sd = rows.mean(axis=0), rows.std(axis=0)
    return {n: (float(m), float(s)) for n, m, s in zip(FEATURE_NAMES, mu, sd)}


def decrypt_log(tx: Transaction, key_ring: Sequence[bytes]) -> bytes:
    """Try each held secret, newest first; AuthenticationError if none opens it."""
    for sk in reversed(key_ring):
        try:
            return envelope_decrypt(sk, tx.log)
        except AuthenticationError:
            continue
    raise AuthenticationError(f"no key in the ring opens {tx.t_id.hex()[:12]}")


# -- detectors -------------------------------------------------------------------

@dataclass
class SiteDetector:
    """Reads one site's Log Store transactions and raises Anomaly Alerts.

    State is incremental: blocks are scanned once, and each window is
    classified once, as soon as it lies entirely before ``up_to``.
    """

    site_id: str
    bundle: ModelBundle
    source_pks: list[bytes]
    key_ring: list[bytes]
    manager: Optional[KeyPair] = None
    next_window: int = 0
    last_t_id: Optional[bytes] = None
    skipped: int = 0
    records: dict[str, list[RawRecord]] = field(default_factory=dict)
    _scanned: int = field(default=-1, repr=False)

    def __post_init__(self):
        if len(self.source_pks) != len(self.bundle.sources):
            raise ValueError("one public key per model source required")
        self._name_of = dict(zip(self.source_pks, self.bundle.sources))
        for s in self.bundle.sources:
            self.records.setdefault(s, [])

    def add_key(self, sk_data: bytes) -> None:
        if sk_data not in self.key_ring:
            self.key_ring.append(sk_data)

    def _scan(self, chain: Chain) -> None:
        for block in chain.blocks[self._scanned + 1:]:
            for tx in block.transactions:
                if tx.kind is not TxKind.LOG_STORE:
                    continue
                name = self._name_of.get(tx.pk)
                if name is None:
                    continue
                try:
                    rec = RawRecord.from_payload(decrypt_log(tx, self.key_ring))
                except (CryptoError, ValueError) as e:
                    log.warning("skipping %s: %s", tx.t_id.hex()[:12], e)
                    self.skipped += 1
                    continue
                if rec.source_id != name:
                    log.warning("record claims source %r but was signed by %r", rec.source_id, name)
                    self.skipped += 1
                    continue
                self.records[name].append(rec)
        self._scanned = chain.height

    def windows(self, chain: Chain, up_to: int) -> list[SequenceWindow]:
        """New complete windows ending at or before ``up_to``."""
        self._scan(chain)
        b = self.bundle
        ws = build_windows(self.records, b.window_len, b.stride, (), up_to, b.max_steps,
                           start=self.next_window)
        if ws:
            self.next_window = ws[-1].start + b.stride
        return ws

    def classify(self, windows: Sequence[SequenceWindow]) -> list[AnomalyReport]:
        if not windows:
            return []
        probs = self.bundle.probabilities(windows)
        out = []
        for w, p in zip(windows, probs):
            decided = int(np.argmax(p))
            if decided == NORMAL:
                continue
            s = decided - 1
            out.append(AnomalyReport(
                self.source_pks[s], category_name(decided, self.bundle.sources),
                (w.start, w.end), float(p[decided]), pattern_summary(w.per_source[s]),
            ))
        return out

    def alert_for(self, chain: Chain, report: AnomalyReport, entropy: Optional[Entropy] = None,
                  timestamp: int = 0) -> Transaction:
        if self.manager is None:
            raise PermissionError("this detector holds no signing key")
        prev = self.last_t_id or chain.latest_t_id(self.manager.public)
        if prev is None:
            raise PermissionError("site manager has no Genesis transaction on the chain")
        tx = build_device_tx(TxKind.ANOMALY_ALERT, self.manager, prev, report.to_json().encode(),
                             chain.current_pk_data, m_pk=report.suspect_pk, timestamp=timestamp,
                             entropy=entropy)
        self.last_t_id = tx.t_id
        return tx

    def detect(self, chain: Chain, up_to: int, entropy: Optional[Entropy] = None,
               timestamp: int = 0) -> tuple[list[AnomalyReport], list[Transaction]]:
        reports = self.classify(self.windows(chain, up_to))
        alerts = []
        if self.manager is not None:
            alerts = [self.alert_for(chain, r, entropy, timestamp) for r in reports]
        return reports, alerts


def site_detect(det: SiteDetector, chain: Chain, up_to: int, entropy: Optional[Entropy] = None,
                timestamp: int = 0) -> tuple[list[AnomalyReport], list[Transaction]]:
    return det.detect(chain, up_to, entropy, timestamp)


def org_detect(chain: Chain, bundle: ModelBundle, source_pks: Sequence[bytes],
               key_ring: Sequence[bytes], up_to: Optional[int] = None) -> list[AnomalyReport]:
    """Run ``bundle`` over every listed source on the chain; reports only.

    Without ``up_to`` every complete window up to the last committed record
    is classified.
    """
    det = SiteDetector("org", bundle, list(source_pks), list(key_ring))
    det._scan(chain)
    if up_to is None:
        last = [r[-1].tick for r in det.records.values() if r]
        if not last:
            return []
        up_to = max(last) + 1
    return det.detect(chain, up_to)[0]


def read_alert(tx: Transaction, key_ring: Sequence[bytes]) -> AnomalyReport:
    if tx.kind is not TxKind.ANOMALY_ALERT:
        raise ValueError(f"{tx.kind.name} is not an anomaly alert")
    return AnomalyReport.from_json(decrypt_log(tx, key_ring))


# -- metrics ---------------------------------------------------------------------

def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s == 0 else 2 * precision * recall / s


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    attribution: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def compute_metrics(predictions: Iterable[tuple[int, int]]) -> MetricsReport:
    """Binary metrics with "any anomalous@s" as the positive class.

    ``attribution`` is the share of truly anomalous windows whose decided
    source is the true one (0 when there are none).
    """
    pairs = list(predictions)
    if not pairs:
        raise ValueError("no predictions to score")
    tp = fp = fn = tn = hit = 0
    for decided, truth in pairs:
        if truth != NORMAL:
            hit += decided == truth
            if decided != NORMAL:
                tp += 1
            else:
                fn += 1
        elif decided != NORMAL:
            fp += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    positives = tp + fn
    return MetricsReport(tp, fp, fn, tn, precision, recall, f1_score(precision, recall),
                         (tp + tn) / len(pairs), hit / positives if positives else 0.0)


METRICS_HEADER = "dataset,method,precision,recall,f1,accuracy"


def metrics_csv(rows: Iterable[tuple[str, str, MetricsReport]]) -> str:
    lines = [METRICS_HEADER]
    lines += [f"{d},{m},{r.precision:.4f},{r.recall:.4f},{r.f1:.4f},{r.accuracy:.4f}"
              for d, m, r in rows]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def default_thresholds(scores: Iterable[float]) -> list[float]:
    """0, every distinct score, and a value above 1: enough for an exact curve."""
    return [0.0] + sorted(set(float(s) for s in scores) - {0.0}) + [math.nextafter(1.0, 2.0)]


def roc_points(scored: Sequence[tuple[float, bool]],
               thresholds: Optional[Sequence[float]] = None) -> list[RocPoint]:
    """``scored`` pairs an anomaly score (1 - P(normal)) with the truth.

    A window counts as positive at threshold t iff its score >= t.
    Points come back in ascending threshold order.
    """
    s = np.array([x for x, _ in scored], dtype=float)
    y = np.array([bool(t) for _, t in scored])
    if thresholds is None:
        thresholds = default_thresholds(s)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    order = np.sort(s[y]), np.sort(s[~y])
    out = []
    for t in sorted(thresholds):
        tp = len(order[0]) - int(np.searchsorted(order[0], t, side="left"))
        fp = len(order[1]) - int(np.searchsorted(order[1], t, side="left"))
        out.append(RocPoint(float(t), tp / n_pos if n_pos else 0.0, fp / n_neg if n_neg else 0.0))
    return out


def auc(points: Sequence[RocPoint]) -> float:
    """Trapezoidal area under (fpr, tpr), anchored at (0, 0) and (1, 1)."""
    xy = sorted({(p.fpr, p.tpr) for p in points} | {(0.0, 0.0), (1.0, 1.0)})
    x = np.array([a for a, _ in xy])
    yv = np.array([b for _, b in xy])
    return float(np.sum((x[1:] - x[:-1]) * (yv[1:] + yv[:-1]) / 2))


def roc_csv(points: Iterable[RocPoint]) -> str:
    lines = ["threshold,tpr,fpr"] + [f"{p.threshold!r},{p.tpr!r},{p.fpr!r}" for p in points]
    return "\n".join(lines) + "\n"


@dataclass
class Evaluation:
    decided: np.ndarray
    truth: np.ndarray
    probabilities: np.ndarray

    @property
    def metrics(self) -> MetricsReport:
        return compute_metrics(zip(self.decided.tolist(), self.truth.tolist()))

    @property
    def scored(self) -> list[tuple[float, bool]]:
        return [(1.0 - float(p[NORMAL]), bool(t != NORMAL))
                for p, t in zip(self.probabilities, self.truth)]


def evaluate(bundle: ModelBundle, windows: Sequence[SequenceWindow]) -> Evaluation:
    probs = bundle.probabilities(windows)
    truth = np.array([w.label for w in windows], dtype=np.int64)
    return Evaluation(np.argmax(probs, axis=1), truth, probs)
