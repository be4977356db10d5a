"""Multi-source sequence classifier: BLSTM -> dense -> softmax, in numpy.

Gate order in every 4H block is (input, forget, cell candidate, output).
Variable-length sequences in a batch are tail-padded; a step mask freezes
the recurrent state on padded steps, so the forward summary is the state at
the last valid step and the backward direction starts there.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HIDDEN = 100
PROB_FLOOR = 1e-12
BLOCKS = ("fwd_W", "fwd_U", "fwd_b", "bwd_W", "bwd_U", "bwd_b", "dense_W", "dense_b")
CHECKPOINT_MAGIC = b"ICSMSDNN"
CHECKPOINT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmParams:
    W: np.ndarray  # 4H x D
    U: np.ndarray  # 4H x H
    b: np.ndarray  # 4H

    @property
    def hidden(self) -> int:
        return self.U.shape[1]


@dataclass
class BlstmModel:
    fwd: LstmParams
    bwd: LstmParams
    dense_W: np.ndarray  # C x 2H
    dense_b: np.ndarray  # C

    @property
    def H(self) -> int:
        return self.fwd.hidden

    @property
    def D(self) -> int:
        return self.fwd.W.shape[1]

    @property
    def C(self) -> int:
        return self.dense_b.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "fwd_W": self.fwd.W, "fwd_U": self.fwd.U, "fwd_b": self.fwd.b,
            "bwd_W": self.bwd.W, "bwd_U": self.bwd.U, "bwd_b": self.bwd.b,
            "dense_W": self.dense_W, "dense_b": self.dense_b,
        }

    def copy(self) -> "BlstmModel":
        return BlstmModel(
            LstmParams(self.fwd.W.copy(), self.fwd.U.copy(), self.fwd.b.copy()),
            LstmParams(self.bwd.W.copy(), self.bwd.U.copy(), self.bwd.b.copy()),
            self.dense_W.copy(), self.dense_b.copy(),
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blocks().values())


def init_model(D: int, C: int, H: int = HIDDEN, seed: int = 0) -> BlstmModel:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1."""
    if C < 2:
        raise ValueError("need at least two output categories")
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(H)

    def lstm() -> LstmParams:
        b = rng.uniform(-k, k, 4 * H)
        b[H:2 * H] = 1.0
        return LstmParams(rng.uniform(-k, k, (4 * H, D)), rng.uniform(-k, k, (4 * H, H)), b)

    fwd, bwd = lstm(), lstm()
    return BlstmModel(fwd, bwd, rng.uniform(-k, k, (C, 2 * H)), rng.uniform(-k, k, C))


def zero_model(D: int, C: int, H: int = HIDDEN) -> BlstmModel:
    z = lambda *s: np.zeros(s)  # noqa: E731
    return BlstmModel(LstmParams(z(4 * H, D), z(4 * H, H), z(4 * H)),
                      LstmParams(z(4 * H, D), z(4 * H, H), z(4 * H)), z(C, 2 * H), z(C))


# -- recurrence ------------------------------------------------------------------

def lstm_cell_step(p: LstmParams, x: np.ndarray, h_prev: np.ndarray,
                   c_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step on a single D-vector."""
    H = p.hidden
    if x.shape != (p.W.shape[1],) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ValueError(f"shape mismatch: x{x.shape} h{h_prev.shape} c{c_prev.shape} for H={H}")
    z = p.W @ x + p.U @ h_prev + p.b
    i, f, o = sigmoid(z[:H]), sigmoid(z[H:2 * H]), sigmoid(z[3 * H:])
    g = np.tanh(z[2 * H:3 * H])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _run_direction(p: LstmParams, X: np.ndarray, M: np.ndarray, reverse: bool):
    """Masked batched pass. X: B x T x D, M: B x T. Returns final h, per-step h, cache."""
    B, T, _ = X.shape
    H = p.hidden
    xz = X @ p.W.T + p.b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.zeros((B, T, H))
    cache = []
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = xz[:, t] + h @ p.U.T
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = M[:, t:t + 1]
        cache.append((t, h, c, i, f, g, o, tc, m))
        c = m * c_new + (1 - m) * c
        h = m * h_new + (1 - m) * h
        hs[:, t] = h
    return h, hs, cache


def _backprop_direction(p: LstmParams, X: np.ndarray, cache, dh_final: np.ndarray):
    B, T, D = X.shape
    H = p.hidden
    dh = dh_final
    dc = np.zeros_like(dh)
    dZ = np.zeros((B, T, 4 * H))
    dU = np.zeros_like(p.U)
    for t, h_prev, c_prev, i, f, g, o, tc, m in reversed(cache):
        dh_new = m * dh
        dc_new = m * dc + dh_new * o * (1 - tc * tc)
        dz = np.concatenate([
            dc_new * g * i * (1 - i),
            dc_new * c_prev * f * (1 - f),
            dc_new * i * (1 - g * g),
            dh_new * tc * o * (1 - o),
        ], axis=1)
        dZ[:, t] = dz
        dU += dz.T @ h_prev
        dh = (1 - m) * dh + dz @ p.U
        dc = (1 - m) * dc + dc_new * f
    flat = dZ.reshape(-1, 4 * H)
    return flat.T @ X.reshape(-1, D), dU, flat.sum(axis=0)


def pad_batch(seqs: Sequence[np.ndarray], D: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise ValueError("empty batch")
    D = D if D is not None else seqs[0].shape[1]
    T = max(len(s) for s in seqs)
    X = np.zeros((len(seqs), T, D))
    M = np.zeros((len(seqs), T))
    for k, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != D:
            raise ValueError(f"sequence {k} has shape {s.shape}, model expects (T, {D})")
        if len(s) == 0:
            raise ValueError(f"sequence {k} is empty")
        X[k, :len(s)] = s
        M[k, :len(s)] = 1.0
    return X, M


def blstm_forward(model: BlstmModel, sequence: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step outputs (T x 2H) and the summary [forward final h, backward final h]."""
    sequence = np.asarray(sequence, dtype=float)
    if sequence.ndim != 2 or len(sequence) == 0:
        raise ValueError("sequence must be a non-empty T x D array")
    X, M = pad_batch([sequence], model.D)
    hf, hsf, _ = _run_direction(model.fwd, X, M, reverse=False)
    hb, hsb, _ = _run_direction(model.bwd, X, M, reverse=True)
    return np.concatenate([hsf[0], hsb[0]], axis=1), np.concatenate([hf[0], hb[0]])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    decision: int


def _logits(model: BlstmModel, X: np.ndarray, M: np.ndarray):
    hf, _, cf = _run_direction(model.fwd, X, M, reverse=False)
    hb, _, cb = _run_direction(model.bwd, X, M, reverse=True)
    S = np.concatenate([hf, hb], axis=1)
    return S @ model.dense_W.T + model.dense_b, S, cf, cb


def forward_batch(model: BlstmModel, seqs: Sequence[np.ndarray]) -> np.ndarray:
    """Class probabilities, one row per sequence."""
    X, M = pad_batch(list(seqs), model.D)
    return softmax(_logits(model, X, M)[0])


def forward(model: BlstmModel, sequence: np.ndarray) -> Prediction:
    p = forward_batch(model, [np.asarray(sequence, dtype=float)])[0]
    return Prediction(p, int(np.argmax(p)))


def predict(model: BlstmModel, sequence: np.ndarray) -> int:
    """Argmax category; ties go to the lowest index."""
    return forward(model, sequence).decision


def predict_batch(model: BlstmModel, seqs: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    out = []
    for k in range(0, len(seqs), batch_size):
        out.append(forward_batch(model, seqs[k:k + batch_size]))
    return np.concatenate(out) if out else np.zeros((0, model.C))


def cross_entropy(pred: Prediction | np.ndarray, label: int) -> float:
    probs = pred.probabilities if isinstance(pred, Prediction) else np.asarray(pred)
    if not 0 <= label < len(probs):
        raise ValueError(f"label {label} outside [0, {len(probs)})")
    return float(-math.log(max(float(probs[label]), PROB_FLOOR)))


# -- gradients -------------------------------------------------------------------

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class BatchResult:
    loss: float
    accuracy: float
    grads: dict[str, np.ndarray]
    probabilities: np.ndarray


def backward(model: BlstmModel, batch: Sequence[tuple[np.ndarray, int]],
             clip_norm: float | None = None) -> BatchResult:
    """Mean cross-entropy over ``batch`` and its exact gradients (BPTT).

    Global-norm clipping is applied afterwards when ``clip_norm`` is given.
    """
    if not batch:
        raise ValueError("empty batch")
    seqs = [np.asarray(s, dtype=float) for s, _ in batch]
    y = np.array([lbl for _, lbl in batch], dtype=np.int64)
    B = len(batch)
    X, M = pad_batch(seqs, model.D)
    logits, S, cf, cb = _logits(model, X, M)
    P = softmax(logits)
    py = P[np.arange(B), y]
    loss = float(np.mean(-np.log(np.maximum(py, PROB_FLOOR))))
    dlogits = P.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits[py < PROB_FLOOR] = 0.0  # floor engaged: loss is locally constant
    dlogits /= B
    H = model.H
    grads = {"dense_W": dlogits.T @ S, "dense_b": dlogits.sum(axis=0)}
    dS = dlogits @ model.dense_W
    grads["fwd_W"], grads["fwd_U"], grads["fwd_b"] = _backprop_direction(model.fwd, X, cf, dS[:, :H])
    grads["bwd_W"], grads["bwd_U"], grads["bwd_b"] = _backprop_direction(model.bwd, X, cb, dS[:, H:])
    if clip_norm is not None:
        grads = clip_gradients(grads, clip_norm)
    acc = float(np.mean(np.argmax(P, axis=1) == y))
    return BatchResult(loss, acc, grads, P)


def batch_loss(model: BlstmModel, batch: Sequence[tuple[np.ndarray, int]]) -> float:
    P = forward_batch(model, [s for s, _ in batch])
    y = np.array([lbl for _, lbl in batch])
    return float(np.mean(-np.log(np.maximum(P[np.arange(len(y)), y], PROB_FLOOR))))


@dataclass
class GradCheckReport:
    max_rel_error: float
    block_errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    @property
    def worst_block(self) -> str:
        return max(self.block_errors, key=self.block_errors.get)

    def __str__(self) -> str:
        verdict = "pass" if self.passed else f"FAIL (worst block: {self.worst_block})"
        return f"gradient check {verdict}: max relative error {self.max_rel_error:.3e} <= {self.tolerance:g}?"


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


def gradient_check(dims: tuple[int, int, int, int] = (3, 4, 5, 3), tolerance: float = 1e-4,
                   seed: int = 0, eps: float = 1e-6,
                   corrupt: dict[str, float] | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on a tiny model.

    ``dims`` is (H, D, T, C). The batch mixes full-length and shorter
    sequences so the padding mask is exercised. ``corrupt`` scales named
    analytic gradient blocks, to demonstrate detection.
    """
    H, D, T, C = dims
    n_params = 2 * (4 * H * D + 4 * H * H + 4 * H) + C * 2 * H + C
    if n_params > 5000:
        raise ValueError(f"{n_params} parameters is too many for a finite-difference check")
    rng = np.random.default_rng(seed)
    model = init_model(D, C, H, seed=seed)
    for v in model.blocks().values():
        v += rng.normal(0, 0.3, v.shape)
    lengths = [T, max(1, T - 2), T]
    batch = [(rng.normal(0, 1, (n, D)), int(rng.integers(0, C))) for n in lengths]
    analytic = backward(model, batch).grads
    if corrupt:
        analytic = {k: g * corrupt.get(k, 1.0) for k, g in analytic.items()}
    errors = {}
    for name, param in model.blocks().items():
        numeric = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = param[idx]
            param[idx] = old + eps
            lp = batch_loss(model, batch)
            param[idx] = old - eps
            lm = batch_loss(model, batch)
            param[idx] = old
            numeric[idx] = (lp - lm) / (2 * eps)
        errors[name] = float(relative_error(analytic[name], numeric).max())
    return GradCheckReport(max(errors.values()), errors, tolerance)


# -- training --------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_iterations: int = 1000
    gradient_clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be > 0")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size must be >= 1 and max_iterations >= 0")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TraceRow:
    iteration: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: BlstmModel
    trace: list[TraceRow] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["iteration,loss,accuracy"]
        lines += [f"{r.iteration},{r.loss!r},{r.accuracy!r}" for r in self.trace]
        return "\n".join(lines) + "\n"


def train(model: BlstmModel, X: Sequence[np.ndarray], y: Sequence[int],
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Mini-batch gradient descent with momentum; reshuffles each epoch.

    The trace records each iteration's mini-batch loss and accuracy, measured
    before that iteration's update. Deterministic for a given seed.
    """
    n = len(X)
    if n == 0:
        raise ValueError("training split is empty")
    y = np.asarray(y, dtype=np.int64)
    model = model.copy()
    params = model.blocks()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    pos = 0
    trace = []
    for it in range(1, config.max_iterations + 1):
        if pos + config.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        res = backward(model, [(X[i], int(y[i])) for i in idx], clip_norm=config.gradient_clip_norm)
        if not math.isfinite(res.loss):
            raise TrainingDiverged(f"loss became {res.loss} at iteration {it}")
        for k, p in params.items():
            v = velocity[k]
            v *= config.momentum
            v -= config.learning_rate * res.grads[k]
            p += v
        trace.append(TraceRow(it, res.loss, res.accuracy))
    if not model.all_finite():
        raise TrainingDiverged("non-finite parameters after training")
    return TrainResult(model, trace)


def accuracy(model: BlstmModel, X: Sequence[np.ndarray], y: Sequence[int]) -> float:
    P = predict_batch(model, list(X))
    return float(np.mean(np.argmax(P, axis=1) == np.asarray(y)))


# -- checkpoints -----------------------------------------------------------------

def encode_model(model: BlstmModel) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack(">IIII", model.H, model.D, model.C, CHECKPOINT_VERSION)]
    out += [np.asarray(v, dtype=">f8").tobytes() for v in model.blocks().values()]
    return b"".join(out)


def block_shapes(H: int, D: int, C: int) -> dict[str, tuple[int, ...]]:
    lstm = {"W": (4 * H, D), "U": (4 * H, H), "b": (4 * H,)}
    shapes = {f"{d}_{k}": s for d in ("fwd", "bwd") for k, s in lstm.items()}
    shapes.update(dense_W=(C, 2 * H), dense_b=(C,))
    return {k: shapes[k] for k in BLOCKS}


def decode_model(data: bytes) -> BlstmModel:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    H, D, C, version = struct.unpack_from(">IIII", data, pos)
    pos += 16
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arrays = {}
    for name, shape in block_shapes(H, D, C).items():
        n = int(np.prod(shape))
        if pos + 8 * n > len(data):
            raise ValueError(f"checkpoint truncated in block {name}")
        arrays[name] = np.frombuffer(data, ">f8", n, pos).astype(float).reshape(shape)
        pos += 8 * n
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return BlstmModel(
        LstmParams(arrays["fwd_W"], arrays["fwd_U"], arrays["fwd_b"]),
        LstmParams(arrays["bwd_W"], arrays["bwd_U"], arrays["bwd_b"]),
        arrays["dense_W"], arrays["dense_b"],
    )


def save_model(model: BlstmModel, path: str | Path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path: str | Path) -> BlstmModel:
    return decode_model(Path(path).read_bytes())


def smoothed(values: Iterable[float], window: int = 50) -> np.ndarray:
    v = np.asarray(list(values), dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
