"""Coverage-prediction network and gradient-guided byte mutations.

The model is a one-hidden-layer perceptron mapping normalized input bytes
to one sigmoid output per (reduced) bitmap column. Gradients of an output
logit with respect to the input bytes rank the bytes worth mutating; the
sign of each gradient entry picks the mutation direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .coverage import CoverageBitmap
from .errors import ConfigError, InsufficientDataError

CHECKPOINT_FORMAT = "npsfuzz-model"
CHECKPOINT_VERSION = 1


def encode(data: bytes, input_len: int) -> np.ndarray:
    x = np.zeros(input_len, dtype=np.float64)
    raw = np.frombuffer(bytes(data[:input_len]), dtype=np.uint8)
    x[: len(raw)] = raw / 255.0
    return x


def decode(x: np.ndarray, length: int | None = None) -> bytes:
    vals = np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
    if length is not None:
        vals = vals[:length]
    return vals.tobytes()


def encode_batch(inputs: Sequence[bytes], input_len: int) -> np.ndarray:
    return np.stack([encode(d, input_len) for d in inputs]) if inputs else np.zeros((0, input_len))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class CoverageModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    edge_index: tuple[tuple[int, ...], ...] = ()
    loss_history: list[float] = field(default_factory=list, repr=False)
    train_indices: tuple[int, ...] = field(default=(), repr=False)
    holdout_indices: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.W1.shape[1] != self.b1.shape[0] or self.W2.shape != (self.b1.shape[0], self.b2.shape[0]):
            raise ValueError("inconsistent layer shapes")
        if self.edge_index and len(self.edge_index) != self.num_outputs:
            raise ValueError("edge_index length must equal the number of outputs")

    @property
    def input_len(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def num_outputs(self) -> int:
        return self.W2.shape[1]

    @classmethod
    def init(cls, input_len: int, hidden: int, outputs: int, rng: np.random.Generator, edge_index=()):
        # Glorot uniform
        lim1 = math.sqrt(6.0 / (input_len + hidden))
        lim2 = math.sqrt(6.0 / (hidden + outputs))
        return cls(
            rng.uniform(-lim1, lim1, (input_len, hidden)),
            np.zeros(hidden),
            rng.uniform(-lim2, lim2, (hidden, outputs)),
            np.zeros(outputs),
            tuple(edge_index),
        )

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = np.maximum(X @ self.W1 + self.b1, 0.0)
        return h @ self.W2 + self.b2

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Per-column coverage probabilities for encoded inputs ``X``."""
        return _sigmoid(self.logits(np.atleast_2d(X)))

    def predict_inputs(self, inputs: Sequence[bytes]) -> np.ndarray:
        return self.predict(encode_batch(inputs, self.input_len))

    def save(self, path) -> Path:
        """Write an ``.npz`` checkpoint.

        Arrays ``W1, b1, W2, b2`` plus ``meta``, a JSON string holding
        ``format``, ``version``, ``input_len``, ``hidden`` and ``edge_index``.
        """
        path = Path(path)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "input_len": self.input_len,
            "hidden": self.hidden,
            "edge_index": [list(g) for g in self.edge_index],
        }
        with open(path, "wb") as f:
            np.savez(f, W1=self.W1, b1=self.b1, W2=self.W2, b2=self.b2, meta=np.array(json.dumps(meta)))
        return path

    @classmethod
    def load(cls, path) -> "CoverageModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
            return cls(
                z["W1"].copy(), z["b1"].copy(), z["W2"].copy(), z["b2"].copy(),
                tuple(tuple(g) for g in meta["edge_index"]),
            )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    holdout_fraction: float = 0.10
    restart_period: int = 10  # epochs per cosine cycle
    batch_size: int = 32
    hidden: int = 4096
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.restart_period < 1:
            raise ConfigError("epochs, batch_size, hidden and restart_period must be positive")


def cosine_restart_lr(base_lr: float, epoch_pos: float, period: int) -> float:
    """Learning rate at fractional epoch ``epoch_pos`` for cosine decay with warm restarts."""
    t = (epoch_pos % period) / period
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def split_indices(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint (train, holdout) index arrays; both non-empty."""
    n_hold = max(1, int(round(n * holdout_fraction)))
    if n - n_hold < 1:
        raise InsufficientDataError(f"{n} test cases cannot be split into non-empty train and holdout sets")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-7):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _loss_grads(model: CoverageModel, X, Y):
    pre = X @ model.W1 + model.b1
    h = np.maximum(pre, 0.0)
    z = h @ model.W2 + model.b2
    dz = (_sigmoid(z) - Y) / Y.size
    dW2 = h.T @ dz
    db2 = dz.sum(axis=0)
    dh = (dz @ model.W2.T) * (pre > 0)
    return [X.T @ dh, dh.sum(axis=0), dW2, db2]


def train(bitmap: CoverageBitmap, corpus: Sequence[bytes], config: TrainConfig = TrainConfig(),
          input_len: int | None = None):
    """Fit a coverage model on ``bitmap`` and score it on a held-out split.

    Returns ``(model, metrics)`` where ``metrics`` is an
    :class:`npsfuzz.mleval.EdgeMetrics` computed on the holdout rows only.
    """
    from .mleval import evaluate

    if len(corpus) != bitmap.rows.shape[0]:
        raise ValueError(f"{len(corpus)} inputs but {bitmap.rows.shape[0]} bitmap rows")
    if len(corpus) < 2:
        raise InsufficientDataError("training needs at least two test cases")
    if input_len is None:
        input_len = max(1, max(len(d) for d in corpus))
    train_idx, hold_idx = split_indices(len(corpus), config.holdout_fraction, config.seed)

    X = encode_batch(corpus, input_len)
    Y = bitmap.rows.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    model = CoverageModel.init(input_len, config.hidden, bitmap.num_columns, rng, bitmap.edge_index)
    params = [model.W1, model.b1, model.W2, model.b2]
    opt = _Adam(params)

    Xtr, Ytr = X[train_idx], Y[train_idx]
    n = len(train_idx)
    batches = max(1, math.ceil(n / config.batch_size))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(batches):
            sel = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = cosine_restart_lr(config.learning_rate, epoch + b / batches, config.restart_period)
            opt.step(params, _loss_grads(model, Xtr[sel], Ytr[sel]), lr)
        history.append(bce_with_logits(model.logits(Xtr), Ytr))

    model.loss_history = history
    model.train_indices = tuple(int(i) for i in train_idx)
    model.holdout_indices = tuple(int(i) for i in hold_idx)
    metrics = evaluate(model, X[hold_idx], bitmap.rows[hold_idx], config.threshold)
    return model, metrics


def input_gradient(model: CoverageModel, x: np.ndarray, edge: int) -> np.ndarray:
    """Gradient of column ``edge``'s logit with respect to the encoded input."""
    if not 0 <= edge < model.num_outputs:
        raise IndexError(f"edge column {edge} out of range [0, {model.num_outputs})")
    x = np.asarray(x, dtype=np.float64)
    active = (x @ model.W1 + model.b1) > 0
    return model.W1 @ (active * model.W2[:, edge])


def rank_bytes(gradient: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Top-``k`` (offset, sign) pairs by |gradient|; ties go to the lower offset."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = np.asarray(gradient, dtype=np.float64)
    nz = np.flatnonzero(g)
    # lexsort: last key is primary
    order = nz[np.lexsort((nz, -np.abs(g[nz])))]
    return [(int(i), 1 if g[i] > 0 else -1) for i in order[:k]]


def exponential_steps(limit: int = 256) -> tuple[int, ...]:
    steps, s = [], 1
    while s < limit:
        steps.append(s)
        s *= 2
    return tuple(steps)


@dataclass(frozen=True)
class PatternConfig:
    steps: tuple[int, ...] = exponential_steps()
    chunk_max: int = 32
    max_input_len: int = 1 << 16

    def __post_init__(self):
        if self.chunk_max < 1 or self.max_input_len < 1 or not self.steps or min(self.steps) < 1:
            raise ConfigError("invalid mutation pattern config")


def _value_ladder(orig: int, sign: int, steps) -> list[int]:
    bound = 255 if sign > 0 else 0
    out = []
    for s in steps:
        v = min(255, orig + s) if sign > 0 else max(0, orig - s)
        if v == orig or (out and v == out[-1]):
            continue
        out.append(v)
        if v == bound:
            break
    if orig != bound and (not out or out[-1] != bound):
        out.append(bound)
    return out


def mutate(seed: bytes, hot_bytes: Sequence[tuple[int, int]], rng: np.random.Generator,
           config: PatternConfig = PatternConfig()) -> list[bytes]:
    """Expand the four mutation patterns at every hot byte.

    The gradient sign selects whether the byte value climbs towards 255 or
    descends towards 0; every hot byte also gets one random-chunk insertion
    and one random-length deletion.
    """
    seed = bytes(seed)
    out: list[bytes] = []
    for off, sign in hot_bytes:
        if off < len(seed):
            for v in _value_ladder(seed[off], sign, config.steps):
                out.append(seed[:off] + bytes([v]) + seed[off + 1:])
        pos = min(off, len(seed))
        n = int(rng.integers(1, config.chunk_max + 1))
        chunk = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        out.append((seed[:pos] + chunk + seed[pos:])[: config.max_input_len])
        n = int(rng.integers(1, config.chunk_max + 1))
        if off < len(seed):
            cut = seed[:off] + seed[off + n:]
            if cut:
                out.append(cut)
    return [o[: config.max_input_len] for o in out]


@dataclass(frozen=True)
class MutationPlan:
    seed: bytes
    targeted_edge: int
    hot_bytes: tuple[tuple[int, int], ...]
    generated_inputs: tuple[bytes, ...]


def plan_mutations(model: CoverageModel, seed: bytes, edge: int, k: int, rng: np.random.Generator,
                   config: PatternConfig = PatternConfig()) -> MutationPlan:
    grad = input_gradient(model, encode(seed, model.input_len), edge)
    hot = rank_bytes(grad, k)
    return MutationPlan(bytes(seed), edge, tuple(hot), tuple(mutate(seed, hot, rng, config)))


@dataclass(frozen=True)
class RetrainPolicy:
    min_corpus: int = 200
    min_new_testcases: int = 10
    min_interval: float = 3600.0  # virtual-time units

    def __post_init__(self):
        if self.min_corpus < 1 or self.min_new_testcases < 1 or self.min_interval <= 0:
            raise ConfigError("retrain thresholds must be positive")


def should_retrain(policy: RetrainPolicy, corpus_size: int, new_since_last: int,
                   elapsed: float, trained_before: bool) -> bool:
    if corpus_size < policy.min_corpus:
        return False
    if not trained_before:
        return True
    return new_since_last >= policy.min_new_testcases and elapsed >= policy.min_interval


def select_target_edges(bitmap: CoverageBitmap, count: int, rng: np.random.Generator) -> list[int]:
    """Sample bitmap columns without replacement, weighting rare columns up."""
    if count < 1:
        raise ValueError("count must be >= 1")
    freq = bitmap.rows.mean(axis=0)
    w = 1.0 / freq
    picks = rng.choice(bitmap.num_columns, size=min(count, bitmap.num_columns), replace=False, p=w / w.sum())
    return [int(c) for c in picks]
