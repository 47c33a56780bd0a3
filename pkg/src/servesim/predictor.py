"""Retrieval-based output-length prediction.

A prompt is embedded with a deterministic feature-hashing embedder, matched
against a capacity-bounded store of (vector, observed length) records via
brute-force cosine search, and the qualifying neighbours' lengths are
averaged with similarity weights.  When no neighbour clears the similarity
threshold, a small feed-forward regressor trained on log-lengths supplies
the prediction instead.  Completed requests are appended to the store so the
predictor learns online.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class PredictorError(ValueError):
    pass


@dataclass
class PredictorConfig:
    dimension: int = 64
    top_k: int = 8
    similarity_threshold: float = 0.80
    db_capacity: int = 100_000
    max_len: int = 2048
    fallback_hidden: int = 32
    fallback_epochs: int = 150
    fallback_learning_rate: float = 0.05
    allow_untrained: bool = True
    online_refit: bool = True        # refit the fallback from stored records
    refit_epochs: int = 40
    refit_sample_cap: int = 256

    def validate(self):
        if self.dimension < 1:
            raise PredictorError("dimension must be >= 1")
        if self.top_k < 1:
            raise PredictorError("top_k must be >= 1")
        if self.db_capacity < self.top_k:
            raise PredictorError("db_capacity must be >= top_k")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise PredictorError("similarity_threshold must be in [-1, 1]")
        if self.max_len < 1:
            raise PredictorError("max_len must be >= 1")


class HashingEmbedder:
    """Token n-gram (n=1,2) feature hashing into a fixed-dimension sphere.

    Dependency-free stand-in for a pre-trained text encoder: deterministic,
    and similar token sequences land near each other.  Output is always
    L2-normalized.
    """

    def __init__(self, dimension: int = 64):
        if dimension < 1:
            raise PredictorError("dimension must be >= 1")
        self.dimension = dimension

    def embed(self, tokens) -> np.ndarray:
        toks = list(tokens) if tokens is not None else []
        if len(toks) == 0:
            raise PredictorError("cannot embed an empty token sequence")
        vec = np.zeros(self.dimension, dtype=np.float64)
        prev = None
        for t in toks:
            self._bump(vec, f"u:{int(t)}")
            if prev is not None:
                self._bump(vec, f"b:{prev}:{int(t)}")
            prev = int(t)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:  # cannot happen with at least one feature, kept as guard
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def _bump(self, vec, feature: str):
        h = _fnv1a(feature.encode())
        idx = h % self.dimension
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[idx] += sign


def load_precomputed_embeddings(path) -> dict[int, np.ndarray]:
    """JSON-lines of {"id": ..., "vector": [...]}; vectors are re-normalized."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            v = np.asarray(rec["vector"], dtype=np.float64)
            n = float(np.linalg.norm(v))
            if n == 0:
                raise PredictorError(f"zero vector for id {rec['id']}")
            out[int(rec["id"])] = v / n
    return out


class VectorStore:
    """FIFO-bounded store of (vector, observed length) with brute-force search."""

    def __init__(self, dimension: int, capacity: int):
        self.dimension = dimension
        self.capacity = capacity
        self._vecs = np.zeros((min(capacity, 1024), dimension), dtype=np.float64)
        self._lens = np.zeros(min(capacity, 1024), dtype=np.int64)
        self._seqs = np.zeros(min(capacity, 1024), dtype=np.int64)
        self.size = 0
        self.next_seq = 0

    def __len__(self):
        return self.size

    def add(self, vector: np.ndarray, observed_len: int) -> int:
        if observed_len < 1:
            raise PredictorError("observed_len must be >= 1")
        pos = self.next_seq % self.capacity
        if pos >= self._vecs.shape[0]:
            grow = min(self.capacity, max(2 * self._vecs.shape[0], pos + 1))
            for name in ("_vecs", "_lens", "_seqs"):
                old = getattr(self, name)
                shape = (grow, self.dimension) if old.ndim == 2 else (grow,)
                new = np.zeros(shape, dtype=old.dtype)
                new[:old.shape[0]] = old
                setattr(self, name, new)
        self._vecs[pos] = vector
        self._lens[pos] = observed_len
        self._seqs[pos] = self.next_seq
        self.next_seq += 1
        self.size = min(self.size + 1, self.capacity)
        return self.next_seq - 1

    def search(self, vector: np.ndarray, k: int):
        """Top-k by cosine similarity; ties broken by older insert first."""
        if self.size == 0:
            return np.array([]), np.array([], dtype=np.int64), np.array([], dtype=np.int64)
        sims = self._vecs[:self.size] @ vector
        k = min(k, self.size)
        idx = np.argpartition(-sims, k - 1)[:k]
        order = np.lexsort((self._seqs[idx], -sims[idx]))
        idx = idx[order]
        return sims[idx], self._lens[idx], self._seqs[idx]

    def newest(self, count: int):
        """Vectors and lengths of the most recently inserted records."""
        order = np.argsort(self._seqs[:self.size])[-count:]
        return self._vecs[order], self._lens[order]

    def save(self, path):
        with open(path, "w") as fh:
            order = np.argsort(self._seqs[:self.size])
            for i in order:
                fh.write(json.dumps({
                    "seq": int(self._seqs[i]),
                    "len": int(self._lens[i]),
                    "vector": [float(x) for x in self._vecs[i]],
                }) + "\n")

    @classmethod
    def load(cls, path, dimension: int, capacity: int) -> "VectorStore":
        store = cls(dimension, capacity)
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    store.add(np.asarray(rec["vector"], dtype=np.float64), int(rec["len"]))
        return store


class FallbackRegressor:
    """One-hidden-layer regressor on log output length.

    Trained by full-batch gradient descent with backtracking step halving,
    which makes the recorded loss history non-increasing by construction.
    """

    def __init__(self, dimension: int, hidden: int, seed: int = 0):
        gen = rng.stream(seed, rng.FALLBACK_INIT)
        limit = math.sqrt(6.0 / (dimension + hidden))
        self.w1 = gen.uniform(-limit, limit, size=(dimension, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = gen.uniform(-limit, limit, size=hidden) / math.sqrt(hidden)
        self.b2 = 0.0
        self.loss_history: list[float] = []
        self.trained = False

    def _forward(self, X: np.ndarray):
        h = np.tanh(X @ self.w1 + self.b1)
        return h, h @ self.w2 + self.b2

    def predict_log(self, vector: np.ndarray) -> float:
        _, out = self._forward(vector[None, :])
        return float(out[0])

    def predict_len(self, vector: np.ndarray, max_len: int) -> int:
        raw = math.exp(min(self.predict_log(vector), math.log(max_len) + 1.0))
        return int(min(max(round(raw), 1), max_len))

    def fit(self, X: np.ndarray, lengths, epochs: int, learning_rate: float):
        y = np.log(np.asarray(lengths, dtype=np.float64))
        n = X.shape[0]
        params = [self.w1, self.b1, self.w2]

        def loss_and_grads():
            h, out = self._forward(X)
            err = out - y
            loss = float(np.mean(err ** 2))
            dout = 2.0 * err / n
            dw2 = h.T @ dout
            db2 = float(dout.sum())
            dh = np.outer(dout, self.w2)
            dpre = dh * (1.0 - h ** 2)
            dw1 = X.T @ dpre
            db1 = dpre.sum(axis=0)
            return loss, (dw1, db1, dw2, db2)

        loss, grads = loss_and_grads()
        self.loss_history = [loss]
        lr = learning_rate
        for _ in range(epochs):
            dw1, db1, dw2, db2 = grads
            saved = (self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2)
            accepted = False
            for _ in range(30):
                self.w1 = saved[0] - lr * dw1
                self.b1 = saved[1] - lr * db1
                self.w2 = saved[2] - lr * dw2
                self.b2 = saved[3] - lr * db2
                new_loss, new_grads = loss_and_grads()
                if new_loss <= loss:
                    accepted = True
                    break
                lr *= 0.5
            if not accepted:  # gradient at numerical floor; keep parameters
                self.w1, self.b1, self.w2, self.b2 = saved
                self.loss_history.append(loss)
                continue
            loss, grads = new_loss, new_grads
            self.loss_history.append(loss)
            lr = min(lr * 1.25, learning_rate)
        self.trained = True
        return self


def train_fallback(corpus, config: PredictorConfig, seed: int = 0,
                   embedder: HashingEmbedder | None = None) -> FallbackRegressor:
    """Train the fallback regressor on (prompt_tokens, actual_len) pairs."""
    if len(corpus) < 10:
        raise PredictorError("training corpus must have at least 10 examples")
    embedder = embedder or HashingEmbedder(config.dimension)
    X = np.stack([embedder.embed(tokens) for tokens, _ in corpus])
    lengths = [n for _, n in corpus]
    if min(lengths) < 1:
        raise PredictorError("corpus lengths must be >= 1")
    reg = FallbackRegressor(config.dimension, config.fallback_hidden, seed=seed)
    reg.fit(X, lengths, config.fallback_epochs, config.fallback_learning_rate)
    return reg


RETRIEVED = "retrieved"
FALLBACK = "fallback"


class LengthPredictor:
    """Retrieval-first length predictor with regressor fallback."""

    def __init__(self, config: PredictorConfig, regressor: FallbackRegressor | None = None,
                 embedder: HashingEmbedder | None = None, store: VectorStore | None = None,
                 precomputed: dict[int, np.ndarray] | None = None):
        config.validate()
        self.config = config
        self.embedder = embedder or HashingEmbedder(config.dimension)
        self.store = store or VectorStore(config.dimension, config.db_capacity)
        self.regressor = regressor
        self.precomputed = precomputed or {}
        if regressor is None and not config.allow_untrained:
            raise PredictorError("no trained fallback and allow_untrained is false")
        self._untrained = regressor is None
        if self._untrained:
            self.regressor = FallbackRegressor(config.dimension, config.fallback_hidden, seed=0)
        self._observations = 0
        self._next_refit = 8

    def embed(self, tokens, request_id: int | None = None) -> np.ndarray:
        if request_id is not None and request_id in self.precomputed:
            return self.precomputed[request_id]
        return self.embedder.embed(tokens)

    def predict_vector(self, vector: np.ndarray) -> tuple[int, str]:
        """Predict from an already-embedded prompt; returns (length, provenance)."""
        sims, lens, _ = self.store.search(vector, self.config.top_k)
        if sims.size:
            qualify = sims >= self.config.similarity_threshold
            if qualify.any():
                w = np.clip(sims[qualify], 0.0, None)
                vals = lens[qualify].astype(np.float64)
                if w.sum() > 0.0:
                    pred = float((w * vals).sum() / w.sum())
                else:  # qualifying neighbours with non-positive similarity
                    pred = float(vals.mean())
                pred_len = int(min(max(round(pred), 1), self.config.max_len))
                return pred_len, RETRIEVED
        return self.regressor.predict_len(vector, self.config.max_len), FALLBACK

    def predict(self, tokens, request_id: int | None = None) -> tuple[int, str, np.ndarray]:
        vec = self.embed(tokens, request_id)
        length, provenance = self.predict_vector(vec)
        return length, provenance, vec

    def observe(self, vector: np.ndarray, actual_len: int):
        """Record a finished request's true length in the store.

        When online_refit is on, the fallback regressor is refit from the
        stored records on a geometric schedule (at 8, 16, 32, ... records,
        then every refit_sample_cap), so cold-start predictions for prompts
        with no similar history improve as the run progresses.
        """
        self.store.add(vector, actual_len)
        self._observations += 1
        if self.config.online_refit and self._observations >= self._next_refit:
            self._refit()
            cap = self.config.refit_sample_cap
            self._next_refit = min(self._next_refit * 2, self._observations + cap)

    def _refit(self):
        X, lens = self.store.newest(self.config.refit_sample_cap)
        reg = FallbackRegressor(self.config.dimension, self.config.fallback_hidden,
                                seed=self._observations)
        reg.fit(X, lens, self.config.refit_epochs, self.config.fallback_learning_rate)
        self.regressor = reg


def eval_accuracy(pairs, bin_width: int, latencies_ms=None) -> dict:
    """Bucketed accuracy and mean relative error of (predicted, actual) pairs.

    A prediction is accurate when predicted and actual fall in the same
    width-`bin_width` bucket [i*w, (i+1)*w).
    """
    if bin_width < 1:
        raise PredictorError("bin_width must be >= 1")
    pairs = list(pairs)
    if not pairs:
        raise PredictorError("no prediction pairs to evaluate")
    same_bin = sum(1 for p, a in pairs if p // bin_width == a // bin_width)
    rel_err = sum(abs(p - a) / a for p, a in pairs) / len(pairs)
    out = {
        "count": len(pairs),
        "accuracy": same_bin / len(pairs),
        "pred_error": rel_err,
        "mean_latency_ms": float(np.mean(latencies_ms)) if latencies_ms else 0.0,
    }
    return out
