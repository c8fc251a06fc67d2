"""Skip-gram with negative sampling over zone trajectories.

Zones play the role of words and day segments the role of sentences. The
hot loop is a numba kernel; a serial variant gives bit-reproducible vectors
for a fixed seed, and a parallel variant runs lock-free (Hogwild-style)
updates over disjoint shards of day segments.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

log = logging.getLogger(__name__)

SIGMOID_CLAMP = 30.0
MODEL_FORMAT = "mobarrier-sgns/1"


class EmbeddingError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dim: int = 300
    window: int = 1
    min_count: int = 50
    negatives: int = 5
    noise_exponent: float = 0.75
    epochs: int = 5
    lr_start: float = 0.025
    lr_end: float = 0.0001
    seed: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.dim < 1 or self.window < 1 or self.negatives < 1 or self.epochs < 1:
            raise EmbeddingError("dim, window, negatives and epochs must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise EmbeddingError("need 0 < lr_end <= lr_start")


@dataclass
class Vocab:
    zones: list[str]
    counts: np.ndarray
    noise: np.ndarray
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {z: k for k, z in enumerate(self.zones)}

    def __len__(self):
        return len(self.zones)

    def __contains__(self, zone):
        return zone in self.index


@dataclass
class EmbeddingModel:
    vocab: Vocab
    in_vectors: np.ndarray
    out_vectors: np.ndarray
    config: TrainConfig
    epoch_loss: list[float] = field(default_factory=list)

    def vector(self, zone: str) -> np.ndarray:
        return self.in_vectors[self.vocab.index[zone]]


def _segments(corpus):
    """Yield zone sequences from trajectories or plain sequences."""
    for item in corpus:
        if hasattr(item, "segment_zones"):
            yield from item.segment_zones()
        else:
            yield item


def build_vocab(corpus, min_count: int = 50, noise_exponent: float = 0.75) -> Vocab:
    """Zones seen at least ``min_count`` times, with the unigram noise law."""
    counts: Counter = Counter()
    for seg in _segments(corpus):
        counts.update(seg.tolist() if isinstance(seg, np.ndarray) else seg)
    kept = sorted((z for z, c in counts.items() if c >= min_count), key=lambda z: (-counts[z], z))
    if not kept:
        raise EmbeddingError(f"empty vocabulary at min_count={min_count}")
    c = np.array([counts[z] for z in kept], dtype=np.int64)
    w = c.astype(float) ** noise_exponent
    return Vocab(kept, c, w / w.sum())


def encode_corpus(corpus, vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Flatten segments to vocab indices; out-of-vocabulary tokens are dropped.

    Returns ``(tokens, offsets)`` with segment ``k`` at
    ``tokens[offsets[k]:offsets[k + 1]]``.
    """
    idx = vocab.index
    toks: list[int] = []
    offsets = [0]
    for seg in _segments(corpus):
        enc = [idx[z] for z in (seg.tolist() if isinstance(seg, np.ndarray) else seg) if z in idx]
        if len(enc) >= 2:
            toks.extend(enc)
            offsets.append(len(toks))
    return np.asarray(toks, dtype=np.int32), np.asarray(offsets, dtype=np.int64)


# --- numerics -----------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _sigmoid(x):
    if x > SIGMOID_CLAMP:
        x = SIGMOID_CLAMP
    elif x < -SIGMOID_CLAMP:
        x = -SIGMOID_CLAMP
    return 1.0 / (1.0 + math.exp(-x))


@numba.njit(cache=True, inline="always")
def _splitmix(state):
    # returns (new_state, output); 64-bit splitmix, wraps mod 2**64
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _sgns_update(v, out, center, targets, labels, n_targets, lr, grad_v):
    """One SGNS gradient step; returns the loss before the step."""
    dim = v.shape[1]
    loss = 0.0
    for d in range(dim):
        grad_v[d] = 0.0
    for k in range(n_targets):
        t = targets[k]
        s = 0.0
        for d in range(dim):
            s += v[center, d] * out[t, d]
        p = _sigmoid(s)
        if labels[k] == 1:
            loss -= math.log(max(p, 1e-300))
            g = p - 1.0
        else:
            loss -= math.log(max(1.0 - p, 1e-300))
            g = p
        for d in range(dim):
            grad_v[d] += g * out[t, d]
            out[t, d] -= lr * g * v[center, d]
    for d in range(dim):
        v[center, d] -= lr * grad_v[d]
    return loss


@numba.njit(cache=True)
def _train_shard(v, out, tokens, offsets, seg_lo, seg_hi, cum_noise, window, negatives,
                 lr_start, lr_end, done0, total, state):
    dim = v.shape[1]
    grad_v = np.zeros(dim)
    targets = np.empty(negatives + 1, dtype=np.int64)
    labels = np.zeros(negatives + 1, dtype=np.int64)
    labels[0] = 1
    n_noise = cum_noise.shape[0]
    loss = 0.0
    pairs = 0
    for s in range(seg_lo, seg_hi):
        a, b = offsets[s], offsets[s + 1]
        for i in range(a, b):
            c = tokens[i]
            for j in range(max(a, i - window), min(b, i + window + 1)):
                if j == i:
                    continue
                frac = (done0 + pairs) / total
                lr = lr_start - (lr_start - lr_end) * frac
                if lr < lr_end:
                    lr = lr_end
                ctx = tokens[j]
                targets[0] = ctx
                n = 1
                for _ in range(negatives):
                    state, r = _splitmix(state)
                    u = (r >> np.uint64(11)) * (1.0 / 9007199254740992.0)
                    neg = np.searchsorted(cum_noise, u, side="right")
                    if neg >= n_noise:
                        neg = n_noise - 1
                    if neg == ctx:
                        continue
                    targets[n] = neg
                    n += 1
                loss += _sgns_update(v, out, c, targets, labels, n, lr, grad_v)
                pairs += 1
    return loss, pairs, state


@numba.njit(cache=True)
def _count_pairs(offsets, window):
    total = 0
    for s in range(offsets.shape[0] - 1):
        n = offsets[s + 1] - offsets[s]
        for i in range(n):
            total += min(n - 1, i + window) - max(0, i - window)
    return total


@numba.njit(cache=True, parallel=True)
def _train_parallel(v, out, tokens, offsets, bounds, cum_noise, window, negatives,
                    lr_start, lr_end, done0, total, states):
    n_shards = bounds.shape[0] - 1
    losses = np.zeros(n_shards)
    counts = np.zeros(n_shards, dtype=np.int64)
    for k in numba.prange(n_shards):
        # per-shard lr schedule assumes shards progress at the same rate
        l, p, st = _train_shard(v, out, tokens, offsets, bounds[k], bounds[k + 1], cum_noise, window,
                                negatives, lr_start, lr_end, done0 / n_shards, total / n_shards, states[k])
        losses[k] = l
        counts[k] = p
        states[k] = st
    return losses.sum(), counts.sum()


def sgns_loss_and_grad(v_c: np.ndarray, u_targets: np.ndarray, labels: np.ndarray):
    """Loss and gradients for one center vector against its targets.

    ``labels`` is 1 for the observed context and 0 for noise samples. Returns
    ``(loss, grad_v, grad_u)`` with ``grad_u`` row-aligned to ``u_targets``.
    """
    s = np.clip(u_targets @ v_c, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    p = 1.0 / (1.0 + np.exp(-s))
    lab = np.asarray(labels)
    loss = -np.sum(np.where(lab == 1, np.log(p), np.log1p(-p)))
    g = p - lab
    return float(loss), g @ u_targets, np.outer(g, v_c)


def sgns_step(center: int, context: int, negatives, lr: float, model: EmbeddingModel) -> float:
    """Apply one SGNS update in place; returns the pre-update loss."""
    negs = [n for n in negatives if n != context]
    targets = np.array([context] + negs, dtype=np.int64)
    labels = np.zeros(len(targets), dtype=np.int64)
    labels[0] = 1
    grad = np.zeros(model.in_vectors.shape[1])
    return float(_sgns_update(model.in_vectors, model.out_vectors, center, targets, labels,
                              len(targets), lr, grad))


def init_model(vocab: Vocab, cfg: TrainConfig) -> EmbeddingModel:
    rng = np.random.default_rng(cfg.seed)
    v = rng.uniform(-0.5 / cfg.dim, 0.5 / cfg.dim, size=(len(vocab), cfg.dim))
    return EmbeddingModel(vocab, v, np.zeros((len(vocab), cfg.dim)), cfg)


def train(corpus, cfg: TrainConfig, vocab: Vocab | None = None) -> EmbeddingModel:
    """Train zone embeddings; ``cfg.threads == 1`` is the reproducible path."""
    vocab = vocab if vocab is not None else build_vocab(corpus, cfg.min_count, cfg.noise_exponent)
    tokens, offsets = encode_corpus(corpus, vocab)
    if len(tokens) == 0:
        raise EmbeddingError("no trainable segments after vocabulary filtering")
    model = init_model(vocab, cfg)
    cum_noise = np.cumsum(vocab.noise)
    cum_noise /= cum_noise[-1]
    per_epoch = _count_pairs(offsets, cfg.window)
    total = float(per_epoch * cfg.epochs)
    n_seg = len(offsets) - 1
    shards = max(1, min(cfg.threads, n_seg))
    bounds = np.linspace(0, n_seg, shards + 1).round().astype(np.int64)
    states = np.array([(cfg.seed * 1_000_003 + k * 7919 + 1) & (2**63 - 1) for k in range(shards)],
                      dtype=np.uint64)
    if shards > 1:
        numba.set_num_threads(min(shards, numba.config.NUMBA_NUM_THREADS))
    done = 0
    for epoch in range(cfg.epochs):
        if shards == 1:
            loss, pairs, st = _train_shard(model.in_vectors, model.out_vectors, tokens, offsets, 0, n_seg,
                                           cum_noise, cfg.window, cfg.negatives, cfg.lr_start, cfg.lr_end,
                                           float(done), total, states[0])
            states[0] = st
        else:
            loss, pairs = _train_parallel(model.in_vectors, model.out_vectors, tokens, offsets, bounds,
                                          cum_noise, cfg.window, cfg.negatives, cfg.lr_start, cfg.lr_end,
                                          float(done), total, states)
        done += pairs
        if not (np.isfinite(model.in_vectors).all() and np.isfinite(model.out_vectors).all()):
            raise NumericError(f"non-finite embedding values after epoch {epoch + 1}")
        model.epoch_loss.append(loss / max(pairs, 1))
        log.info("epoch %d: %d pairs, mean loss %.5f", epoch + 1, pairs, model.epoch_loss[-1])
    return model


# --- distances ------------------------------------------------------------------

def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine distance of a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def distance_table(model: EmbeddingModel, pairs) -> np.ndarray:
    """In-vector cosine distances; NaN marks pairs with an out-of-vocab zone."""
    pairs = list(pairs)
    out = np.full(len(pairs), np.nan)
    if not pairs:
        return out
    idx = model.vocab.index
    ia = np.array([idx.get(a, -1) for a, _ in pairs])
    ib = np.array([idx.get(b, -1) for _, b in pairs])
    ok = (ia >= 0) & (ib >= 0)
    norms = np.linalg.norm(model.in_vectors, axis=1)
    va, vb = model.in_vectors[ia[ok]], model.in_vectors[ib[ok]]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 - np.einsum("ij,ij->i", va, vb) / (norms[ia[ok]] * norms[ib[ok]])
    same = ia[ok] == ib[ok]
    d[same] = 0.0
    out[ok] = d
    return out


def log_partition(model: EmbeddingModel, center: int) -> float:
    """``log Z_i`` of the full softmax over all out-vectors."""
    s = model.out_vectors @ model.in_vectors[center]
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()))


def softmax_probs(model: EmbeddingModel, center: int) -> np.ndarray:
    """``p(j | i) = exp(u_j . v_i) / Z_i`` for every zone ``j``."""
    s = model.out_vectors @ model.in_vectors[center]
    return np.exp(s - log_partition(model, center))


# --- persistence ----------------------------------------------------------------

def save_model(model: EmbeddingModel, path) -> None:
    """Write ``<path>.json`` plus little-endian float32 ``.in.f32``/``.out.f32`` tables."""
    path = Path(path)
    header = {
        "format": MODEL_FORMAT,
        "config": asdict(model.config),
        "n": len(model.vocab),
        "dim": model.in_vectors.shape[1],
        "vocab": [[z, int(c)] for z, c in zip(model.vocab.zones, model.vocab.counts)],
        "epoch_loss": model.epoch_loss,
        "tables": {"in": path.name + ".in.f32", "out": path.name + ".out.f32"},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_name(path.name + ".json").write_text(json.dumps(header, indent=1))
    for key, arr in (("in", model.in_vectors), ("out", model.out_vectors)):
        np.ascontiguousarray(arr, dtype="<f4").tofile(path.with_name(header["tables"][key]))


def load_model(path) -> EmbeddingModel:
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".json").read_text())
    if header.get("format") != MODEL_FORMAT:
        raise EmbeddingError(f"unknown model format {header.get('format')!r}")
    n, dim = header["n"], header["dim"]
    if len(header["vocab"]) != n:
        raise EmbeddingError("vocab length does not match header n")
    tables = {}
    for key in ("in", "out"):
        arr = np.fromfile(path.with_name(header["tables"][key]), dtype="<f4")
        if arr.size != n * dim:
            raise EmbeddingError(f"{key} table has {arr.size} values, header says {n}x{dim}")
        tables[key] = arr.reshape(n, dim).astype(np.float64)
    cfg = TrainConfig(**header["config"])
    zones = [z for z, _ in header["vocab"]]
    counts = np.array([c for _, c in header["vocab"]], dtype=np.int64)
    w = counts.astype(float) ** cfg.noise_exponent
    vocab = Vocab(zones, counts, w / w.sum())
    return EmbeddingModel(vocab, tables["in"], tables["out"], cfg, list(header.get("epoch_loss", [])))
