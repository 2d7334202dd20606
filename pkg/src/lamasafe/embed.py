"""Hashed bag-of-words text encoder with a trainable linear projection.

Text is tokenized, hashed into ``vocab_dim`` count buckets, projected to
``dim`` values and L2-normalized. The projection is fine-tuned with a
triplet hinge on cosine distance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from lamasafe.nn import AdamState, adam_step
from lamasafe.text import Triplet, synonym_table_hash, tokenize

__all__ = [
    "EncoderState",
    "EmbeddingCache",
    "tokenize",
    "bucket",
    "count_vector",
    "encode",
    "encode_many",
    "cosine_sim",
    "triplet_loss",
    "batch_triplet_loss",
    "finetune",
    "save_encoder",
    "load_encoder",
]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
UNIT_TOL = 1e-6


@dataclass
class EncoderState:
    projection: np.ndarray
    vocab_dim: int = 1024
    margin: float = 0.2
    version: int = 0
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.shape[1] != self.vocab_dim:
            raise ValueError("projection width must equal vocab_dim")
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection must be finite")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    @classmethod
    def fresh(cls, dim: int = 64, vocab_dim: int = 1024, margin: float = 0.2, seed: int = 0) -> EncoderState:
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((dim, vocab_dim)) / math.sqrt(dim), vocab_dim, margin)


def bucket(token: str, vocab_dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_dim


def count_vector(text: str, vocab_dim: int) -> np.ndarray:
    counts = np.zeros(vocab_dim)
    for tok in tokenize(text):
        counts[bucket(tok, vocab_dim)] += 1.0
    return counts


def _basis(dim: int) -> np.ndarray:
    e = np.zeros(dim)
    e[0] = 1.0
    return e


def encode(state: EncoderState, text: str) -> np.ndarray:
    """Unit-norm embedding of ``text``; empty or unhashable text gives e0."""
    z = state.projection @ count_vector(text, state.vocab_dim)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        return _basis(state.dim)
    return z / norm


def encode_many(state: EncoderState, texts: Sequence[str]) -> np.ndarray:
    return np.stack([encode(state, t) for t in texts]) if texts else np.zeros((0, state.dim))


def _check_unit(v: np.ndarray, name: str) -> None:
    norm = float(np.linalg.norm(v))
    if not math.isclose(norm, 1.0, abs_tol=UNIT_TOL):
        raise ValueError(f"{name} must be unit norm, got norm {norm:.8f}")


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Clamped cosine ``max(0, a.b)`` of two unit vectors."""
    _check_unit(a, "a")
    _check_unit(b, "b")
    return max(0.0, float(np.dot(a, b)))


def triplet_loss(state: EncoderState | float, anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> float:
    """Hinge ``max(0, margin + d(a, p) - d(a, n))`` with cosine distance.

    ``state`` may be an :class:`EncoderState` or the margin itself.
    """
    margin = state.margin if isinstance(state, EncoderState) else float(state)
    d_ap = 1.0 - float(np.dot(anchor, positive))
    d_an = 1.0 - float(np.dot(anchor, negative))
    return max(0.0, margin + d_ap - d_an)


@dataclass
class _Batch:
    xa: np.ndarray
    xp: np.ndarray
    xn: np.ndarray


def _batch(state: EncoderState, triplets: Sequence[Triplet]) -> _Batch:
    cv = {}

    def vec(t):
        if t not in cv:
            cv[t] = count_vector(t, state.vocab_dim)
        return cv[t]

    return _Batch(
        np.stack([vec(t.anchor) for t in triplets]),
        np.stack([vec(t.positive) for t in triplets]),
        np.stack([vec(t.negative) for t in triplets]),
    )


def _normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    e = z / safe
    e[norms[:, 0] == 0.0] = _basis(z.shape[1])
    return e, norms


def batch_triplet_loss(projection: np.ndarray, margin: float, batch: _Batch) -> tuple[float, np.ndarray]:
    """Mean triplet loss over ``batch`` and its gradient in ``projection``."""
    grads = np.zeros_like(projection)
    embs, norms = [], []
    for x in (batch.xa, batch.xp, batch.xn):
        e, n = _normalize_rows(x @ projection.T)
        embs.append(e)
        norms.append(n)
    ea, ep, en = embs
    hinge = margin - (ea * ep).sum(axis=1) + (ea * en).sum(axis=1)
    active = hinge > 0.0
    m = len(hinge)
    loss = float(np.where(active, hinge, 0.0).sum() / m)
    w = active[:, None] / m
    d_e = (w * (en - ep), w * -ea, w * ea)
    for x, e, n, de in zip((batch.xa, batch.xp, batch.xn), embs, norms, d_e):
        live = n[:, 0] > 0.0
        # Jacobian of z/|z| is (I - e e^T) / |z|.
        dz = (de - e * (de * e).sum(axis=1, keepdims=True)) / np.where(live[:, None], n, 1.0)
        dz[~live] = 0.0
        grads += dz.T @ x
    return loss, grads


def finetune(
    state: EncoderState,
    triplets: Sequence[Triplet],
    rounds: int = 95,
    lr: float = 0.01,
) -> EncoderState:
    """Full-batch Adam descent on the mean triplet loss.

    Returns a new state; ``loss_history[k]`` is the loss evaluated before
    update ``k``.
    """
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    if rounds == 0:
        return dataclasses.replace(state, projection=state.projection.copy(), loss_history=list(state.loss_history))
    if not triplets:
        raise ValueError("fine-tuning needs at least one triplet")
    batch = _batch(state, triplets)
    proj = state.projection.copy()
    opt = AdamState.like([proj], lr)
    history = []
    for r in range(rounds):
        loss, grad = batch_triplet_loss(proj, state.margin, batch)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)) or not np.all(np.isfinite(proj)):
            raise FloatingPointError(
                f"triplet fine-tuning diverged at round {r + 1}: loss={loss}, "
                f"max|P|={np.abs(proj).max():.3g}, lr={lr}"
            )
        history.append(loss)
        adam_step([proj], [grad], opt)
    logger.info("fine-tuned encoder: loss %.4f -> %.4f over %d rounds", history[0], history[-1], rounds)
    return dataclasses.replace(state, projection=proj, version=state.version + 1, loss_history=history)


class EmbeddingCache:
    """Thread-safe memo of ``encode`` keyed by (state version, text)."""

    def __init__(self):
        self._store: dict[tuple[int, str], np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, state: EncoderState, text: str) -> np.ndarray:
        key = (state.version, text)
        cached = self._store.get(key)
        if cached is not None:
            self.hits += 1
            return cached
        vec = encode(state, text)
        vec.setflags(write=False)
        with self._lock:
            self._store.setdefault(key, vec)
            self.misses += 1
        return self._store[key]

    def __len__(self) -> int:
        return len(self._store)


def save_encoder(state: EncoderState, path: str | Path) -> None:
    data = {
        "format_version": FORMAT_VERSION,
        "vocab_dim": state.vocab_dim,
        "dim": state.dim,
        "margin": state.margin,
        "version": state.version,
        "synonym_hash": synonym_table_hash(),
        "loss_history": state.loss_history,
        "projection": state.projection.tolist(),
    }
    Path(path).write_text(json.dumps(data))


def load_encoder(path: str | Path) -> EncoderState:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported encoder checkpoint format {data.get('format_version')!r}")
    if data["synonym_hash"] != synonym_table_hash():
        raise ValueError("encoder checkpoint was built with a different synonym table")
    proj = np.asarray(data["projection"], dtype=np.float64).reshape(data["dim"], data["vocab_dim"])
    return EncoderState(proj, data["vocab_dim"], data["margin"], data["version"], list(data["loss_history"]))
