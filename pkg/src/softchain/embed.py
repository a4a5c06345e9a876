"""Trainable symbol embeddings and the RBF kernel used for soft unification."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .kb import Vocab

CHECKPOINT_FORMAT = "softchain-embeddings"
CHECKPOINT_VERSION = 1


def rbf_kernel(x: np.ndarray, y: np.ndarray, mu: float = 1.0) -> float:
    """``exp(-||x - y||^2 / (2 mu^2))``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-np.dot(d, d) / (2.0 * mu * mu)))


def rbf_kernel_grad(x: np.ndarray, y: np.ndarray, mu: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`rbf_kernel` with respect to ``x`` and ``y``."""
    k = rbf_kernel(x, y, mu)
    gx = k * (np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)) / (mu * mu)
    return gx, -gx


class EmbeddingStore:
    """Row ``i`` of :attr:`vectors` is the embedding of symbol id ``i``."""

    def __init__(self, vectors: np.ndarray, mu: float = 1.0) -> None:
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("vectors must be 2-d")
        if mu <= 0:
            raise ValueError("bandwidth mu must be positive")
        self.vectors = vectors
        self.mu = float(mu)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, sid: int) -> np.ndarray:
        return self.vectors[sid]

    def __setitem__(self, sid: int, value: np.ndarray) -> None:
        self.vectors[sid] = value

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(self.vectors.copy(), self.mu)

    def kernel(self, a: int, b: int) -> float:
        return rbf_kernel(self.vectors[a], self.vectors[b], self.mu)

    def kernel_row(self, a: int, ids: np.ndarray | None = None) -> np.ndarray:
        """Kernel between symbol ``a`` and every symbol (or just ``ids``)."""
        other = self.vectors if ids is None else self.vectors[ids]
        d = other - self.vectors[a]
        return np.exp(-np.einsum("ij,ij->i", d, d) / (2.0 * self.mu * self.mu))

    def grow(self, n: int, rng: np.random.Generator) -> None:
        """Append embeddings until there are ``n`` rows."""
        extra = n - len(self)
        if extra > 0:
            self.vectors = np.vstack([self.vectors, rng.standard_normal((extra, self.dim))])

    # -- checkpoints ---------------------------------------------------------

    def to_json(self, vocab: Vocab, **extra) -> dict:
        if len(vocab) != len(self):
            raise ValueError("vocabulary and store sizes differ")
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "mu": self.mu,
            "symbols": [[s.name, s.kind, self.vectors[s.id].tolist()] for s in vocab],
            **extra,
        }

    def save(self, path: str | Path, vocab: Vocab, **extra) -> None:
        Path(path).write_text(json.dumps(self.to_json(vocab, **extra)))


def load_checkpoint(path: str | Path) -> tuple["EmbeddingStore", Vocab, dict]:
    """Read a checkpoint written by :meth:`EmbeddingStore.save`.

    Returns the store, its vocabulary (ids in file order) and the raw payload,
    which may carry extra keys such as learned rules.
    """
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an embedding checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    vocab = Vocab()
    rows = []
    for name, kind, vec in payload["symbols"]:
        vocab.intern(name, kind)
        rows.append(vec)
    dim = int(payload["dim"])
    vectors = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return EmbeddingStore(vectors, payload["mu"]), vocab, payload


def init_embeddings(vocab: Vocab, dim: int = 100, seed: int = 0, mu: float = 1.0) -> EmbeddingStore:
    """i.i.d. standard normal coordinates, deterministic in ``seed``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    return EmbeddingStore(rng.standard_normal((len(vocab), dim)), mu)
