"""Vocabulary, embeddings, probability utilities, and keyed vocabulary partitioning.

Everything in this module is an immutable value or a pure function; the
generator, detector, and trainer all build on these primitives and may call
them from any number of workers without coordination.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

TAG_NOUN = "NOUN"
TAG_ADJ = "ADJ"
TAG_OTHER = "OTHER"
TAG_ENTITY = "ENTITY"

# splitmix64 constants, fixed so partitions are bit-identical across machines.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)


def is_nounlike(tag: str) -> bool:
    """Entity-class tags name objects, so they fill the noun slot in chunking."""
    return tag == TAG_NOUN or tag.startswith(TAG_ENTITY)


def green_list_size(vocab_size: int, gamma: float) -> int:
    """Green-list size is always the ceiling of gamma*|V|, everywhere."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return math.ceil(gamma * vocab_size)


@dataclass(frozen=True)
class Vocabulary:
    """Dense token universe 0..size-1 with exactly one lexical tag per token."""

    size: int
    tags: tuple[str, ...]
    surface_forms: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if len(self.tags) != self.size:
            raise ValueError("exactly one tag per token required")
        if self.surface_forms is not None and len(self.surface_forms) != self.size:
            raise ValueError("surface_forms must cover the whole vocabulary")

    @property
    def tokens(self) -> range:
        return range(self.size)

    def tag(self, token: int) -> str:
        return self.tags[token]

    @cached_property
    def entity_ids(self) -> frozenset[int]:
        return frozenset(i for i, t in enumerate(self.tags) if t.startswith(TAG_ENTITY))


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Unit-free token embeddings; row i is the vector for token i.

    entity_vectors optionally stores precomputed phrase embeddings keyed by the
    phrase's token tuple; phrases without an entry are mean-pooled on demand.
    """

    dim: int
    vectors: np.ndarray
    entity_vectors: Mapping[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ValueError(f"embedding matrix must be (|V|, {self.dim})")
        norms = np.linalg.norm(arr, axis=1)
        if not np.all(norms > 0.0):
            raise ValueError("zero embedding vector")
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    def embed_phrase(self, phrase: Sequence[int]) -> np.ndarray:
        """Phrase embedding: stored vector if present, else the token mean."""
        key = tuple(int(t) for t in phrase)
        if key in self.entity_vectors:
            return np.asarray(self.entity_vectors[key], dtype=np.float64)
        if not key:
            raise ValueError("empty phrase")
        return self.vectors[list(key)].mean(axis=0)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax(logits / temperature).

    Raises on non-finite input ("invalid logits") and non-positive temperature.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("invalid logits")
    z = arr / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Stable log of softmax(logits / temperature); shares softmax's checks."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("invalid logits")
    z = arr / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def validate_probs(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Check the probability-vector invariants (entries >= 0, sum 1 within tol)."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or abs(arr.sum() - 1.0) > tol:
        raise ValueError("invalid probability vector")
    return arr


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero vectors have no direction."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError("cosine requires vectors of identical length")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("undefined cosine")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class PartitionSeed:
    """Deterministic seed material: secret key plus the last h context tokens."""

    secret_key: bytes
    prev_tokens: tuple[int, ...]
    context_width: int = 1

    def __post_init__(self):
        if len(self.secret_key) == 0:
            raise ValueError("missing watermark key")
        if self.context_width < 1:
            raise ValueError("context_width must be >= 1")
        if len(self.prev_tokens) > self.context_width:
            raise ValueError("more context tokens than context_width")

    def derive(self) -> int:
        """64-bit seed = blake2b(key, prev token ids), stable across platforms."""
        data = b"".join(int(t).to_bytes(8, "little", signed=True) for t in self.prev_tokens)
        digest = hashlib.blake2b(data, key=self.secret_key[:64], digest_size=8).digest()
        return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Partition:
    """Green/red split of the vocabulary at a fixed green ratio gamma."""

    green: frozenset[int]
    red: frozenset[int]
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.green & self.red:
            raise ValueError("green and red lists overlap")

    @property
    def vocab_size(self) -> int:
        return len(self.green) + len(self.red)

    @cached_property
    def green_ids(self) -> np.ndarray:
        """Sorted green token ids as an array (for vectorised bias application)."""
        arr = np.fromiter(sorted(self.green), dtype=np.int64, count=len(self.green))
        arr.setflags(write=False)
        return arr


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; numpy uint64 arithmetic wraps mod 2^64.
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX_A
    z ^= z >> np.uint64(27)
    z *= _MIX_B
    z ^= z >> np.uint64(31)
    return z


@lru_cache(maxsize=1 << 13)
def _partition_for(secret_key: bytes, prev_tokens: tuple[int, ...], context_width: int,
                   vocab_size: int, gamma: float) -> Partition:
    seed = np.uint64(PartitionSeed(secret_key, prev_tokens, context_width).derive())
    ids = np.arange(vocab_size, dtype=np.uint64)
    with np.errstate(over="ignore"):
        hashes = _mix64((ids + np.uint64(1)) * _GOLDEN ^ seed)
    # Sorting token ids by keyed per-token hash is the deterministic shuffle;
    # stable sort breaks (astronomically rare) hash ties by token id.
    order = np.argsort(hashes, kind="stable")
    gsize = green_list_size(vocab_size, gamma)
    green = frozenset(order[:gsize].tolist())
    red = frozenset(order[gsize:].tolist())
    return Partition(green=green, red=red, gamma=gamma)


def seed_partition(seed: PartitionSeed, vocab: Vocabulary, gamma: float) -> Partition:
    """Keyed pseudo-random partition with |green| = ceil(gamma*|V|) exactly.

    Pure function of (key, prev_tokens, |V|, gamma); identical inputs always
    reproduce the identical partition. Partitions are memoized since contexts
    repeat heavily during generation and detection.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return _partition_for(seed.secret_key, tuple(int(t) for t in seed.prev_tokens),
                          seed.context_width, vocab.size, gamma)


def clear_partition_cache() -> None:
    _partition_for.cache_clear()
