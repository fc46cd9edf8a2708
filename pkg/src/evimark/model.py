"""Toy grounded language model: bigram backbone plus additive scene conditioning.

The backbone is a frozen |V|x|V| table of transition logits so that every
downstream quantity is an exact lookup; a scene raises the logits of its
present entities by visual_gain * salience, and a trainable prefix vector
couples into the logits through a fixed random projection.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .core import EmbeddingTable, Vocabulary, softmax

_MAGIC = b"EVIMARK-TOYLM-1\n"


@dataclass(frozen=True, eq=False)
class Scene:
    """Visual input: present entities with salience, plus plausible distractors."""

    present: dict[int, float]
    absent: frozenset[int]

    def __post_init__(self):
        if set(self.present) & self.absent:
            raise ValueError("present and absent entities overlap")
        for tok, sal in self.present.items():
            if not 0.0 < sal <= 1.0:
                raise ValueError(f"salience must lie in (0, 1], got {sal} for token {tok}")

    @cached_property
    def present_ids(self) -> np.ndarray:
        arr = np.fromiter(sorted(self.present), dtype=np.int64, count=len(self.present))
        arr.setflags(write=False)
        return arr

    @cached_property
    def saliences(self) -> np.ndarray:
        arr = np.array([self.present[int(t)] for t in self.present_ids], dtype=np.float64)
        arr.setflags(write=False)
        return arr

    def validate_against(self, vocab: Vocabulary) -> None:
        ids = set(self.present) | set(self.absent)
        if not ids <= vocab.entity_ids:
            raise ValueError("scene references non-entity tokens")


@dataclass(frozen=True, eq=False)
class ToyLM:
    """Frozen toy LVLM stand-in; all operations are pure lookups."""

    vocab: Vocabulary
    embeddings: EmbeddingTable
    bigram_scores: np.ndarray
    visual_gain: float
    projection: np.ndarray
    bos_token: int = 0
    eos_token: Optional[int] = None

    def __post_init__(self):
        big = np.ascontiguousarray(np.asarray(self.bigram_scores, dtype=np.float64))
        proj = np.ascontiguousarray(np.asarray(self.projection, dtype=np.float64))
        v = self.vocab.size
        if big.shape != (v, v):
            raise ValueError(f"bigram_scores must be ({v}, {v})")
        if not np.all(np.isfinite(big)):
            raise ValueError("bigram_scores must be finite")
        if proj.shape != (v, self.embeddings.dim):
            raise ValueError(f"projection must be ({v}, {self.embeddings.dim})")
        norms = np.linalg.norm(proj, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("projection rows must have unit norm")
        if self.visual_gain <= 0.0:
            raise ValueError("visual_gain must be positive")
        big.setflags(write=False)
        proj.setflags(write=False)
        object.__setattr__(self, "bigram_scores", big)
        object.__setattr__(self, "projection", proj)

    @property
    def dim(self) -> int:
        return self.embeddings.dim

    def control_ids(self) -> frozenset[int]:
        ids = {self.bos_token}
        if self.eos_token is not None:
            ids.add(self.eos_token)
        return frozenset(ids)


@dataclass(frozen=True)
class PrefixVector:
    """Trainable prefix, collapsed to one d-vector in the micro model.

    length_budget records the virtual prefix count the vector stands in for;
    it is metadata only and does not change any computation.
    """

    phi: np.ndarray
    length_budget: int = 84

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.phi, dtype=np.float64))
        if arr.ndim != 1:
            raise ValueError("phi must be a flat vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("phi must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "phi", arr)


def next_logits(lm: ToyLM, scene: Scene, prev_token: int) -> np.ndarray:
    """Next-token logits: bigram row plus visual_gain * salience on present entities."""
    if not 0 <= prev_token < lm.vocab.size:
        raise ValueError(f"token id {prev_token} outside vocabulary")
    out = lm.bigram_scores[prev_token].copy()
    if len(scene.present) > 0:
        out[scene.present_ids] += lm.visual_gain * scene.saliences
    return out


def next_logits_with_prefix(lm: ToyLM, scene: Scene, prev_token: int,
                            prefix: PrefixVector) -> np.ndarray:
    """Prefix-conditioned logits: next_logits + projection @ phi.

    The backbone tables are read-only; only phi varies under training.
    """
    if prefix.phi.shape != (lm.dim,):
        raise ValueError(f"prefix dimension {prefix.phi.shape} != ({lm.dim},)")
    return next_logits(lm, scene, prev_token) + lm.projection @ prefix.phi


def perplexity(lm: ToyLM, scene: Scene, tokens: Sequence[int]) -> float:
    """exp(mean NLL) of the sequence under the scene-conditioned model.

    The first token is conditioned on the reserved BOS token.
    """
    if len(tokens) == 0:
        raise ValueError("perplexity of an empty sequence is undefined")
    prev = lm.bos_token
    total = 0.0
    for tok in tokens:
        p = softmax(next_logits(lm, scene, prev))[tok]
        if p <= 0.0:
            raise ValueError("zero-probability token")
        total += float(np.log(p))
        prev = int(tok)
    return float(np.exp(-total / len(tokens)))


def hallucination_rate(scene: Scene, tokens: Sequence[int], vocab: Vocabulary) -> float:
    """Fraction of generated entity-class tokens that the scene does not contain.

    0.0 by convention when the sequence contains no entity tokens.
    """
    entity_ids = vocab.entity_ids
    n_entity = 0
    n_halluc = 0
    for tok in tokens:
        if int(tok) in entity_ids:
            n_entity += 1
            if int(tok) not in scene.present:
                n_halluc += 1
    if n_entity == 0:
        return 0.0
    return n_halluc / n_entity


def _write_array(buf: io.BufferedIOBase, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf.write(len(data).to_bytes(8, "little"))
    buf.write(data)


def _read_array(buf: io.BufferedIOBase, shape: tuple[int, ...]) -> np.ndarray:
    n = int.from_bytes(buf.read(8), "little")
    arr = np.frombuffer(buf.read(n), dtype="<f8").reshape(shape)
    return arr.copy()


def save_toylm(lm: ToyLM, path: str) -> None:
    """Serialize to a self-describing binary file with deterministic bytes.

    Layout: magic, JSON header line (sizes, gain, control tokens, tags,
    surface forms), then raw little-endian float64 blocks for embeddings,
    bigram table, and projection.
    """
    header = {
        "vocab_size": lm.vocab.size,
        "dim": lm.dim,
        "visual_gain": lm.visual_gain,
        "bos_token": lm.bos_token,
        "eos_token": lm.eos_token,
        "tags": list(lm.vocab.tags),
        "surface_forms": list(lm.vocab.surface_forms) if lm.vocab.surface_forms else None,
    }
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        _write_array(f, lm.embeddings.vectors)
        _write_array(f, lm.bigram_scores)
        _write_array(f, lm.projection)


def load_toylm(path: str) -> ToyLM:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a toy model file: {path}")
        header = json.loads(f.readline().decode("utf-8"))
        v, d = header["vocab_size"], header["dim"]
        emb = _read_array(f, (v, d))
        big = _read_array(f, (v, v))
        proj = _read_array(f, (v, d))
    vocab = Vocabulary(
        size=v,
        tags=tuple(header["tags"]),
        surface_forms=tuple(header["surface_forms"]) if header["surface_forms"] else None,
    )
    return ToyLM(
        vocab=vocab,
        embeddings=EmbeddingTable(dim=d, vectors=emb),
        bigram_scores=big,
        visual_gain=header["visual_gain"],
        projection=proj,
        bos_token=header["bos_token"],
        eos_token=header["eos_token"],
    )
