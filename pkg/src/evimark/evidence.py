"""Visual-evidence pipeline: entity extraction, relevance scoring, training
targets for the offline path, and contrastive weight extraction for inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import TAG_ADJ, EmbeddingTable, Vocabulary, is_nounlike

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class EntitySet:
    """Entity phrases in first-occurrence order, each a tuple of token ids."""

    entities: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(set(self.entities)) != len(self.entities):
            raise ValueError("duplicate entity phrases")
        if any(len(e) == 0 for e in self.entities):
            raise ValueError("empty entity phrase")

    def __len__(self) -> int:
        return len(self.entities)


@dataclass(frozen=True, eq=False)
class TrainTarget:
    """Label logits l_orig + kappa * delta_train for the prefix trainer."""

    delta_train: np.ndarray
    kappa: float
    l_label: np.ndarray

    def __post_init__(self):
        delta = np.asarray(self.delta_train, dtype=np.float64)
        if np.any(np.abs(delta) > 1.0 + 1e-12):
            raise ValueError("target offsets must lie in [-1, 1]")


@dataclass(frozen=True, eq=False)
class EvidenceWeights:
    """Per-token evidence weights w(i) in (0, 1) plus the standardization stats."""

    w: np.ndarray
    mu: float
    sigma: float

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.w, dtype=np.float64))
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise ValueError("evidence weights must lie strictly in (0, 1)")
        arr.setflags(write=False)
        object.__setattr__(self, "w", arr)


def extract_entities(caption: Sequence[int], vocab: Vocabulary) -> EntitySet:
    """Chunk the caption into maximal ADJ* NOUN+ runs over the tag table.

    Entity-class tokens fill the noun slot. Duplicate phrases collapse to
    their first occurrence; tokens with no tag entry would be OTHER, but the
    tag table is total by construction.
    """
    tags = []
    for tok in caption:
        if not 0 <= int(tok) < vocab.size:
            raise ValueError(f"token id {tok} outside vocabulary")
        tags.append(vocab.tags[int(tok)])

    entities: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    i = 0
    n = len(caption)
    while i < n:
        j = i
        while j < n and tags[j] == TAG_ADJ:
            j += 1
        if j < n and is_nounlike(tags[j]):
            k = j
            while k < n and is_nounlike(tags[k]):
                k += 1
            phrase = tuple(int(t) for t in caption[i:k])
            if phrase not in seen:
                seen.add(phrase)
                entities.append(phrase)
            i = k
        else:
            # adjectives with no following noun are not a chunk
            i = j + 1 if j > i else i + 1
    return EntitySet(entities=tuple(entities))


def relevance_scores(entities: EntitySet, emb: EmbeddingTable) -> np.ndarray:
    """s_i = max over entities of cosine(entity embedding, token embedding)."""
    if len(entities) == 0:
        raise ValueError("no visual evidence")
    vecs = emb.vectors
    norms = np.linalg.norm(vecs, axis=1)
    best = np.full(vecs.shape[0], -1.0)
    for phrase in entities.entities:
        e = emb.embed_phrase(phrase)
        ne = np.linalg.norm(e)
        if ne == 0.0:
            raise ValueError("undefined cosine")
        sims = vecs @ e / (norms * ne)
        np.maximum(best, sims, out=best)
    return np.clip(best, -1.0, 1.0)


def target_offsets(s: np.ndarray) -> np.ndarray:
    """Standardize relevance scores (population stats) and clip to [-1, 1].

    A degenerate spread (sigma < 1e-12) returns the all-zero vector so the
    downstream target collapses to the unweighted case.
    """
    arr = np.asarray(s, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least 2 scores")
    mu = arr.mean()
    sigma = arr.std()
    if sigma < STD_FLOOR:
        return np.zeros_like(arr)
    return np.clip((arr - mu) / sigma, -1.0, 1.0)


def make_train_target(l_orig: np.ndarray, delta_train: np.ndarray,
                      kappa: float = 10.0) -> TrainTarget:
    """Label logits l_orig + kappa * delta_train; kappa defaults to 10.0."""
    if kappa <= 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    l = np.asarray(l_orig, dtype=np.float64)
    d = np.asarray(delta_train, dtype=np.float64)
    if l.shape != d.shape:
        raise ValueError("logit vector and offset vector lengths differ")
    return TrainTarget(delta_train=d, kappa=kappa, l_label=l + kappa * d)


def contrastive_weights(l_prefix: np.ndarray, l_orig: np.ndarray) -> EvidenceWeights:
    """w(i) = sigmoid of the standardized prefix-vs-original logit difference.

    Computed once per scene and reused for every generation step. Population
    mean/std; a degenerate spread yields the neutral weight 0.5 everywhere.
    """
    lp = np.asarray(l_prefix, dtype=np.float64)
    lo = np.asarray(l_orig, dtype=np.float64)
    if lp.shape != lo.shape:
        raise ValueError("logit vector lengths differ")
    diff = lp - lo
    mu = float(diff.mean())
    sigma = float(diff.std())
    if sigma < STD_FLOOR:
        w = np.full_like(diff, 0.5)
    else:
        z = (diff - mu) / sigma
        w = 1.0 / (1.0 + np.exp(-z))
    return EvidenceWeights(w=w, mu=mu, sigma=sigma)


def save_weights(weights: EvidenceWeights, path: str) -> None:
    """Flat numeric export, one weight per line (full float64 precision)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# mu={float(weights.mu)!r} sigma={float(weights.sigma)!r}\n")
        for v in weights.w:
            f.write(f"{float(v)!r}\n")


def load_weights(path: str) -> EvidenceWeights:
    mu = sigma = 0.0
    values: list[float] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line.startswith("#"):
                parts = dict(kv.split("=") for kv in line[1:].split())
                mu, sigma = float(parts["mu"]), float(parts["sigma"])
            elif line:
                values.append(float(line))
    return EvidenceWeights(w=np.array(values), mu=mu, sigma=sigma)


def save_caption_corpus(path: str, records: Sequence[tuple[int, Sequence[int]]]) -> None:
    """One record per line: scene id, tab, space-separated caption token ids."""
    with open(path, "w", encoding="utf-8") as f:
        for scene_id, caption in records:
            f.write(f"{scene_id}\t{' '.join(str(int(t)) for t in caption)}\n")


def load_caption_corpus(path: str) -> list[tuple[int, list[int]]]:
    out: list[tuple[int, list[int]]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            scene_id, toks = line.split("\t")
            out.append((int(scene_id), [int(t) for t in toks.split()]))
    return out
