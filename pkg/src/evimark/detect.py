"""Watermark detection (green-hit z statistic, accuracy, ROC/AUC) and the
three text-space attacks (insert, delete, synonym substitute).

Detection recomputes the keyed partition from the observed context alone, so
it needs no model access and is oblivious to any generation-time swap; the
swap preserves the green-list size, which is what keeps the null intact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (EmbeddingTable, PartitionSeed, Vocabulary, green_list_size,
                   seed_partition)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionReport:
    total_scored: int
    green_hits: int
    gamma: float
    z_score: float
    decision_threshold: float
    decision: str

    def to_json(self) -> str:
        return json.dumps({
            "total_scored": self.total_scored, "green_hits": self.green_hits,
            "gamma": self.gamma, "z_score": self.z_score,
            "decision_threshold": self.decision_threshold, "decision": self.decision,
        }, sort_keys=True)


@dataclass(frozen=True, eq=False)
class AttackSpec:
    """One text-space attack: kind, token-modification rate, and rng seed."""

    kind: str
    rate: float = 0.05
    seed: int = 0
    synonym_table: Optional[Mapping[int, tuple[int, ...]]] = None

    def __post_init__(self):
        if self.kind not in ("insert", "delete", "substitute"):
            raise ValueError("kind must be insert, delete or substitute")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        if self.synonym_table is not None:
            for tok, syns in self.synonym_table.items():
                if tok in syns:
                    raise ValueError("synonym sets must exclude the key itself")
                if len(syns) == 0:
                    raise ValueError("empty synonym set")


def score_text(tokens: Sequence[int], key: bytes, gamma: float,
               context_width: int = 1, *, vocab_size: int,
               threshold: float = 4.0) -> DetectionReport:
    """Green-hit z test over every position with a full in-text context.

    Positions t >= context_width are scored against the partition seeded by
    the preceding h tokens; the binomial null uses the effective green ratio
    ceil(gamma*|V|)/|V| (identical to gamma whenever gamma*|V| is integral).
    """
    h = context_width
    toks = [int(t) for t in tokens]
    if len(toks) < h + 1:
        raise ValueError("insufficient tokens")
    g_eff = green_list_size(vocab_size, gamma) / vocab_size
    if g_eff >= 1.0:
        raise ValueError("degenerate green ratio")
    vocab = _bare_vocab(vocab_size)
    hits = 0
    total = 0
    for t in range(h, len(toks)):
        part = seed_partition(PartitionSeed(key, tuple(toks[t - h:t]), h), vocab, gamma)
        total += 1
        if toks[t] in part.green:
            hits += 1
    z = (hits - g_eff * total) / math.sqrt(total * g_eff * (1.0 - g_eff))
    return DetectionReport(
        total_scored=total, green_hits=hits, gamma=gamma, z_score=z,
        decision_threshold=threshold,
        decision="watermarked" if z > threshold else "clean")


def token_green_flags(tokens: Sequence[int], key: bytes, gamma: float,
                      context_width: int = 1, *, vocab_size: int) -> list[Optional[bool]]:
    """Per-position green membership; None marks unscorable prefix positions."""
    h = context_width
    toks = [int(t) for t in tokens]
    vocab = _bare_vocab(vocab_size)
    flags: list[Optional[bool]] = [None] * min(h, len(toks))
    for t in range(h, len(toks)):
        part = seed_partition(PartitionSeed(key, tuple(toks[t - h:t]), h), vocab, gamma)
        flags.append(toks[t] in part.green)
    return flags


_VOCAB_CACHE: dict[int, Vocabulary] = {}


def _bare_vocab(vocab_size: int) -> Vocabulary:
    # partition seeding only needs the size; tags are irrelevant to detection
    if vocab_size not in _VOCAB_CACHE:
        _VOCAB_CACHE[vocab_size] = Vocabulary(
            size=vocab_size, tags=("OTHER",) * vocab_size)
    return _VOCAB_CACHE[vocab_size]


def auc(scores_watermarked: Sequence[float], scores_clean: Sequence[float]) -> float:
    """P(random watermarked score > random clean score), ties counted half.

    Rank-based Mann-Whitney computation; exactly equal to the pairwise
    enumeration including tie handling.
    """
    wm = np.asarray(scores_watermarked, dtype=np.float64)
    cl = np.asarray(scores_clean, dtype=np.float64)
    if wm.size == 0 or cl.size == 0:
        raise ValueError("both score sets must be non-empty")
    combined = np.concatenate([wm, cl])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    ranks[order] = np.arange(1, combined.size + 1)
    # average ranks over tie groups
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    u = ranks[:wm.size].sum() - wm.size * (wm.size + 1) / 2.0
    return float(u / (wm.size * cl.size))


def roc_points(scores_watermarked: Sequence[float],
               scores_clean: Sequence[float]) -> list[tuple[float, float, float]]:
    """Full ROC curve as (fpr, tpr, threshold) triples, threshold descending."""
    wm = np.asarray(scores_watermarked, dtype=np.float64)
    cl = np.asarray(scores_clean, dtype=np.float64)
    thresholds = np.unique(np.concatenate([wm, cl]))[::-1]
    points = [(0.0, 0.0, float("inf"))]
    for th in thresholds:
        tpr = float((wm >= th).mean())
        fpr = float((cl >= th).mean())
        points.append((fpr, tpr, float(th)))
    if points[-1][:2] != (1.0, 1.0):
        points.append((1.0, 1.0, float("-inf")))
    return points


def write_roc_csv(points: Sequence[tuple[float, float, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, th in points:
            f.write(f"{fpr!r},{tpr!r},{th!r}\n")


def accuracy_at_threshold(scores_watermarked: Sequence[float],
                          scores_clean: Sequence[float], threshold: float) -> float:
    """(TP + TN) / total when 'score > threshold' labels a text watermarked."""
    wm = np.asarray(scores_watermarked, dtype=np.float64)
    cl = np.asarray(scores_clean, dtype=np.float64)
    if wm.size == 0 or cl.size == 0:
        raise ValueError("both score sets must be non-empty")
    tp = int((wm > threshold).sum())
    tn = int((cl <= threshold).sum())
    return (tp + tn) / (wm.size + cl.size)


def best_balanced_accuracy(scores_watermarked: Sequence[float],
                           scores_clean: Sequence[float]) -> tuple[float, float]:
    """(threshold, balanced accuracy) maximizing (TPR + TNR)/2 over midpoints."""
    wm = np.asarray(scores_watermarked, dtype=np.float64)
    cl = np.asarray(scores_clean, dtype=np.float64)
    values = np.unique(np.concatenate([wm, cl]))
    cuts = [values[0] - 1.0]
    cuts += [(a + b) / 2.0 for a, b in zip(values[:-1], values[1:])]
    cuts.append(values[-1] + 1.0)
    best_th, best_bal = cuts[0], -1.0
    for th in cuts:
        tpr = float((wm > th).mean())
        tnr = float((cl <= th).mean())
        bal = (tpr + tnr) / 2.0
        if bal > best_bal:
            best_bal, best_th = bal, th
    return best_th, best_bal


def attack(tokens: Sequence[int], spec: AttackSpec, vocab: Vocabulary) -> list[int]:
    """Apply exactly floor(rate * len) edits at seed-determined positions.

    insert draws uniform tokens at random gaps, delete removes positions, and
    substitute replaces victims from their synonym sets (tokens without
    synonyms are skipped and another position drawn, up to len attempts).
    """
    toks = [int(t) for t in tokens]
    n = len(toks)
    budget = math.floor(spec.rate * n)
    if budget == 0:
        return toks
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "insert":
        positions = sorted(rng.integers(0, n + 1, size=budget).tolist(), reverse=True)
        new_tokens = rng.integers(0, vocab.size, size=budget).tolist()
        out = list(toks)
        for pos, tok in zip(positions, new_tokens):
            out.insert(pos, int(tok))
        return out

    if spec.kind == "delete":
        victims = set(rng.choice(n, size=budget, replace=False).tolist())
        return [t for i, t in enumerate(toks) if i not in victims]

    table = spec.synonym_table
    if table is None:
        raise ValueError("substitute attack needs a synonym table")
    out = list(toks)
    order = rng.permutation(n).tolist()
    done = 0
    attempts = 0
    for pos in order:
        if done >= budget or attempts >= n:
            break
        attempts += 1
        syns = table.get(out[pos])
        if not syns:
            continue
        out[pos] = int(syns[int(rng.integers(0, len(syns)))])
        done += 1
    if done < budget:
        logger.warning("substitute attack exhausted: %d of %d replacements applied",
                       done, budget)
    return out


def build_synonym_table(vocab: Vocabulary, emb: EmbeddingTable,
                        top_k: int = 3,
                        exclude: frozenset[int] = frozenset()) -> dict[int, tuple[int, ...]]:
    """Nearest-neighbour synonyms: top_k by cosine within the same tag class.

    Excluded ids (control tokens) get no synonyms and are never offered as one.
    """
    vecs = emb.vectors / np.linalg.norm(emb.vectors, axis=1, keepdims=True)
    by_tag: dict[str, list[int]] = {}
    for tok in range(vocab.size):
        if tok in exclude:
            continue
        by_tag.setdefault(vocab.tags[tok], []).append(tok)
    table: dict[int, tuple[int, ...]] = {}
    for tag, members in by_tag.items():
        if len(members) < 2:
            continue
        ids = np.array(members)
        sims = vecs[ids] @ vecs[ids].T
        np.fill_diagonal(sims, -np.inf)
        k = min(top_k, len(members) - 1)
        for row, tok in enumerate(members):
            nn = np.argsort(-sims[row], kind="stable")[:k]
            table[tok] = tuple(int(ids[j]) for j in nn)
    return table


def save_synonym_table(table: Mapping[int, tuple[int, ...]], path: str) -> None:
    """Text format: token id, tab, comma-separated synonym ids."""
    with open(path, "w", encoding="utf-8") as f:
        for tok in sorted(table):
            f.write(f"{tok}\t{','.join(str(s) for s in table[tok])}\n")


def load_synonym_table(path: str) -> dict[int, tuple[int, ...]]:
    table: dict[int, tuple[int, ...]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            tok, syns = line.split("\t")
            table[int(tok)] = tuple(int(s) for s in syns.split(","))
    return table
