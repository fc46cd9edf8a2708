"""Desk-scale offline prefix trainer.

Optimizes the prefix vector so prefix-conditioned logits match the evidence
target distribution under a tempered KL objective with L2 regularization,
using plain gradient descent so runs are exactly reproducible. A central
finite-difference gradient is provided for verification.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import log_softmax, softmax
from .evidence import (TrainTarget, contrastive_weights, extract_entities,
                       make_train_target, relevance_scores, target_offsets)
from .model import PrefixVector, Scene, ToyLM, next_logits, next_logits_with_prefix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Trainer hyperparameters.

    Defaults mirror the reference setup where meaningful (learning rate 2e-3,
    batch size 8, weight decay 1e-4, kappa 10.0); tau is free and defaults to
    2.0, which tempers the kappa-scaled offsets enough for plain gradient
    descent to converge quickly at desk scale.
    """

    tau: float = 2.0
    lambda_reg: float = 1e-4
    learning_rate: float = 2e-3
    steps: int = 100
    batch_size: int = 8
    kappa: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.lambda_reg < 0.0:
            raise ValueError("lambda_reg must be nonnegative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")


@dataclass
class TrainTrace:
    """Per-step loss and wall clock, plus indices of skipped corpus examples."""

    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def kl_prefix_loss(l_label: np.ndarray, l_phi: np.ndarray, tau: float,
                   lambda_reg: float, phi: PrefixVector) -> float:
    """KL(softmax(l_label/tau) || softmax(l_phi/tau)) + lambda_reg * ||phi||^2."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    l_label = np.asarray(l_label, dtype=np.float64)
    l_phi = np.asarray(l_phi, dtype=np.float64)
    if l_label.shape != l_phi.shape:
        raise ValueError("logit vector lengths differ")
    p = softmax(l_label, tau)
    log_p = log_softmax(l_label, tau)
    log_q = log_softmax(l_phi, tau)
    kl = float(np.sum(np.where(p > 0.0, p * (log_p - log_q), 0.0)))
    reg = lambda_reg * float(phi.phi @ phi.phi)
    return max(kl, 0.0) + reg


def loss_gradient(lm: ToyLM, scene: Scene, target: TrainTarget, phi: PrefixVector,
                  cfg: TrainConfig) -> np.ndarray:
    """Analytic gradient of the single-example loss with respect to phi.

    The prefix enters the logits linearly through the frozen projection M, so
    d loss / d phi = M^T (q - p) / tau + 2 * lambda_reg * phi, with
    q = softmax(l_phi/tau) and p = softmax(l_label/tau).
    """
    l_phi = next_logits_with_prefix(lm, scene, lm.bos_token, phi)
    p = softmax(target.l_label, cfg.tau)
    q = softmax(l_phi, cfg.tau)
    return lm.projection.T @ (q - p) / cfg.tau + 2.0 * cfg.lambda_reg * phi.phi


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float],
                               phi: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences, the independent check on loss_gradient."""
    phi = np.asarray(phi, dtype=np.float64)
    grad = np.zeros_like(phi)
    for j in range(phi.size):
        up = phi.copy()
        dn = phi.copy()
        up[j] += step
        dn[j] -= step
        grad[j] = (loss_fn(up) - loss_fn(dn)) / (2.0 * step)
    return grad


def initialize_prefix(mode: str, seed_embedding: Optional[np.ndarray] = None,
                      dim: Optional[int] = None, length_budget: int = 84) -> PrefixVector:
    """zero -> phi = 0; seeded -> phi = the given embedding (text-style prior)."""
    if mode == "zero":
        if dim is None:
            raise ValueError("zero mode needs the prefix dimension")
        return PrefixVector(phi=np.zeros(dim), length_budget=length_budget)
    if mode == "seeded":
        if seed_embedding is None:
            raise ValueError("seeded mode needs a seed embedding")
        return PrefixVector(phi=np.asarray(seed_embedding, dtype=np.float64),
                            length_budget=length_budget)
    raise ValueError(f"unknown initialization mode: {mode}")


def build_example_target(lm: ToyLM, scene: Scene, caption: Sequence[int],
                         cfg: TrainConfig) -> Optional[TrainTarget]:
    """Run the offline pipeline for one (scene, caption) pair.

    Returns None when the caption yields no entities (the trainer skips such
    examples with a warning rather than failing).
    """
    entities = extract_entities(caption, lm.vocab)
    if len(entities) == 0:
        return None
    s = relevance_scores(entities, lm.embeddings)
    delta = target_offsets(s)
    l_orig = next_logits(lm, scene, lm.bos_token)
    return make_train_target(l_orig, delta, cfg.kappa)


def train_prefix(lm: ToyLM, corpus: Sequence[tuple[Scene, Sequence[int]]],
                 cfg: TrainConfig,
                 init: Optional[PrefixVector] = None) -> tuple[PrefixVector, TrainTrace]:
    """Plain gradient descent on the mean tempered-KL loss over mini-batches.

    Batches cycle through the corpus in order, so identical (corpus, cfg,
    init) reproduce phi bit-exactly. The backbone is never written.
    """
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    trace = TrainTrace()
    examples: list[tuple[Scene, TrainTarget]] = []
    for idx, (scene, caption) in enumerate(corpus):
        target = build_example_target(lm, scene, caption, cfg)
        if target is None:
            trace.skipped.append(idx)
            logger.warning("skipping corpus example %d: empty entity set", idx)
            continue
        examples.append((scene, target))
    if not examples:
        raise ValueError("every corpus example had an empty entity set")

    phi = init if init is not None else initialize_prefix("zero", dim=lm.dim)
    vec = phi.phi.copy()
    n = len(examples)
    bs = min(cfg.batch_size, n)
    cursor = 0
    for _ in range(cfg.steps):
        t0 = time.perf_counter()
        batch = [examples[(cursor + k) % n] for k in range(bs)]
        cursor = (cursor + bs) % n
        cur = replace(phi, phi=vec)
        loss = 0.0
        grad = np.zeros_like(vec)
        for scene, target in batch:
            l_phi = next_logits_with_prefix(lm, scene, lm.bos_token, cur)
            loss += kl_prefix_loss(target.l_label, l_phi, cfg.tau, cfg.lambda_reg, cur)
            grad += loss_gradient(lm, scene, target, cur, cfg)
        loss /= bs
        grad /= bs
        vec = vec - cfg.learning_rate * grad
        trace.losses.append(loss)
        trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
    return replace(phi, phi=vec), trace


def scene_prefix_weights(lm: ToyLM, scene: Scene, caption: Sequence[int],
                         cfg: TrainConfig):
    """Train a micro prefix for one scene and extract its evidence weights.

    The trained prefix plays the offline-distilled extractor; the weight
    extraction itself is two logit evaluations plus standardization and is
    independent of any later generation length.
    """
    phi, trace = train_prefix(lm, [(scene, caption)], cfg)
    l_orig = next_logits(lm, scene, lm.bos_token)
    l_pref = next_logits_with_prefix(lm, scene, lm.bos_token, phi)
    return contrastive_weights(l_pref, l_orig), phi, trace


def save_prefix(prefix: PrefixVector, path: str, tau: float = 0.0, seed: int = 0) -> None:
    """Checkpoint: JSON metadata header then one float per line (round-trip exact)."""
    with open(path, "w", encoding="utf-8") as f:
        meta = {"dim": int(prefix.phi.size), "length_budget": prefix.length_budget,
                "tau": tau, "seed": seed}
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for v in prefix.phi:
            f.write(f"{float(v)!r}\n")


def load_prefix(path: str) -> PrefixVector:
    with open(path, "r", encoding="utf-8") as f:
        meta = json.loads(f.readline())
        values = [float(line) for line in f if line.strip()]
    if len(values) != meta["dim"]:
        raise ValueError("checkpoint dimension mismatch")
    return PrefixVector(phi=np.array(values), length_budget=meta["length_budget"])


def save_trace_csv(trace: TrainTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss,wall_ms\n")
        for i, (loss, ms) in enumerate(zip(trace.losses, trace.wall_ms)):
            f.write(f"{i},{loss!r},{ms!r}\n")
