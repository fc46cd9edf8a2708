"""Watermark generator: per-step entropy, uncertainty-scaled evidence swap of
the keyed partition, evidence-calibrated green bias, and sampling.

One generation run is sequential; independent runs over different scenes or
seeds share only read-only inputs and may execute concurrently.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Partition, PartitionSeed, seed_partition, softmax
from .evidence import EvidenceWeights
from .model import Scene, ToyLM, next_logits


@dataclass(frozen=True)
class WatermarkConfig:
    """Generation-time watermark parameters.

    alpha is the evidence-grounded token ratio, beta the perturbation
    strength, gamma the green ratio, lambda_base the fixed base bias;
    swap_margin/swap_cap gate the partition swap (defaults reproduce the
    ungated scheme). disable_swap / disable_calibration / fixed_h_norm are
    the structural ablation switches.
    """

    alpha: float = 0.005
    beta: float = 0.5
    gamma: float = 0.5
    lambda_base: float = 0.5
    swap_margin: float = 0.0
    swap_cap: Optional[int] = None
    context_width: int = 1
    sampling: str = "multinomial"
    temperature: float = 1.0
    max_tokens: int = 200
    secret_key: bytes = b"evimark-default-key"
    rng_seed: int = 0
    disable_swap: bool = False
    disable_calibration: bool = False
    fixed_h_norm: Optional[float] = None

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0 or self.lambda_base < 0.0:
            raise ValueError("alpha, beta and lambda_base must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.swap_margin < 0.0:
            raise ValueError("swap_margin must be nonnegative")
        if self.swap_cap is not None and self.swap_cap < 0:
            raise ValueError("swap_cap must be nonnegative")
        if self.context_width < 1:
            raise ValueError("context_width must be >= 1")
        if self.sampling not in ("greedy", "multinomial"):
            raise ValueError("sampling must be 'greedy' or 'multinomial'")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if len(self.secret_key) == 0:
            raise ValueError("missing watermark key")
        if self.fixed_h_norm is not None and not 0.0 <= self.fixed_h_norm <= 1.0:
            raise ValueError("fixed_h_norm must lie in [0, 1]")

    def key_fingerprint(self) -> str:
        """Public identifier for the secret key; never the key itself."""
        return hashlib.sha256(self.secret_key).hexdigest()[:16]


@dataclass(slots=True)
class StepRecord:
    """Per-step accounting: uncertainty, swap size, detector-view greenness,
    applied bias for the chosen token, and component wall times."""

    token: int
    entropy: float
    h_norm: float
    eta: float
    swapped_in: int
    is_green: bool
    bias_applied: float
    extract_ns: int = 0
    partition_ns: int = 0
    perturb_ns: int = 0


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0*log(0) = 0 convention."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or abs(arr.sum() - 1.0) > 1e-9:
        raise ValueError("invalid probability vector")
    nz = arr[arr > 0.0]
    return float(-(nz * np.log(nz)).sum())


def normalized_entropy(h: float, vocab_size: int) -> float:
    """h / log |V|, clamped to [0, 1] against floating-point overshoot."""
    if h < 0.0:
        raise ValueError("entropy must be nonnegative")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return float(min(max(h / math.log(vocab_size), 0.0), 1.0))


def evidence_ratio(h_norm: float, alpha: float) -> float:
    """eta = alpha * (1 - h_norm): larger when the model is certain."""
    if not 0.0 <= h_norm <= 1.0:
        raise ValueError("h_norm must lie in [0, 1]")
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    return alpha * (1.0 - h_norm)


def candidate_set(w: np.ndarray, eta: float, vocab_size: int) -> frozenset[int]:
    """Top-ceil(eta*|V|) token ids by evidence weight, ties to the smaller id.

    The ranking is over the full vocabulary, exactly as specified; see
    _candidate_set_partial for the output-identical partial-sort shortcut.
    """
    if eta < 0.0:
        raise ValueError("eta must be nonnegative")
    k = math.ceil(eta * vocab_size)
    if k <= 0:
        return frozenset()
    arr = np.asarray(w, dtype=np.float64)
    order = np.argsort(-arr, kind="stable")
    return frozenset(order[:k].tolist())


def _candidate_set_partial(w: np.ndarray, eta: float, vocab_size: int) -> frozenset[int]:
    # argpartition restricted top-K; must stay output-identical to candidate_set
    if eta < 0.0:
        raise ValueError("eta must be nonnegative")
    k = math.ceil(eta * vocab_size)
    if k <= 0:
        return frozenset()
    arr = np.asarray(w, dtype=np.float64)
    if k >= arr.size:
        return frozenset(range(arr.size))
    part = np.argpartition(-arr, k)[: 2 * k if 2 * k < arr.size else arr.size]
    ranked = part[np.lexsort((part, -arr[part]))]
    # re-rank a widened slice so ties at the boundary resolve by token id
    cut = arr[ranked[k - 1]]
    pool = np.flatnonzero(arr >= cut)
    ranked = pool[np.lexsort((pool, -arr[pool]))]
    return frozenset(ranked[:k].tolist())


def swap_partition(part: Partition, cand: frozenset[int], w: np.ndarray,
                   margin: float = 0.0, cap: Optional[int] = None,
                   locked: frozenset[int] = frozenset(),
                   ) -> tuple[Partition, frozenset[int], frozenset[int]]:
    """Swap high-evidence red candidates into green, size preserved.

    Incoming tokens are cand & red, best-weight first (capped); each is paired
    against the current lowest-weight evictable green token, and the pair
    executes only when w(in) - w(out) >= margin. Candidates and locked tokens
    are never evicted. Returns (partition, swapped_in, swapped_out).
    """
    if margin < 0.0:
        raise ValueError("margin must be nonnegative")
    arr = np.asarray(w, dtype=np.float64)
    incoming = sorted(cand & part.red, key=lambda t: (-arr[t], t))
    if cap is not None:
        incoming = incoming[:cap]
    if not incoming:
        return part, frozenset(), frozenset()
    gids = part.green_ids
    eviction_order = np.lexsort((gids, arr[gids]))  # by (weight, id) ascending
    blocked = cand | locked
    a_exec: list[int] = []
    b_exec: list[int] = []
    cursor = iter(eviction_order)
    for tok_in in incoming:
        tok_out = next((int(gids[i]) for i in cursor if int(gids[i]) not in blocked), None)
        if tok_out is None:
            break
        if arr[tok_in] - arr[tok_out] >= margin:
            a_exec.append(tok_in)
            b_exec.append(tok_out)
        else:
            # weight gaps only shrink down the pairing, so stop at first failure
            break
    if not a_exec:
        return part, frozenset(), frozenset()
    a = frozenset(a_exec)
    b = frozenset(b_exec)
    green = (part.green - b) | a
    red = (part.red - a) | b
    return Partition(green=green, red=red, gamma=part.gamma), a, b


def regulating_factor(beta: float, h_norm: float, w_v: float) -> float:
    """psi = beta * h_norm * w(v): uncertainty- and evidence-scaled intensity."""
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    if not 0.0 <= h_norm <= 1.0:
        raise ValueError("h_norm must lie in [0, 1]")
    return beta * h_norm * w_v


def green_bias(lambda_base: float, psi: float) -> float:
    """delta = lambda * psi + lambda; never below the base intensity lambda."""
    if lambda_base < 0.0 or psi < 0.0:
        raise ValueError("lambda_base and psi must be nonnegative")
    return lambda_base * psi + lambda_base


def perturb_logits(l: np.ndarray, part: Partition,
                   biases: Mapping[int, float]) -> np.ndarray:
    """Add the per-token bias to every green logit; red logits stay untouched.

    The bias map must cover exactly the green list; a bias keyed on a red
    token is a wiring error.
    """
    if set(biases.keys()) != part.green:
        raise ValueError("bias/partition mismatch")
    out = np.asarray(l, dtype=np.float64).copy()
    if biases:
        ids = np.fromiter(biases.keys(), dtype=np.int64, count=len(biases))
        vals = np.fromiter(biases.values(), dtype=np.float64, count=len(biases))
        out[ids] += vals
    return out


def _sample(rng: np.random.Generator, probs: np.ndarray) -> int:
    # exactly one uniform draw per step, so matched-seed variants stay aligned
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), probs.size - 1))


def generate(lm: ToyLM, scene: Scene, weights: EvidenceWeights, cfg: WatermarkConfig,
             *, extract_ns: int = 0,
             collect_records: bool = True) -> tuple[list[int], list[StepRecord]]:
    """Generate a watermarked sequence and its per-step records.

    The evidence weights are computed once per scene by the caller (their
    wall time may be passed as extract_ns; it is recorded on the first step).
    is_green is the detector's view: membership in the raw keyed partition
    before any swap. collect_records=False skips the per-step bookkeeping
    (the token stream is unchanged); benchmarks use it to time the watermark
    arithmetic alone.
    """
    v = lm.vocab.size
    if weights.w.shape != (v,):
        raise ValueError("weights length does not match the vocabulary")
    rng = np.random.default_rng(cfg.rng_seed)
    h = cfg.context_width
    locked = lm.control_ids()

    # control tokens carry no visual evidence; force the neutral weight
    w_gen = weights.w.copy()
    for tok in locked:
        w_gen[tok] = 0.5

    # the evidence ranking is fixed for the whole run, so the per-step
    # candidate set is a prefix of one precomputed order (same ranking rule
    # as candidate_set: weight descending, ties to the smaller id)
    w_order = np.argsort(-w_gen, kind="stable")

    context: list[int] = [lm.bos_token]
    tokens: list[int] = []
    records: list[StepRecord] = []
    log_v = math.log(v)

    for step in range(cfg.max_tokens):
        logits = next_logits(lm, scene, context[-1])

        # partition phase: uncertainty measurement, seeding, and swap
        t0 = time.perf_counter_ns()
        probs = softmax(logits, cfg.temperature)
        nz = probs[probs > 0.0]
        h_t = float(-(nz * np.log(nz)).sum())
        h_norm = min(max(h_t / log_v, 0.0), 1.0)
        h_eff = cfg.fixed_h_norm if cfg.fixed_h_norm is not None else h_norm
        prev = tuple(context[-h:])
        part = seed_partition(
            PartitionSeed(cfg.secret_key, prev, h), lm.vocab, cfg.gamma)
        eta = 0.0
        swapped_in: frozenset[int] = frozenset()
        effective = part
        if not cfg.disable_swap:
            eta = evidence_ratio(h_eff, cfg.alpha)
            k = math.ceil(eta * v)
            cand = frozenset(w_order[:k].tolist()) - locked if k > 0 else frozenset()
            effective, swapped_in, _ = swap_partition(
                part, cand, w_gen, cfg.swap_margin, cfg.swap_cap, locked)
        t1 = time.perf_counter_ns()

        gids = effective.green_ids
        if cfg.disable_calibration:
            deltas = np.full(gids.size, cfg.lambda_base)
        else:
            psi = cfg.beta * h_eff * w_gen[gids]
            deltas = cfg.lambda_base * psi + cfg.lambda_base
        biased = logits.copy()
        biased[gids] += deltas
        t2 = time.perf_counter_ns()

        if cfg.sampling == "greedy":
            token = int(np.argmax(biased))
        else:
            token = _sample(rng, softmax(biased, cfg.temperature))

        if collect_records:
            pos = int(np.searchsorted(gids, token))
            applied = float(deltas[pos]) if pos < gids.size and gids[pos] == token else 0.0
            records.append(StepRecord(
                token=token,
                entropy=h_t,
                h_norm=h_norm,
                eta=eta,
                swapped_in=len(swapped_in),
                is_green=token in part.green,
                bias_applied=applied,
                extract_ns=extract_ns if step == 0 else 0,
                partition_ns=t1 - t0,
                perturb_ns=t2 - t1,
            ))
        tokens.append(token)
        context.append(token)
        if lm.eos_token is not None and token == lm.eos_token:
            break
    return tokens, records


def write_run_jsonl(path: str, tokens: Sequence[int], records: Sequence[StepRecord],
                    cfg: WatermarkConfig, meta: Optional[dict] = None) -> None:
    """Record stream: one run_meta line, then one line per step.

    The metadata carries a config hash and the key fingerprint; the raw key
    never reaches disk.
    """
    cfg_dict = {k: (v.hex() if isinstance(v, bytes) else v)
                for k, v in vars(cfg).items() if k != "secret_key"}
    cfg_hash = hashlib.sha256(
        json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]
    head = {"type": "run_meta", "config_hash": cfg_hash,
            "key_fingerprint": cfg.key_fingerprint(),
            "n_tokens": len(tokens), "config": cfg_dict}
    if meta:
        head.update(meta)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps({
                "type": "step", "token": rec.token, "entropy": rec.entropy,
                "h_norm": rec.h_norm, "eta": rec.eta, "swapped_in": rec.swapped_in,
                "is_green": rec.is_green, "bias_applied": rec.bias_applied,
                "extract_ns": rec.extract_ns, "partition_ns": rec.partition_ns,
                "perturb_ns": rec.perturb_ns}) + "\n")
