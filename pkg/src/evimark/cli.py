"""Command-line entry points: world building, prefix training, generation,
detection, attacks, experiment runs, and benchmarks.

Every failure exits nonzero after printing a machine-readable error record
(JSON, one line) to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .detect import AttackSpec, attack, load_synonym_table, score_text
from .engine import WatermarkConfig, generate, write_run_jsonl
from .harness import (ExperimentConfig, TimingConfig, WorldSpec, build_world,
                      compute_scene_weights, load_world, run_experiment,
                      save_world, time_components)
from .prefixtune import TrainConfig, save_prefix, save_trace_csv, train_prefix


def _dataclass_from_dict(cls, data: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ValueError(f"unknown {cls.__name__} field: {key}")
        target = fields[key].type
        if key in ("world", "accounting_world"):
            value = _dataclass_from_dict(WorldSpec, value)
        elif key == "train":
            value = _dataclass_from_dict(TrainConfig, value)
        elif key == "watermark":
            value = _dataclass_from_dict(WatermarkConfig, value)
        elif key == "attacks":
            value = tuple(AttackSpec(**a) for a in value)
        elif key == "secret_key" and isinstance(value, str):
            value = value.encode("utf-8")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _load_config(path: str, cls):
    with open(path, "r", encoding="utf-8") as f:
        return _dataclass_from_dict(cls, json.load(f))


def _read_token_file(path: str) -> list[list[int]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append([int(t) for t in line.split()])
    return out


def _write_token_file(path: str, sequences: list[list[int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(" ".join(str(t) for t in seq) + "\n")


def _cmd_world_build(args) -> int:
    spec = _load_config(args.config, WorldSpec) if args.config else WorldSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    world = build_world(spec)
    save_world(world, args.out)
    print(json.dumps({"world_dir": args.out, "vocab_size": spec.vocab_size,
                      "scenes": spec.n_scenes}))
    return 0


def _cmd_prefix_train(args) -> int:
    world = load_world(args.world)
    cfg = _load_config(args.config, TrainConfig) if args.config else TrainConfig(
        learning_rate=args.lr, steps=args.steps)
    corpus = world.corpus()
    if args.scene is not None:
        corpus = [corpus[args.scene]]
    phi, trace = train_prefix(world.lm, corpus, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_prefix(phi, os.path.join(args.out, "prefix.txt"), tau=cfg.tau, seed=cfg.seed)
    save_trace_csv(trace, os.path.join(args.out, "trace.csv"))
    print(json.dumps({"final_loss": trace.losses[-1] if trace.losses else None,
                      "steps": len(trace.losses), "skipped": trace.skipped,
                      "out": args.out}))
    return 0


def _watermark_config(args) -> WatermarkConfig:
    if args.config:
        cfg = _load_config(args.config, WatermarkConfig)
    else:
        cfg = WatermarkConfig()
    over = {}
    for name in ("alpha", "beta", "gamma", "lambda_base", "max_tokens"):
        value = getattr(args, name, None)
        if value is not None:
            over[name] = value
    if args.key is not None:
        over["secret_key"] = args.key.encode("utf-8")
    if args.seed is not None:
        over["rng_seed"] = args.seed
    return replace(cfg, **over) if over else cfg


def _cmd_generate(args) -> int:
    world = load_world(args.world)
    cfg = _watermark_config(args)
    train_cfg = TrainConfig(learning_rate=0.2, steps=120)
    weights, extract_ns = compute_scene_weights(world, train_cfg)
    if os.path.exists(args.out):
        os.remove(args.out)
    sequences = []
    for i in range(args.texts):
        s = i % len(world.scenes)
        run_cfg = replace(cfg, rng_seed=cfg.rng_seed + i)
        tokens, records = generate(world.lm, world.scenes[s], weights[s], run_cfg,
                                   extract_ns=extract_ns[s])
        write_run_jsonl(args.out, tokens, records, run_cfg, meta={"scene": s})
        sequences.append(tokens)
    if args.tokens_out:
        _write_token_file(args.tokens_out, sequences)
    print(json.dumps({"texts": args.texts, "out": args.out}))
    return 0


def _cmd_detect(args) -> int:
    sequences = _read_token_file(args.tokens)
    reports = [score_text(seq, args.key.encode("utf-8"), args.gamma,
                          args.context_width, vocab_size=args.vocab_size,
                          threshold=args.threshold)
               for seq in sequences]
    with open(args.out, "w", encoding="utf-8") as f:
        for rep in reports:
            f.write(rep.to_json() + "\n")
    n_marked = sum(1 for r in reports if r.decision == "watermarked")
    print(json.dumps({"texts": len(reports), "watermarked": n_marked,
                      "mean_z": float(np.mean([r.z_score for r in reports]))}))
    return 0


def _cmd_attack(args) -> int:
    sequences = _read_token_file(args.tokens)
    world = load_world(args.world)
    table = load_synonym_table(args.synonyms) if args.synonyms else world.synonyms
    spec = AttackSpec(kind=args.kind, rate=args.rate, seed=args.seed,
                      synonym_table=table if args.kind == "substitute" else None)
    attacked = [attack(seq, spec, world.vocab) for seq in sequences]
    _write_token_file(args.out, attacked)
    print(json.dumps({"texts": len(attacked), "kind": args.kind, "rate": args.rate}))
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = _load_config(args.config, ExperimentConfig) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def _cmd_eval_run(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg, out_dir=args.out)
    print(json.dumps({"out": args.out,
                      "conditions": sorted(report.conditions),
                      "baseline_auc": report.conditions["baseline"].auc}))
    return 0


def _cmd_eval_ablate(args) -> int:
    cfg = _experiment_config(args)
    cfg = replace(cfg, ablations=("disable_swap", "disable_calibration",
                                  "uniform_bias", "fixed_entropy"))
    report = run_experiment(cfg, out_dir=args.out)
    print(json.dumps({"out": args.out, "conditions": sorted(report.conditions)}))
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_config(args.config, TimingConfig) if args.config else TimingConfig()
    report = time_components(cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "timing.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(json.dumps({"out": path, "nlogn_fit_r2": report.nlogn_fit_r2,
                      "extract_rel_range": report.extract_rel_range}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evimark",
        description="Evidence-aligned watermarking toolkit for toy grounded generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    world = sub.add_parser("world", help="toy world management")
    world_sub = world.add_subparsers(dest="subcommand", required=True)
    wb = world_sub.add_parser("build", help="build and serialize a toy world")
    wb.add_argument("--config", help="WorldSpec JSON file")
    wb.add_argument("--seed", type=int)
    wb.add_argument("--out", required=True)
    wb.set_defaults(func=_cmd_world_build)

    prefix = sub.add_parser("prefix", help="prefix training")
    prefix_sub = prefix.add_subparsers(dest="subcommand", required=True)
    pt = prefix_sub.add_parser("train", help="train a prefix on the world corpus")
    pt.add_argument("--world", required=True)
    pt.add_argument("--config", help="TrainConfig JSON file")
    pt.add_argument("--scene", type=int, help="train on a single scene")
    pt.add_argument("--lr", type=float, default=0.2)
    pt.add_argument("--steps", type=int, default=120)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=_cmd_prefix_train)

    gen = sub.add_parser("generate", help="generate watermarked texts")
    gen.add_argument("--world", required=True)
    gen.add_argument("--config", help="WatermarkConfig JSON file")
    gen.add_argument("--texts", type=int, default=1)
    gen.add_argument("--alpha", type=float)
    gen.add_argument("--beta", type=float)
    gen.add_argument("--gamma", type=float)
    gen.add_argument("--lambda-base", dest="lambda_base", type=float)
    gen.add_argument("--max-tokens", dest="max_tokens", type=int)
    gen.add_argument("--key")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True, help="run record JSONL path")
    gen.add_argument("--tokens-out", help="optional plain token file")
    gen.set_defaults(func=_cmd_generate)

    det = sub.add_parser("detect", help="score token files for the watermark")
    det.add_argument("--tokens", required=True)
    det.add_argument("--key", required=True)
    det.add_argument("--gamma", type=float, default=0.5)
    det.add_argument("--context-width", dest="context_width", type=int, default=1)
    det.add_argument("--vocab-size", dest="vocab_size", type=int, required=True)
    det.add_argument("--threshold", type=float, default=4.0)
    det.add_argument("--out", required=True)
    det.set_defaults(func=_cmd_detect)

    att = sub.add_parser("attack", help="perturb token files")
    att.add_argument("--tokens", required=True)
    att.add_argument("--world", required=True)
    att.add_argument("--kind", choices=("insert", "delete", "substitute"), required=True)
    att.add_argument("--rate", type=float, default=0.05)
    att.add_argument("--seed", type=int, default=0)
    att.add_argument("--synonyms", help="synonym table file (substitute)")
    att.add_argument("--out", required=True)
    att.set_defaults(func=_cmd_attack)

    ev = sub.add_parser("eval", help="experiment runner")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)
    er = ev_sub.add_parser("run", help="run the configured experiment")
    er.add_argument("--config", help="ExperimentConfig JSON file")
    er.add_argument("--seed", type=int)
    er.add_argument("--out", required=True)
    er.set_defaults(func=_cmd_eval_run)
    ea = ev_sub.add_parser("ablate", help="run with all ablation conditions")
    ea.add_argument("--config", help="ExperimentConfig JSON file")
    ea.add_argument("--seed", type=int)
    ea.add_argument("--out", required=True)
    ea.set_defaults(func=_cmd_eval_ablate)

    bench = sub.add_parser("bench", help="component timing probes")
    bench.add_argument("--config", help="TimingConfig JSON file")
    bench.add_argument("--out", required=True)
    bench.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
