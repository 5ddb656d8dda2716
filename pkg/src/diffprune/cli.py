"""Command-line harness: ``diffprune {train,sample,sweep,flops,analyze}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .flops import PRESETS
from .model import load_checkpoint
from .numerics import OpCounter
from .pruning import PruneSchedule
from .sampler import GenerationConfig, generate
from .training import MASK, TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def _load(args) -> ex.ExperimentConfig:
    if not args.config:
        raise ex.ConfigError("--config is required for this subcommand")
    cfg = ex.load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
        updates["train"] = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out:
        updates["out"] = args.out
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    summary = ex.run_train(cfg, progress=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load(args)
    mcfg, params, _ = ex._require_checkpoint(cfg.checkpoint)
    seed = cfg.seeds[0]
    prompt, answer = cfg.task.split(seed, 1, stream="sample")[0]
    g = cfg.generation
    prune = PruneSchedule(**g["prune"]) if g.get("prune") else None
    gcfg = GenerationConfig(cfg.task.gen_len, g.get("steps", 2), seed=seed, prune=prune)
    counter = OpCounter()
    out, trace = generate(mcfg, params, prompt, cfg.task.layout, gcfg, counter, mask_id=MASK)
    print(json.dumps({"response": out.tolist(), "answer": answer.tolist(),
                      "correct": out.tolist() == answer.tolist(),
                      "block_mul_adds": counter.block_mul_adds()}, sort_keys=True))
    if args.trace:
        path = Path(cfg.out) / "trace.json"
        ex._atomic_write(path, json.dumps(trace.to_dict(), indent=2, sort_keys=True) + "\n")
        print(f"trace written to {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.retrain:
        ex.run_train(cfg)
    report = ex.run_sweep(cfg, workers=args.workers)
    for e in report["points"]:
        a = e["accuracy"]
        print(f"{e['label']:<40} median acc {a['median']:.4f}  remaining {e['remaining_flops_pct']:.1f}%")
    for w in report["warnings"]:
        print(f"warning: {w}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _load(args) if args.config else None
    if cfg is None and not args.preset:
        raise ex.ConfigError("flops needs --config or --preset")
    out = args.out or (cfg.out if cfg else None)
    reports = ex.run_flops_report(cfg, preset=args.preset, out=out)
    for r in reports:
        a = r.assumptions
        tag = "no prune" if a["K"] is None else f"K={a['K']} R={a['R']:.4g}"
        print(f"{tag:<16} T={a['T']:<4} {r.summary()}")
    if reports and reports[0].notes:
        for n in reports[0].notes:
            print(f"note: {n}")
    if not out:
        print(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load(args)
    res = ex.run_analyze(cfg)
    print(f"wrote {len(res['heatmaps'])} heatmaps to {cfg.out}")
    for mode, conc in res["concentration"].items():
        print(f"{mode:<14} concentration by layer: " + " ".join(f"{c:.3f}" for c in conc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffprune", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in [("train", cmd_train), ("sample", cmd_sample), ("sweep", cmd_sweep),
                     ("flops", cmd_flops), ("analyze", cmd_analyze)]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(func=fn)
        if name == "sample":
            sp.add_argument("--trace", action="store_true", help="write the sampler trace as JSON")
        if name == "sweep":
            sp.add_argument("--retrain", action="store_true", help="train the checkpoint first")
            sp.add_argument("--workers", type=int, help="parallel evaluation workers")
        if name == "flops":
            sp.add_argument("--preset", choices=sorted(PRESETS))
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ex.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
