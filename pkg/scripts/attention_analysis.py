"""Attention allocation, efficiency and concentration-by-layer for the reference checkpoint."""
import argparse
import dataclasses

from diffprune.experiment import load_config, run_analyze

p = argparse.ArgumentParser()
p.add_argument("--config", default="configs/reference.json")
p.add_argument("--out", default="results/analysis")
args = p.parse_args()

cfg = dataclasses.replace(load_config(args.config), out=args.out)
res = run_analyze(cfg)
for mode, conc in res["concentration"].items():
    print(f"{mode:<14}" + " ".join(f"{c:.3f}" for c in conc))
for row in res["allocation"]["bidirectional"]["layers"]:
    s = row["shares"]
    print(f"layer {row['layer']}: " + ", ".join(f"{k} {v:.3f}" for k, v in sorted(s.items())))
