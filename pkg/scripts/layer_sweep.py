"""Accuracy of attention pruning at every layer K, next to random pruning and the unpruned baseline.

Wider than the committed sweep (which only covers K=6 and K=1); useful to see
where in depth the saliency ranking starts to find the queried cells.
"""
import argparse
import dataclasses

from diffprune.experiment import SweepSpec, load_config, run_sweep

p = argparse.ArgumentParser()
p.add_argument("--config", default="configs/reference.json")
p.add_argument("--out", default="results/layer_sweep")
p.add_argument("--eval-size", type=int, default=300)
p.add_argument("--workers", type=int, default=1)
args = p.parse_args()

cfg = load_config(args.config)
layers = list(range(1, cfg.model.layers))
points = [{"K": k, "R": "ring", "strategy": "attention", "T": 2} for k in layers]
points.append({"K": layers[-1], "R": "ring", "strategy": "random", "T": 2})
cfg = dataclasses.replace(cfg, sweep=SweepSpec(points=points), eval_size=args.eval_size)
report = run_sweep(cfg, out=args.out, workers=args.workers)
for e in report["points"]:
    a = e["accuracy"]
    name = "baseline" if e["strategy"] == "none" else f"{e['strategy']} K={e['K']}"
    print(f"{name:<16} median {a['median']:.4f}  iqr {a['iqr']:.4f}  flops {e['remaining_flops_pct']:.1f}%")
