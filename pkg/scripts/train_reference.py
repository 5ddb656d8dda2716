"""Train the reference checkpoint into results/reference/ (about an hour on one core)."""
import argparse
import json

from diffprune.experiment import load_config, run_train

p = argparse.ArgumentParser()
p.add_argument("--config", default="configs/reference.json")
args = p.parse_args()
summary = run_train(load_config(args.config), progress=lambda r: print(json.dumps(r), flush=True))
print(json.dumps(summary, indent=2))
