"""Analytic remaining-FLOPs table for the large-model preset, plus the step-count trend."""
import argparse

from diffprune.flops import PRESETS, limit_remaining_pct, preset_report

p = argparse.ArgumentParser()
p.add_argument("--preset", default="llada-v-like", choices=sorted(PRESETS))
args = p.parse_args()

pre = PRESETS[args.preset]
print(f"{'K':>3} {'R':>4} {'target':>7} {'remaining':>10}")
for (K, R), want in pre["targets"].items():
    rep = preset_report(args.preset, K, R)
    print(f"{K:>3} {R:>4} {want:>6.0f}% {rep.remaining_pct:>9.1f}%")
print()
print("remaining % as the number of steps grows (K=15, R=0.5)")
for T in (1, 2, 4, 8, 16, 64, 256):
    print(f"  T={T:<4} {preset_report(args.preset, 15, 0.5, steps=T).remaining_pct:6.2f}%")
print(f"  limit  {limit_remaining_pct(pre['model'], pre['composition'], 0.5):6.2f}%")
for note in pre["notes"]:
    print(f"note: {note}")
