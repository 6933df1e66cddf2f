"""Sweep every ablation axis on one shared dataset and print the ordinal checks.

    python3 scripts/run_ablations.py [config.json] [out_dir] [--threads N]
"""

import argparse
from pathlib import Path

from blendcore.experiment import AXES, ExperimentConfig, load_config, run_ablation

p = argparse.ArgumentParser()
p.add_argument("config", nargs="?")
p.add_argument("out", nargs="?", default="runs/ablations")
p.add_argument("--threads", type=int, default=1)
p.add_argument("--axes", default=",".join(AXES))
args = p.parse_args()

cfg = load_config(args.config) if args.config else ExperimentConfig()
means = {}
for axis in args.axes.split(","):
    rows = run_ablation(cfg, axis, args.threads, Path(args.out) / axis)
    print(f"== {axis}")
    for label, ious, dis in rows:
        means[label] = sum(ious) / len(ious)
        print(f"  {label:32s} mean_iou={means[label]:.4f} disagreement={dis:.3f}")

pairs = [
    ("56_4_14/blender", "56_4_1/weighted_sum"),
    ("56_4_14/blender", "56_16_4/assembler"),
    ("56_4_14/blender", "28_4_4/blender"),
    ("56_4_14/blender", "56_1_14/single_basis_sigmoid"),
]
for a, b in pairs:
    if a in means and b in means:
        m = means[a] - means[b]
        tag = "ok" if m >= 0.01 else ("FLAGGED (margin < 0.01)" if m >= 0 else "VIOLATED")
        print(f"{a} >= {b}: margin {m:+.4f} {tag}")
