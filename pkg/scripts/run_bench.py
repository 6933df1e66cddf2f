"""Blend-stage vs RoI-head latency with an SVG plot.

    python3 scripts/run_bench.py [out_dir]
"""

import sys

from blendcore import cli

out = sys.argv[1] if len(sys.argv) > 1 else "runs/bench"
sys.exit(cli.main(["bench", "--svg", "--out", out]))
