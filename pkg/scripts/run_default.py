"""Train the default model, then render an overlap scene from its checkpoint.

    python3 scripts/run_default.py [config.json] [out_dir]
"""

import sys
from pathlib import Path

from blendcore import cli
from blendcore import synthdata as SD

config = sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).resolve().parents[1] / "configs" / "default.json")
out = sys.argv[2] if len(sys.argv) > 2 else "runs/default"

code = cli.main(["run", config, "--out", out])
if code:
    sys.exit(code)

spec = SD.DatasetSpec()
scene_id = min(SD.overlap_indices(spec, "val", spec.n_val))
sys.exit(cli.main(["visualize", f"{out}/checkpoint", "--scene", str(scene_id), "--out", f"{out}/viz"]))
