#!/usr/bin/env python3
"""Per-step timing breakdown of the render pipeline on the demo scenes,
with and without outlier resampling.

Usage: python scripts/bench_steps.py [--repetitions N]
"""

import argparse
import json
from pathlib import Path

from nedf.pipeline import step_timing_report
from nedf.scene import load_scene

parser = argparse.ArgumentParser()
parser.add_argument("--repetitions", type=int, default=3)
args = parser.parse_args()

for name in ("two_spheres", "carousel"):
    desc = load_scene(Path(__file__).parent / "scenes" / f"{name}.json")
    for resample in (False, True):
        config = desc.render_config()
        config.resample = resample
        report = step_timing_report(desc.instantiate(), desc.camera(),
                                    desc.build_lights(), config,
                                    repetitions=args.repetitions)
        tag = "resample on " if resample else "resample off"
        shares = {k: f"{v['share']:.0%}" for k, v in report["steps"].items()}
        print(f"{name:12s} [{tag}] total {report['total_seconds']:.2f}s "
              f"shares {json.dumps(shares)} "
              f"resampled {report['resample_ratio']:.1%} of pixels")
