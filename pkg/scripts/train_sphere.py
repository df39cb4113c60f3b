#!/usr/bin/env python3
"""Distill the unit sphere into a depth-field model and report held-out
quality. Writes sphere.nedm next to this script by default.

Usage: python scripts/train_sphere.py [out.nedm] [--iterations N]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from nedf.fields import AnalyticOracle, Sphere
from nedf.geometry import vec3
from nedf.model import PROFILES, evaluate, new_model, save_nedf, train

parser = argparse.ArgumentParser()
parser.add_argument("out", nargs="?", default=str(Path(__file__).parent / "sphere.nedm"))
parser.add_argument("--iterations", type=int, default=PROFILES["desk"].iterations)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
rng = np.random.default_rng(args.seed)
profile = PROFILES["desk"]
model = new_model(oracle, rng, profile=profile)

t0 = time.time()
losses = train(model, oracle, rng, iterations=args.iterations,
               batch_size=profile.batch_size, lr=profile.lr)
print(f"{args.iterations} iterations in {time.time() - t0:.0f}s, "
      f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")

stats = evaluate(model, oracle, np.random.default_rng(args.seed + 1))
bins = stats["median_depth_error"] / stats["fine_bin_width"]
print(f"held-out: mask accuracy {stats['mask_accuracy']:.4f}, "
      f"median depth error {stats['median_depth_error']:.5f} ({bins:.1f} fine bins)")

save_nedf(model, args.out)
print(f"wrote {args.out}")
