"""Command-line entry points: train depth models, render stills and
animations, benchmark the pipeline steps, and serve the interactive viewer.

Everything honors --seed (weight init and ray sampling) so runs reproduce
bit-for-bit; --threads (or NEDF_THREADS) caps pipeline worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import imgio, pipeline
from .errors import FormatError, SceneValidationError, TrainingDiverged
from .fields import AnalyticOracle, BoxPrim, Sphere, Torus
from .geometry import vec3
from .model import PROFILES, TrainProfile, evaluate, new_model, save_nedf, train
from .scene import load_scene

CANONICAL_GEOMETRY = {
    "sphere": lambda: Sphere(vec3(0, 0, 0), 1.0),
    "box": lambda: BoxPrim(vec3(0, 0, 0), vec3(0.8, 0.5, 0.6)),
    "torus": lambda: Torus(vec3(0, 0, 0), 0.7, 0.25),
}


def cmd_train(args) -> int:
    oracle = AnalyticOracle(CANONICAL_GEOMETRY[args.geometry]())
    profile = PROFILES[args.profile]
    if args.iterations is not None or args.batch_size is not None:
        profile = TrainProfile(
            d_feat=profile.d_feat, n_blocks=profile.n_blocks,
            batch_size=args.batch_size or profile.batch_size,
            iterations=args.iterations if args.iterations is not None else profile.iterations,
            lr=args.lr or profile.lr)
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {out.parent}")
    rng = np.random.default_rng(args.seed)
    model = new_model(oracle, rng, profile=profile, relax_factor=args.relax)
    losses = train(model, oracle, rng, iterations=profile.iterations,
                   batch_size=profile.batch_size, lr=profile.lr,
                   sampler_mode=args.sampler)
    save_nedf(model, out)
    stats = evaluate(model, oracle, np.random.default_rng(args.seed + 1),
                     sampler_mode=args.sampler)
    print(f"trained {args.geometry} for {profile.iterations} iterations "
          f"(batch {profile.batch_size}, lr {profile.lr})")
    if losses:
        print(f"loss: first {losses[0]:.4f}  last {losses[-1]:.4f}  "
              f"min {min(losses):.4f}")
    print(f"held-out: median depth error {stats['median_depth_error']:.6f} "
          f"({stats['median_depth_error'] / stats['fine_bin_width']:.1f} fine bins), "
          f"p90 {stats['p90_depth_error']:.6f}, "
          f"mask accuracy {stats['mask_accuracy']:.4f}")
    print(f"wrote {out}")
    return 0


def _render_once(desc, config, time_point=None):
    scene = desc.instantiate(time=time_point)
    camera = desc.camera()
    lights = desc.build_lights()
    return pipeline.compose_frame(scene, camera, lights, config)


def _apply_render_flags(desc, args):
    config = desc.render_config()
    if args.shadows is not None:
        config.shadows = args.shadows == "on"
    if args.resample is not None:
        config.resample = args.resample == "on"
    return config


def cmd_render(args) -> int:
    desc = load_scene(args.scene)
    config = _apply_render_flags(desc, args)
    result = _render_once(desc, config, time_point=args.time)
    prefix = Path(args.out)
    if not prefix.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {prefix.parent}")
    imgio.write_color_png(prefix.with_suffix(".png"), result.image)
    imgio.write_ppm(prefix.with_suffix(".ppm"), result.image)
    written = [prefix.with_suffix(".png"), prefix.with_suffix(".ppm")]
    if args.buffers:
        b = result.buffers
        imgio.write_depth_raw(prefix.parent / f"{prefix.name}_depth.ndpt", b.depth)
        (prefix.parent / f"{prefix.name}_depth.png").write_bytes(imgio.encode_depth_png(b.depth))
        (prefix.parent / f"{prefix.name}_id.png").write_bytes(imgio.encode_id_png(b.id))
        written += [prefix.parent / f"{prefix.name}_depth.ndpt",
                    prefix.parent / f"{prefix.name}_depth.png",
                    prefix.parent / f"{prefix.name}_id.png"]
        if config.shadows:
            (prefix.parent / f"{prefix.name}_shadow.png").write_bytes(
                imgio.encode_gray_png(b.shadow))
            written.append(prefix.parent / f"{prefix.name}_shadow.png")
    for path in written:
        print(f"wrote {path}")
    t = result.timing
    print(f"steps: depth/id {t['step1_depth_id']:.3f}s, shading {t['step2_shading']:.3f}s, "
          f"shadows {t['step3_shadow']:.3f}s, resample ratio {t['resample_ratio']:.4f}")
    return 0


def cmd_animate(args) -> int:
    desc = load_scene(args.scene)
    config = _apply_render_flags(desc, args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_frames = max(1, int(round((args.t1 - args.t0) * args.fps)))
    rows = []
    for i in range(n_frames):
        t = args.t0 + i / args.fps
        result = _render_once(desc, config, time_point=t)
        frame_path = out_dir / f"frame_{i:04d}.png"
        imgio.write_color_png(frame_path, result.image)
        rows.append({"frame": i, "time": t,
                     "step1_depth_id": result.timing["step1_depth_id"],
                     "step2_shading": result.timing["step2_shading"],
                     "step3_shadow": result.timing["step3_shadow"],
                     "resample_ratio": result.timing["resample_ratio"]})
    csv_path = out_dir / "timing.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {n_frames} frames and {csv_path}")
    return 0


def cmd_bench(args) -> int:
    desc = load_scene(args.scene)
    config = _apply_render_flags(desc, args)
    scene = desc.instantiate()
    report = pipeline.step_timing_report(scene, desc.camera(), desc.build_lights(),
                                         config, repetitions=args.repetitions)
    report["scene"] = str(args.scene)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    desc = load_scene(args.scene)
    app = create_app(desc)
    if args.ui:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=args.ui, html=True), name="ui")
    print(f"serving on http://{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nedf",
        description="depth-field renderer: train, render, animate, bench, serve")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--threads", type=int, default=None,
                       help="pipeline worker threads (or NEDF_THREADS)")

    p = sub.add_parser("train", help="distill a depth model from geometry")
    p.add_argument("--geometry", choices=sorted(CANONICAL_GEOMETRY), default="sphere")
    p.add_argument("--out", required=True, help="output model path (.nedm)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--relax", type=float, default=1.5, help="bounding-box relaxation")
    p.add_argument("--sampler", choices=("direct", "views"), default="direct")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one frame of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--shadows", choices=("on", "off"), default=None)
    p.add_argument("--resample", choices=("on", "off"), default=None)
    p.add_argument("--buffers", action="store_true", help="also write depth/id/shadow planes")
    p.add_argument("--time", type=float, default=None, help="animation time to pose")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("animate", help="render an animated frame sequence")
    p.add_argument("--scene", required=True)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--t1", type=float, default=5.0)
    p.add_argument("--fps", type=float, default=24.0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shadows", choices=("on", "off"), default=None)
    p.add_argument("--resample", choices=("on", "off"), default=None)
    common(p)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("bench", help="time the pipeline steps")
    p.add_argument("--scene", required=True)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--shadows", choices=("on", "off"), default=None)
    p.add_argument("--resample", choices=("on", "off"), default=None)
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="serve the interactive composition API")
    p.add_argument("--scene", required=True)
    p.add_argument("--port", type=int, default=7870)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", default=None, help="static viewer directory to mount at /")
    common(p)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    pipeline.set_thread_count(pipeline.thread_count_from_env(args.threads))
    try:
        return args.func(args)
    except (SceneValidationError, FormatError, TrainingDiverged,
            OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
