"""Command-line surface: generate | train | render | eval | freq | gradcheck.

Every command prints its resolved configuration before doing work, writes
outputs only under --out, and exits with a distinct code per failure class:
2 usage, 3 missing file, 4 schema violation, 5 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_RUNTIME = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _print_config(name, cfg: dict):
    print(f"[{name}] resolved config: {json.dumps(cfg, sort_keys=True, default=str)}", flush=True)


def _require(path, kind="file"):
    if not Path(path).exists():
        print(f"error: missing: {kind} not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING)
    return Path(path)


def _workers(args) -> int:
    if getattr(args, "serial", False):
        return 1
    return max(1, int(os.environ.get("POSEFIELD_WORKERS", "1")))


def cmd_generate(args):
    from .synthetic import default_scene, generate_dataset, load_scene

    if args.scene == "default":
        scene = default_scene()
    else:
        scene = load_scene(_require(args.scene, "scene file"))
    _print_config("generate", {"scene": args.scene, "out": args.out, "seed": args.seed, **scene.to_dict()})
    generate_dataset(scene, args.out, seed=args.seed)
    print(f"[generate] wrote dataset to {args.out}")
    return 0


def cmd_train(args):
    from .synthetic import Dataset
    from .trainer import TrainConfig, train

    _require(args.data, "dataset directory")
    cfg = TrainConfig()
    if args.config:
        doc = json.loads(_require(args.config, "config file").read_text())
        cfg = TrainConfig.from_dict(doc)
    if args.mode:
        cfg.mode = args.mode
    if args.iterations:
        cfg.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    if args.cull:
        cfg.model.cull = args.cull == "on"
    _print_config("train", cfg.to_dict())
    dataset = Dataset(args.data)
    train(dataset, cfg, args.out)
    print(f"[train] final checkpoint: {Path(args.out) / 'checkpoint_final.pft'}")
    return 0


def _load_model(ckpt_path, config_path=None, mode=None):
    from .checkpoint import load_checkpoint
    from .model import AvatarModel, ModelConfig, apply_ablation
    from .synthetic import SceneSpec

    ckpt = _require(ckpt_path, "checkpoint")
    sidecar = Path(config_path) if config_path else ckpt.parent / "run_config.json"
    doc = json.loads(_require(sidecar, "run config sidecar").read_text())
    model_config = ModelConfig.from_dict(doc["model_config"])
    if mode:
        model_config = apply_ablation(model_config, mode)
    scene = SceneSpec.from_dict(doc["scene"])
    model = AvatarModel(model_config, scene.topology)
    arrays, _ = load_checkpoint(ckpt)
    model.load_state_dict(arrays)
    return model, scene


def cmd_render(args):
    from PIL import Image

    from .renderer import load_cameras
    from .skeleton import load_poses
    from .trainer import render_frame
    from .synthetic import Frame

    model, scene = _load_model(args.ckpt, args.config, args.mode)
    cameras = load_cameras(_require(args.camera, "camera file"))
    poses = load_poses(_require(args.pose, "pose file"))
    _print_config(
        "render",
        {"ckpt": args.ckpt, "camera": args.camera, "pose": args.pose, "frame": args.frame,
         "camera_index": args.camera_index, "mode": args.mode or model.config.mode, "out": args.out},
    )
    frame = Frame(0, None, None, cameras[args.camera_index], poses[args.frame], "render")
    img, alpha = render_frame(model, frame, scene, n_samples=args.samples or scene.samples_per_ray)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)).save(out)
    if args.hdr:
        np.save(out.with_suffix(".npy"), img.astype(np.float32))
    print(f"[render] wrote {out}")
    return 0


def cmd_eval(args):
    from .synthetic import Dataset, oracle_render
    from .trainer import evaluate_frames, render_frame, write_metric_csv

    dataset = Dataset(_require(args.data, "dataset directory"))
    frames = dataset.split(args.split)
    if not frames:
        print(f"error: schema: split {args.split!r} is empty", file=sys.stderr)
        raise SystemExit(EXIT_SCHEMA)
    _print_config(
        "eval",
        {"data": args.data, "split": args.split, "oracle": args.oracle, "ckpt": args.ckpt, "out": args.out},
    )
    if args.oracle:
        def render_fn(frame):
            return oracle_render(dataset.scene, frame.pose, frame.camera)
    else:
        if not args.ckpt:
            print("error: usage: eval needs --ckpt or --oracle", file=sys.stderr)
            raise SystemExit(EXIT_USAGE)
        model, scene = _load_model(args.ckpt, args.config, args.mode)

        def render_fn(frame):
            return render_frame(model, frame, scene)

    rows = evaluate_frames(render_fn, frames, out_dir=args.render_dir)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(args.out, rows)
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    print(f"[eval] {len(rows)} frames, mean PSNR {mean_psnr:.2f} dB -> {args.out}")
    return 0


def cmd_freq(args):
    from PIL import Image

    from . import metrics

    def load_image(p):
        return np.asarray(Image.open(_require(p, "image")), dtype=np.float64) / 255.0

    a = load_image(args.image)
    b = load_image(args.ref)
    _print_config("freq", {"image": args.image, "ref": args.ref, "out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fa, fb = metrics.frequency_map(a), metrics.frequency_map(b)
    ha, edges = metrics.frequency_histogram(fa)
    hb, _ = metrics.frequency_histogram(fb)
    dist = metrics.f_dist(ha, hb)
    for name, fmap in (("image", fa), ("ref", fb)):
        arr = np.clip(fmap / metrics.FDIST_RANGE[1], 0, 1)
        Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(out / f"freq_{name}.png")
    err = metrics.diverging_colormap(fa - fb, scale=0.15)
    Image.fromarray(np.round(err * 255.0).astype(np.uint8)).save(out / "freq_error.png")
    with (out / "histograms.csv").open("w") as fh:
        fh.write("bin_low,bin_high,image_mass,ref_mass\n")
        for lo, hi, ma, mb in zip(edges[:-1], edges[1:], ha, hb):
            fh.write(f"{lo:.6f},{hi:.6f},{ma:.8f},{mb:.8f}\n")
    (out / "f_dist.json").write_text(json.dumps({"f_dist": dist}))
    print(f"[freq] F-Dist = {dist:.6f} -> {out}")
    return 0


def cmd_gradcheck(args):
    from .checks import run_gradcheck

    _print_config("gradcheck", {"module": args.module or "all"})
    results = run_gradcheck(args.module)
    ok = True
    for name, err in results.items():
        status = "ok" if err <= 1e-4 else "FAIL"
        ok &= err <= 1e-4
        print(f"[gradcheck] {name:14s} max_rel_err = {err:.3e}  {status}")
    return 0 if ok else EXIT_RUNTIME


def build_parser():
    p = _Parser(prog="posefield", description="Pose-modulated neural radiance fields, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--scene", default="default", help="scene JSON path or 'default'")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--serial", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["full", "only_gnn", "only_syn", "only_spatial", "only_feature", "no_window"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--cull", choices=["on", "off"], help="validity culling (off: evaluate all samples, zero invalid)")
    t.add_argument("--serial", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--camera", required=True, help="camera JSON file")
    r.add_argument("--pose", required=True, help="pose JSON file")
    r.add_argument("--out", required=True, help="output PNG")
    r.add_argument("--mode")
    r.add_argument("--config", help="run config sidecar (default: next to ckpt)")
    r.add_argument("--frame", type=int, default=0, help="pose index in the pose file")
    r.add_argument("--camera-index", type=int, default=0)
    r.add_argument("--samples", type=int)
    r.add_argument("--hdr", action="store_true", help="also dump float32 .npy")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="score renders against a dataset split")
    e.add_argument("--ckpt")
    e.add_argument("--config")
    e.add_argument("--mode")
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True, choices=["train", "novel_view", "novel_pose"])
    e.add_argument("--out", required=True, help="output CSV")
    e.add_argument("--render-dir", help="also dump renders and frequency error maps")
    e.add_argument("--oracle", action="store_true", help="score the analytic oracle instead of a checkpoint")
    e.add_argument("--serial", action="store_true")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("freq", help="frequency maps, histograms and F-Dist for two images")
    f.add_argument("--image", required=True)
    f.add_argument("--ref", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_freq)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--module", help="one of tensor|skeleton|pose_encoder|window|backbone|renderer|pipeline")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .skeleton import SchemaError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except SchemaError as e:
        print(f"error: schema: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as e:
        print(f"error: missing: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
