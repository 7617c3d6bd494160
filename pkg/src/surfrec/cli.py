"""Command-line pipeline: synth, train, render, extract-mesh, eval."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data, geometry, metrics, trainer
from .renderer import RenderConfig, render_frame


def _add_common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="fixed reduction order (single-threaded torch)")
    p.add_argument("--threads", type=int, default=None,
                   help="torch worker threads (default: available parallelism)")


def _apply_common(args):
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
    elif getattr(args, "threads", None):
        torch.set_num_threads(args.threads)


def _load_config(args):
    """Precedence: CLI flag > config file > built-in defaults."""
    if getattr(args, "config", None):
        cfg = trainer.TrainConfig.from_json(Path(args.config).read_text())
    elif getattr(args, "desk_scale", False):
        cfg = trainer.TrainConfig.desk_scale()
    else:
        cfg = trainer.TrainConfig()
    if getattr(args, "iters", None) is not None:
        cfg.iterations = args.iters
    if getattr(args, "rays", None) is not None:
        cfg.rays_per_batch = args.rays
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    return cfg


def _load_fieldset(ckpt):
    state, cfg = trainer.load_state(ckpt)
    return state.fieldset, cfg


def cmd_synth(args):
    preset = data.SCENE_PRESETS[args.preset]
    scene = data.SyntheticScene(**preset, n_frames=args.frames, res=args.res,
                                tool_mask=args.tool_mask)
    data.generate_synthetic(scene, args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_train(args):
    _apply_common(args)
    cfg = _load_config(args)
    ds = data.load_dataset(args.data)
    if args.train_split:
        train_frames, _ = metrics.split_dataset(ds)
        ds = data.Dataset(frames=train_frames, norm=ds.norm,
                          mm_per_unit=ds.mm_per_unit, path=ds.path)
    state = None
    if args.resume:
        state, cfg = trainer.load_state(args.resume)
    trainer.train(ds, cfg, args.out, state=state)
    print(f"final checkpoint: {Path(args.out) / 'final.srfc'}")
    return 0


def cmd_render(args):
    _apply_common(args)
    fieldset, cfg = _load_fieldset(args.ckpt)
    ds = data.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = ds.frames if args.frame is None else [ds.frames[args.frame]]
    for fr in frames:
        r = render_frame(fieldset, fr, cfg.render_config())
        _save_image(out / f"color_{fr.index:04d}.png", r["color"])
        _save_image(out / f"normal_{fr.index:04d}.png",
                    0.5 * (r["normal"] + 1.0))
        d = r["depth"]
        dmax = d.max() or 1.0
        _save_image(out / f"depth_{fr.index:04d}.png", d / dmax)
        data._write_depth(out / f"depth_{fr.index:04d}.bin",
                          d * ds.norm.scale)
    print(f"rendered {len(frames)} frame(s) to {out}")
    return 0


def cmd_extract_mesh(args):
    _apply_common(args)
    fieldset, _ = _load_fieldset(args.ckpt)
    grid = geometry.sample_grid(fieldset, t=args.time, resolution=args.res)
    mesh = geometry.marching_cubes(grid, iso=0.0)
    if args.data:
        norm = data.load_dataset(args.data).norm
        mesh = geometry.transform_mesh(mesh, scale=norm.scale,
                                       center=norm.center)
    out = Path(args.out)
    geometry.save_obj(out, mesh)
    geometry.save_ply(out.with_suffix(".ply"), mesh)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {out}")
    return 0


def cmd_eval(args):
    _apply_common(args)
    fieldset, cfg = _load_fieldset(args.ckpt)
    ds = data.load_dataset(args.data)
    report = metrics.evaluate(fieldset, ds, cfg.render_config(),
                              split=args.split, out_dir=args.out)
    avg = report["average"]
    print("frame,psnr,ssim,rmse,pcd")
    for r in report["frames"] + [avg]:
        print(f"{r['frame']},{r['psnr']:.4f},{r['ssim']:.4f},"
              f"{r['rmse']:.6f},{r['pcd']:.6f}")
    return 0


def _save_image(path, arr):
    Image.fromarray(np.clip(np.asarray(arr) * 255.0 + 0.5, 0, 255)
                    .astype(np.uint8)).save(path)


def build_parser():
    p = argparse.ArgumentParser(prog="surfrec",
                                description="deformable surface reconstruction "
                                            "from masked RGBD video")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--preset", choices=sorted(data.SCENE_PRESETS), required=True)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--res", type=int, default=64)
    s.add_argument("--tool-mask", action="store_true")
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit the fields to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="TrainConfig JSON file")
    s.add_argument("--desk-scale", action="store_true",
                   help="CPU-sized preset (small nets, 5k iterations)")
    s.add_argument("--iters", type=int)
    s.add_argument("--rays", type=int)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--train-split", action="store_true",
                   help="train only on the 7:1 training split")
    _add_common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render color/depth/normal maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frame", type=int)
    _add_common(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("extract-mesh", help="marching-cubes mesh from the SDF")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--time", type=float, default=None,
                   help="timestamp for an observed-space mesh (default: canonical)")
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--data", help="dataset dir, for de-normalization")
    s.add_argument("--out", required=True, help="output .obj path")
    _add_common(s)
    s.set_defaults(func=cmd_extract_mesh)

    s = sub.add_parser("eval", help="metrics over a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("--out")
    _add_common(s)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        return args.func(args)
    except Exception as e:  # one-line machine-parsable failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
