"""Command-line interface.

Subcommands: ``synth`` (emit a synthetic dataset), ``train`` (progressive
reconstruction), ``render`` (novel views from a checkpoint), ``eval``
(register held-out test poses and report metrics as CSV on stdout), and
``export-poses``. Progress goes to stderr; exit codes are 0 on success,
1 on runtime errors, 2 on bad usage.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import dataio
from .dataio import Config, Dataset
from .errors import EngineError
from .geometry import Intrinsics, Pose, format_pose_line, parse_pose_line, rot6d_to_matrix
from .metrics import aggregate, compute_metrics
from .progressive import ProgressiveTrainer
from . import scene as sc


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldchain")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic dataset")
    sp.add_argument("--scene", choices=sorted(sc.SCENES), default="corridor")
    sp.add_argument("--frames", type=int, default=60)
    sp.add_argument("--out", required=True)
    sp.add_argument("--width", type=int, default=160)
    sp.add_argument("--height", type=int, default=90)
    sp.add_argument("--fov", type=float, default=70.0)
    sp.add_argument("--advance", type=float, default=2.5,
                    help="forward trajectory length (L-infinity)")
    sp.add_argument("--static", action="store_true",
                    help="keep the camera fixed")
    sp.add_argument("--noise-px", type=float, default=0.0)
    sp.add_argument("--depth-corrupt", action="store_true")
    sp.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train", help="run progressive reconstruction")
    tp.add_argument("--input", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--deterministic", action="store_true")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--holdout-every", type=int, default=None)
    tp.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config entry")
    tp.add_argument("--resume", action="store_true",
                    help="continue from the checkpoint in --out")

    rp = sub.add_parser("render", help="render views from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--input", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--poses", default=None,
                    help="pose file; defaults to the registered trajectory")
    rp.add_argument("--offset", default=None, metavar="DX,DY,DZ",
                    help="camera-frame path deviation")
    rp.add_argument("--stride", type=int, default=1)
    rp.add_argument("--n-fg", type=int, default=None)
    rp.add_argument("--n-bg", type=int, default=None)

    ep = sub.add_parser("eval", help="register test poses and report metrics")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--input", required=True)
    ep.add_argument("--out", default=None, help="also write rendered frames")
    ep.add_argument("--test-iters", type=int, default=None)

    xp = sub.add_parser("export-poses", help="write the estimated trajectory")
    xp.add_argument("--checkpoint", required=True)
    xp.add_argument("--input", required=True)
    xp.add_argument("--out", default=None, help="defaults to stdout")
    return p


def cmd_synth(args) -> int:
    scene = sc.SCENES[args.scene]()
    if args.static:
        poses = sc.static_trajectory(args.frames)
    else:
        poses = sc.forward_trajectory(args.frames, advance=args.advance)
    focal = args.width / (2.0 * np.tan(np.deg2rad(args.fov) / 2))
    intr = Intrinsics(width=args.width, height=args.height,
                      focal=np.array([focal]))
    _progress(f"rendering {args.frames} frames of '{args.scene}' "
              f"at {args.width}x{args.height}")
    sc.make_dataset(
        scene, poses, intr, args.out,
        noise_px=args.noise_px, depth_corrupt=args.depth_corrupt,
        seed=args.seed,
    )
    _progress(f"dataset written to {args.out}")
    return 0


def load_config(args) -> Config:
    cfg = Config.from_file(args.config) if args.config else Config()
    for item in args.overrides:
        cfg.update_from_text(item)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    elif not cfg.deterministic and args.seed is None:
        cfg.seed = int(np.random.SeedSequence().entropy % (2**31))
    if args.holdout_every is not None:
        cfg.holdout_every = args.holdout_every
    return cfg


def cmd_train(args) -> int:
    cfg = load_config(args)
    dataset = Dataset.open(args.input, stride=cfg.stride)
    if args.resume:
        trainer = ProgressiveTrainer.load_checkpoint(dataset, args.out)
        trainer.attach_log(args.out)
        _progress(f"resuming at iteration {trainer.global_iter}")
    else:
        trainer = ProgressiveTrainer(dataset, cfg, out_dir=args.out)
    _progress(
        f"training on {dataset.n_frames} frames "
        f"({len(trainer.holdout)} held out), seed {cfg.seed}"
    )
    last = [0]

    def show(row):
        if row.get("type") == "iter" and row["i"] - last[0] >= 500:
            last[0] = row["i"]
            _progress(
                f"iter {row['i']:>7} field {row['field']} {row['phase']:>6} "
                f"res {row['resolution']:>3} loss {row['loss']:.5f}"
            )
        elif row.get("type") in ("append", "alloc", "refine_start", "done"):
            _progress(f"event {row['type']} at iter {row.get('i', 0)}")

    trainer.on_log = show
    trainer.run(checkpoint_dir=args.out)
    trainer.close()
    _progress(f"complete: {len(trainer.fields)} fields, "
              f"{trainer.global_iter} iterations")
    return 0


def cmd_render(args) -> int:
    dataset = Dataset.open(args.input)
    trainer = ProgressiveTrainer.load_checkpoint(dataset, args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    if args.poses:
        with open(args.poses) as f:
            entries = [parse_pose_line(l) for l in f if l.strip()]
    else:
        entries = [(i, trainer.poses[i].copy())
                   for i in sorted(trainer.registered)][:: args.stride]
    offset = None
    if args.offset:
        offset = np.array([float(x) for x in args.offset.split(",")])
        if offset.shape != (3,):
            raise EngineError("--offset needs three comma-separated numbers")
    for idx, pose in entries:
        if offset is not None:
            pose = Pose(
                rot6=pose.rot6.copy(),
                trans=pose.trans + rot6d_to_matrix(pose.rot6) @ offset,
            )
        img, _ = trainer.render_view(pose, idx, n_fg=args.n_fg, n_bg=args.n_bg)
        path = os.path.join(args.out, f"{idx:06d}.png")
        dataio.save_frame(path, np.clip(img, 0, 1))
        _progress(f"rendered {path}")
    return 0


def cmd_eval(args) -> int:
    dataset = Dataset.open(args.input)
    trainer = ProgressiveTrainer.load_checkpoint(dataset, args.checkpoint)
    if not trainer.holdout:
        raise EngineError(
            "checkpoint has no held-out frames; train with --holdout-every"
        )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["frame", "psnr", "ssim"])
    per_frame = []
    for idx in trainer.holdout:
        _progress(f"registering test pose for frame {idx}")
        pose = trainer.register_test_pose(idx, iters=args.test_iters)
        img, _ = trainer.render_view(pose, idx)
        img = np.clip(img, 0.0, 1.0)
        gt = dataset.load_color(idx)
        m = compute_metrics(img, gt)
        per_frame.append(m)
        writer.writerow([idx, f"{m.psnr:.4f}", f"{m.ssim:.6f}"])
        if args.out:
            dataio.save_frame(os.path.join(args.out, f"{idx:06d}.png"), img)
    agg = aggregate(per_frame)
    writer.writerow(["aggregate", f"{agg.psnr:.4f}", f"{agg.ssim:.6f}"])
    if args.out:
        with open(os.path.join(args.out, "metrics.json"), "w") as f:
            json.dump(
                {
                    "frames": trainer.holdout,
                    "psnr": [m.psnr for m in per_frame],
                    "ssim": [m.ssim for m in per_frame],
                    "aggregate_psnr": agg.psnr,
                    "aggregate_ssim": agg.ssim,
                },
                f,
                indent=2,
            )
    return 0


def cmd_export_poses(args) -> int:
    dataset = Dataset.open(args.input)
    trainer = ProgressiveTrainer.load_checkpoint(dataset, args.checkpoint)
    lines = [
        format_pose_line(i, trainer.poses[i]) for i in sorted(trainer.registered)
    ]
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "export-poses": cmd_export_poses,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
