"""Command-line harness: data generation, both training stages and the
inference / evaluation tools.

Every subcommand writes ``report.json`` into ``--out``. Failures print
``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .body_model import MotionClip, clip_joints, clip_vertices
from .checkpoint import load_prior, load_video_encoder
from .datagen import DatasetConfig, make_dataset, read_clip, read_video, write_clip
from .motion_prior import decode_latent, encode_clip, interpolate_latent, rectify, sample_prior
from .train import TrainConfig, set_deterministic, train_capture, train_prior
from .video_encoder import MissingCheckpointError, capture

class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None


def _write_report(out: Path, report: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "report.json.tmp"
    tmp.write_text(json.dumps(report, indent=1, sort_keys=True))
    tmp.replace(out / "report.json")


def _write_trace(path, clip: MotionClip) -> None:
    """Per-frame world joint positions: frame, joint, x, y, z."""
    joints = clip_joints(clip)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "joint", "x", "y", "z"])
        for t, frame in enumerate(joints):
            for j, (x, y, z) in enumerate(frame):
                w.writerow([t, j, repr(float(x)), repr(float(y)), repr(float(z))])


def _dtype(args) -> torch.dtype:
    return torch.float64 if args.deterministic else torch.float32


def _load_prior(path, dtype):
    if path is None:
        raise MissingCheckpointError("--prior checkpoint is required")
    if not Path(path).exists():
        raise MissingCheckpointError(f"prior checkpoint not found: {path}")
    return load_prior(path, dtype)


def _train_config(args, stage: str) -> TrainConfig:
    d = _read_json(args.config) if args.config else {}
    d["stage"] = stage
    if args.seed is not None:
        d["seed"] = args.seed
    if args.deterministic:
        d["dtype"] = "float64"
    for key in ("manifest", "epochs", "prior_checkpoint"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    d["out_dir"] = str(args.out)
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    d = _read_json(args.config) if args.config else {}
    d = d.get("dataset", d)
    if args.seed is not None:
        d["seed"] = args.seed
    manifest = make_dataset(DatasetConfig.from_dict(d), args.out)
    return {
        "command": "gen-data",
        "manifest": "dataset.manifest.json",
        "n_clips": len(manifest.clips),
        "n_train": len(manifest.entries("train")),
        "n_val": len(manifest.entries("val")),
    }


def cmd_train_prior(args) -> dict:
    cfg = _train_config(args, "prior")
    if cfg.manifest is None:
        raise CLIError("train-prior needs --manifest (or 'manifest' in the config)")
    _, report = train_prior(cfg)
    report.write(args.out, include_timing=not args.deterministic)
    return None


def cmd_train_capture(args) -> dict:
    cfg = _train_config(args, "capture")
    if cfg.prior_checkpoint is None or not Path(cfg.prior_checkpoint).exists():
        raise MissingCheckpointError(f"prior checkpoint not found: {cfg.prior_checkpoint}")
    if cfg.manifest is None:
        raise CLIError("train-capture needs --manifest (or 'manifest' in the config)")
    _, _, report = train_capture(cfg)
    report.write(args.out, include_timing=not args.deterministic)
    return None


def _sample_joints(prior, gen, sigma, n, same_latent):
    dtype = prior.stats_mean.dtype
    if same_latent:
        z = sample_prior(gen, sigma, latent_dim=prior.cfg.latent_dim, dtype=dtype).expand(n, -1)
    else:
        z = sample_prior(gen, sigma, n=n, latent_dim=prior.cfg.latent_dim, dtype=dtype)
    clips = [decode_latent(prior, zi) for zi in z]
    return clips, np.stack([clip_joints(c) for c in clips])


def cmd_synthesize(args) -> dict:
    prior = _load_prior(args.prior, _dtype(args))
    if args.n < 2:
        raise CLIError("--n must be at least 2 to measure diversity")
    gen = torch.Generator().manual_seed(args.seed or 0)
    clips, s1 = _sample_joints(prior, gen, args.sigma, args.n, args.same_latent)
    _, s5 = _sample_joints(prior, gen, 5.0, args.n, args.same_latent)
    out = Path(args.out) / "clips"
    out.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(clips):
        write_clip(c, out / f"sample_{i:03d}.mclip.json")
    if args.trace:
        _write_trace(args.trace, clips[0])
    report = {"command": "synthesize", "n": args.n, "sigma": args.sigma, "same_latent": args.same_latent}
    report.update({
        "apd": metrics.apd(s1),
        "clip_apd": metrics.clip_apd(s1),
        "local_apd_s1": metrics.local_apd(s1, args.sigma),
        "local_apd_s5": metrics.local_apd(s5, 5.0),
        "apd_s5": metrics.apd(s5),
    })
    return report


def cmd_interpolate(args) -> dict:
    prior = _load_prior(args.prior, _dtype(args))
    za = encode_clip(prior, read_clip(args.clip_a)).mu
    zb = encode_clip(prior, read_clip(args.clip_b)).mu
    clips = interpolate_latent(prior, za, zb, args.steps)
    out = Path(args.out) / "clips"
    out.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(clips):
        write_clip(c, out / f"step_{i:03d}.mclip.json")
    joints = np.stack([clip_joints(c) for c in clips])
    step = np.linalg.norm(np.diff(joints, axis=0), axis=-1).mean(axis=(1, 2))
    if args.trace:
        _write_trace(args.trace, clips[len(clips) // 2])
    return {
        "command": "interpolate",
        "steps": args.steps,
        "step_displacement": step.tolist(),
        "max_step_displacement": float(step.max()),
        "mean_step_displacement": float(step.mean()),
    }


def cmd_rectify(args) -> dict:
    prior = _load_prior(args.prior, _dtype(args))
    noisy = read_clip(args.clip)
    fixed = rectify(prior, noisy)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_clip(fixed, Path(args.out) / "rectified.mclip.json")
    if args.trace:
        _write_trace(args.trace, fixed)
    report = {"command": "rectify", "input_vs_output_mpjpe": metrics.mpjpe(clip_joints(fixed), clip_joints(noisy))}
    if args.reference:
        ref = clip_joints(read_clip(args.reference))
        report["input_mpjpe"] = metrics.mpjpe(clip_joints(noisy), ref)
        report["output_mpjpe"] = metrics.mpjpe(clip_joints(fixed), ref)
    return report


def cmd_capture(args) -> dict:
    dtype = _dtype(args)
    prior = _load_prior(args.prior, dtype)
    if args.encoder is None or not Path(args.encoder).exists():
        raise MissingCheckpointError(f"video encoder checkpoint not found: {args.encoder}")
    encoder = load_video_encoder(args.encoder, dtype)
    video = read_video(args.video)
    clip, cam = capture(video, encoder, prior)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_clip(clip, Path(args.out) / "captured.mclip.json")
    if args.trace:
        _write_trace(args.trace, clip)
    report = {"command": "capture", "camera": {"s": cam.scale, "c": list(cam.center)}}
    if video.camera_gt is not None:
        report["camera_gt"] = {"s": video.camera_gt.scale, "c": list(video.camera_gt.center)}
    return report


def cmd_evaluate(args) -> dict:
    pred, gt = read_clip(args.pred), read_clip(args.gt)
    if pred.num_frames != gt.num_frames:
        raise CLIError(f"clip lengths differ: {pred.num_frames} vs {gt.num_frames}")
    pj, gj = clip_joints(pred), clip_joints(gt)
    report = metrics.pose_report(pj, gj, clip_vertices(pred), clip_vertices(gt), fps=gt.fps)
    report["command"] = "evaluate"
    return report


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-prior": cmd_train_prior,
    "train-capture": cmd_train_capture,
    "synthesize": cmd_synthesize,
    "interpolate": cmd_interpolate,
    "rectify": cmd_rectify,
    "capture": cmd_capture,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (TrainConfig / DatasetConfig field names)")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--deterministic", action="store_true", help="64-bit, deterministic kernels, no timing in report.json")
    common.add_argument("--trace", help="optional per-frame joint trace CSV")

    parser = _Parser(prog="vmprior", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    for name in ("train-prior", "train-capture"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--manifest")
        p.add_argument("--epochs", type=int)
        if name == "train-capture":
            p.add_argument("--prior", dest="prior_checkpoint")
    p = sub.add_parser("synthesize", parents=[common])
    p.add_argument("--prior")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--same-latent", action="store_true", help="decode one latent n times (APD must be 0)")
    p = sub.add_parser("interpolate", parents=[common])
    p.add_argument("--prior")
    p.add_argument("--clip-a", required=True)
    p.add_argument("--clip-b", required=True)
    p.add_argument("--steps", type=int, default=10)
    p = sub.add_parser("rectify", parents=[common])
    p.add_argument("--prior")
    p.add_argument("--clip", required=True)
    p.add_argument("--reference", help="clean clip to score input and output against")
    p = sub.add_parser("capture", parents=[common])
    p.add_argument("--prior")
    p.add_argument("--encoder")
    p.add_argument("--video", required=True)
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        _fail("UsageError", "--seed must be an unsigned 64-bit integer", code=2)
    if args.deterministic:
        set_deterministic(True)
    t0 = time.perf_counter()
    try:
        report = COMMANDS[args.command](args)
    except MissingCheckpointError as e:
        _fail("MissingCheckpointError", str(e))
    except (CLIError, ValueError, FileNotFoundError, OSError, RuntimeError) as e:
        _fail(type(e).__name__ if not isinstance(e, CLIError) else "ConfigError", str(e))
    if report is not None:
        if not args.deterministic:
            report["wall_clock_s"] = time.perf_counter() - t0
        _write_report(Path(args.out), report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
