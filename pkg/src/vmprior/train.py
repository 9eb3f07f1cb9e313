"""Two-stage training: the motion prior on noisy clips, then the video encoder
against the frozen prior."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .body_model import BodySpec, MotionClip, clip_joints, default_body_spec, forward_kinematics, project_weak_perspective
from .checkpoint import config_digest, load_prior, module_digest, save_prior, save_video_encoder, state_digest
from .datagen import DatasetManifest, add_noise_array, compute_stats, read_clip, read_video
from .losses import TERM_NAMES, LossWeights, cap_terms, vmp_terms, weighted_terms
from .motion_prior import MotionParams, MotionVAE, PriorConfig, reparameterize
from .video_encoder import VideoClip, VideoEncoder, VideoEncoderConfig

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "prior"
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    finetune: bool = False
    finetune_lr: float = 1e-5
    finetune_epochs: int = 5
    noise_std: float = 2.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    prior: PriorConfig = field(default_factory=PriorConfig)
    video: VideoEncoderConfig = field(default_factory=VideoEncoderConfig)
    seed: int = 0
    dtype: str = "float32"
    manifest: str | None = None
    prior_checkpoint: str | None = None
    out_dir: str | None = None
    checkpoint_every: int = 0
    log_every: int = 50
    root_in_2d: bool = True
    camera_weight: float = 1.0  # stage II: supervision on camera_gt when every video has one

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights.from_dict(self.loss_weights)
        if isinstance(self.prior, dict):
            self.prior = PriorConfig.from_dict(self.prior)
        if isinstance(self.video, dict):
            self.video = VideoEncoderConfig.from_dict(self.video)
        if self.stage not in ("prior", "capture"):
            raise ValueError(f"stage must be 'prior' or 'capture', got {self.stage!r}")
        if not (self.lr > 0 and self.finetune_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["video"] = self.video.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunReport:
    stage: str
    seed: int
    config_digest: str
    curves: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    wall_clock_s: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [k for k in (self.curves[0] if self.curves else {}) if k not in ("epoch", "total")]
        w.writerow(["epoch", "total", *names])
        for row in self.curves:
            w.writerow([row["epoch"], repr(row["total"]), *(repr(row[k]) for k in names)])
        return buf.getvalue()

    def write(self, out_dir, include_timing: bool = True) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        if not include_timing:
            # wall-clock is the only non-reproducible field; keep it out of the report
            timing = {"wall_clock_s": d.pop("wall_clock_s")}
            _write_atomic(out_dir / "timing.json", json.dumps(timing))
        _write_atomic(out_dir / "report.json", json.dumps(d, indent=1, sort_keys=True))
        _write_atomic(out_dir / "curves.csv", self.curves_csv())


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _run_digest(cfg: TrainConfig) -> str:
    # the output location does not change the run, so it stays out of the digest
    d = cfg.to_dict()
    d.pop("out_dir")
    return config_digest(d)


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


def _target(frames: torch.Tensor) -> MotionParams:
    return MotionParams(frames[..., :3], frames[..., 3:147].reshape(*frames.shape[:-1], 24, 6), frames[..., 0, 147:])


def _curve_row(epoch: int, terms: dict[str, float]) -> dict:
    row = {"epoch": epoch, **{k: terms.get(k, 0.0) for k in TERM_NAMES}}
    if "lcam" in terms:
        row["lcam"] = terms["lcam"]
    row["total"] = sum(v for k, v in row.items() if k != "epoch")
    return row


def _check_finite(total: torch.Tensor, epoch: int, terms: dict, out_dir) -> None:
    if torch.isfinite(total):
        return
    snapshot = {"epoch": epoch, "terms": {k: float(v.detach()) for k, v in terms.items()}}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_atomic(Path(out_dir) / "diverged.json", json.dumps(snapshot))
    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: {snapshot['terms']}")


# ----------------------------------------------------------------------------
# stage I
# ----------------------------------------------------------------------------


def reconstruction_errors(model: MotionVAE, clips: list[MotionClip], spec: BodySpec | None = None) -> list[float]:
    """Root-relative MPJPE of decode(encode(clip).mu) for each clip."""
    dtype = model.stats_mean.dtype
    frames = torch.stack([torch.as_tensor(c.to_array(), dtype=dtype) for c in clips])
    with torch.no_grad():
        rec = model.decode(model.encode(frames).mu)
    errs = []
    for i, clip in enumerate(clips):
        pred = forward_kinematics(torch.zeros_like(rec.root[i]), rec.pose[i], rec.shape[i], spec).double().numpy()
        errs.append(metrics.mpjpe(pred, clip_joints(clip, spec, root_relative=True)))
    return errs


def _load_prior_data(cfg: TrainConfig, clips, stats):
    if clips is None:
        if cfg.manifest is None:
            raise ValueError("train_prior needs clips or a dataset manifest")
        manifest = DatasetManifest.load(cfg.manifest)
        clips = manifest.load_clips("train")
        stats = (manifest.mean, manifest.std)
    if stats is None:
        stats = compute_stats(clips)
    if any(c.num_frames != cfg.prior.clip_len for c in clips):
        raise ValueError(f"all clips must have {cfg.prior.clip_len} frames")
    return clips, stats


def train_prior(cfg: TrainConfig, clips: list[MotionClip] | None = None, stats=None, spec: BodySpec | None = None):
    """Optimise the VAE on noisy-input / clean-target pairs.

    Returns (model, report). The best epoch by training loss is restored at the end.
    """
    t0 = time.perf_counter()
    spec = spec or default_body_spec()
    clips, (mean, std) = _load_prior_data(cfg, clips, stats)
    dtype = cfg.torch_dtype
    torch.manual_seed(cfg.seed)
    model = MotionVAE(cfg.prior).to(dtype)
    model.set_stats(mean, std)  # after the cast, so 64-bit runs keep full-precision stats
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    clean = np.stack([c.to_array() for c in clips])
    has_root = np.array([c.has_root for c in clips], dtype=np.float64)
    n = len(clips)
    report = RunReport("prior", cfg.seed, _run_digest(cfg))
    best = (math.inf, None)
    for epoch in range(cfg.epochs):
        model.train()
        sums = dict.fromkeys(TERM_NAMES, 0.0)
        for start in range(0, n, cfg.batch_size):
            idx = slice(start, start + cfg.batch_size)
            target_frames = torch.as_tensor(clean[idx], dtype=dtype)
            noisy = torch.as_tensor(add_noise_array(clean[idx], cfg.noise_std, std, rng), dtype=dtype)
            g = model.encode(noisy)
            pred = model.decode(reparameterize(g, gen))
            terms = weighted_terms(
                vmp_terms(_target(target_frames), pred, g, spec, torch.as_tensor(has_root[idx], dtype=dtype), cfg.loss_weights),
                cfg.loss_weights,
            )
            total = sum(terms.values())
            _check_finite(total, epoch, terms, cfg.out_dir)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            frac = (min(start + cfg.batch_size, n) - start) / n
            for k, v in terms.items():
                sums[k] += float(v.detach()) * frac
        row = _curve_row(epoch, sums)
        report.curves.append(row)
        if row["total"] < best[0]:
            best = (row["total"], copy.deepcopy(model.state_dict()))
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("prior epoch %d total %.5g", epoch, row["total"])
        if cfg.out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_prior(Path(cfg.out_dir) / "prior_last.ckpt", model, {"epoch": epoch})

    model.load_state_dict(best[1])
    model.eval()
    errs = reconstruction_errors(model, clips, spec)
    report.final_metrics = {
        "best_total": best[0],
        "recon_mpjpe": errs,
        "recon_mpjpe_max": max(errs),
        "weights_digest": module_digest(model),
    }
    report.wall_clock_s = time.perf_counter() - t0
    if cfg.out_dir:
        save_prior(Path(cfg.out_dir) / "prior.ckpt", model, {"best_total": best[0]})
    return model, report


# ----------------------------------------------------------------------------
# stage II
# ----------------------------------------------------------------------------


def reprojection_error(encoder: VideoEncoder, prior: MotionVAE, videos: list[VideoClip], spec=None, root_in_2d=True) -> list[float]:
    """Mean per-joint 2D error of the deterministic capture, per video (confident joints only)."""
    dtype = next(encoder.parameters()).dtype
    out = []
    with torch.no_grad():
        frames = torch.stack([torch.as_tensor(v.frames, dtype=dtype) for v in videos])
        g, scale, center = encoder(frames)
        pred = prior.decode(g.mu.to(prior.stats_mean.dtype))
        for i, v in enumerate(videos):
            root = pred.root[i] if root_in_2d else torch.zeros_like(pred.root[i])
            joints = forward_kinematics(root, pred.pose[i], pred.shape[i], spec)
            uv = project_weak_perspective(joints, scale[i].to(joints.dtype), center[i].to(joints.dtype)).double().numpy()
            mask = v.keypoints.confidence > 0.5
            out.append(float(np.linalg.norm(uv - v.keypoints.points, axis=-1)[mask].mean()))
    return out


def capture_errors(encoder: VideoEncoder, prior: MotionVAE, videos, clips, spec=None) -> list[float]:
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        frames = torch.stack([torch.as_tensor(v.frames, dtype=dtype) for v in videos])
        g, _, _ = encoder(frames)
        pred = prior.decode(g.mu.to(prior.stats_mean.dtype))
    errs = []
    for i, clip in enumerate(clips):
        joints = forward_kinematics(torch.zeros_like(pred.root[i]), pred.pose[i], pred.shape[i], spec).double().numpy()
        errs.append(metrics.mpjpe(joints, clip_joints(clip, spec, root_relative=True)))
    return errs


def camera_loss(scale, center, scale_gt, center_gt) -> torch.Tensor:
    """|log s - log s_gt| + ||c - c_gt||, averaged over the batch."""
    err = (scale.log() - scale_gt.log()).abs() + torch.linalg.vector_norm(center - center_gt, dim=-1)
    return err.mean()


def train_capture(
    cfg: TrainConfig,
    videos: list[VideoClip] | None = None,
    clips: list[MotionClip | None] | None = None,
    prior: MotionVAE | None = None,
    spec: BodySpec | None = None,
):
    """Train the video encoder on L_cap against a frozen prior.

    ``clips`` holds the 3D ground truth per video, or None entries for 2D-only
    data. Returns (encoder, prior, report); ``report.final_metrics`` carries the
    prior digest before and after training and per-epoch digests.
    """
    t0 = time.perf_counter()
    spec = spec or default_body_spec()
    dtype = cfg.torch_dtype
    if prior is None:
        if not cfg.prior_checkpoint:
            raise FileNotFoundError("stage 'capture' needs a prior checkpoint")
        prior = load_prior(cfg.prior_checkpoint, dtype)
    prior = prior.to(dtype)
    if videos is None:
        if cfg.manifest is None:
            raise ValueError("train_capture needs videos or a dataset manifest")
        manifest = DatasetManifest.load(cfg.manifest)
        entries = [e for e in manifest.entries("train") if e.video]
        videos = [read_video(manifest.root_dir / e.video) for e in entries]
        clips = [read_clip(manifest.root_dir / e.path) for e in entries]
    if clips is None:
        clips = [None] * len(videos)
    if not videos:
        raise ValueError("no training videos")

    prior.eval()
    for p in prior.parameters():
        p.requires_grad_(False)
    digest_before = module_digest(prior)

    torch.manual_seed(cfg.seed)
    encoder = VideoEncoder(cfg.video, latent_dim=prior.cfg.latent_dim).to(dtype)
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    finetune_from = cfg.epochs - cfg.finetune_epochs if cfg.finetune else cfg.epochs
    ft_opt = None

    frames_all = torch.stack([torch.as_tensor(v.frames, dtype=dtype) for v in videos])
    points_all = torch.stack([torch.as_tensor(v.keypoints.points, dtype=dtype) for v in videos])
    conf_all = torch.stack([torch.as_tensor(v.keypoints.confidence, dtype=dtype) for v in videos])
    has_3d = all(c is not None for c in clips)
    targets = torch.stack([torch.as_tensor(c.to_array(), dtype=dtype) for c in clips]) if has_3d else None
    w_r_all = torch.as_tensor([1.0 if (c is not None and c.has_root) else 0.0 for c in clips], dtype=dtype)
    use_cam = cfg.camera_weight > 0 and all(v.camera_gt is not None for v in videos)
    if use_cam:
        cam_s = torch.as_tensor([v.camera_gt.scale for v in videos], dtype=dtype)
        cam_c = torch.as_tensor([v.camera_gt.center for v in videos], dtype=dtype)

    n = len(videos)
    report = RunReport("capture", cfg.seed, _run_digest(cfg))
    init_reproj = reprojection_error(encoder, prior, videos, spec, cfg.root_in_2d)
    digests = []
    best = (math.inf, None)
    for epoch in range(cfg.epochs):
        if epoch == finetune_from and ft_opt is None:
            # only the generator half of the VAE is unfrozen
            for p in prior.generator.parameters():
                p.requires_grad_(True)
            prior.train()
            ft_opt = torch.optim.Adam(prior.generator.parameters(), lr=cfg.finetune_lr)
        encoder.train()
        sums = dict.fromkeys(TERM_NAMES + (("lcam",) if use_cam else ()), 0.0)
        for start in range(0, n, cfg.batch_size):
            idx = slice(start, start + cfg.batch_size)
            g, scale, center = encoder(frames_all[idx])
            pred = prior.decode(reparameterize(g, gen))
            target = _target(targets[idx]) if targets is not None else None
            terms = weighted_terms(
                cap_terms(target, pred, g, (points_all[idx], conf_all[idx]), scale, center, spec, w_r_all[idx],
                          cfg.loss_weights, root_in_2d=cfg.root_in_2d),
                cfg.loss_weights,
            )
            if use_cam:
                terms["lcam"] = cfg.camera_weight * camera_loss(scale, center, cam_s[idx], cam_c[idx])
            total = sum(terms.values())
            _check_finite(total, epoch, terms, cfg.out_dir)
            opt.zero_grad(set_to_none=True)
            if ft_opt is not None:
                ft_opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if ft_opt is not None:
                ft_opt.step()
            frac = (min(start + cfg.batch_size, n) - start) / n
            for k, v in terms.items():
                sums[k] += float(v.detach()) * frac
        row = _curve_row(epoch, sums)
        report.curves.append(row)
        digests.append(module_digest(prior))
        if row["total"] < best[0]:
            best = (row["total"], copy.deepcopy(encoder.state_dict()))
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("capture epoch %d total %.5g", epoch, row["total"])
        if cfg.out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_video_encoder(Path(cfg.out_dir) / "video_encoder_last.ckpt", encoder, {"epoch": epoch})

    if ft_opt is None:
        encoder.load_state_dict(best[1])
    for p in prior.parameters():
        p.requires_grad_(False)
    prior.eval()
    encoder.eval()
    final_reproj = reprojection_error(encoder, prior, videos, spec, cfg.root_in_2d)
    report.final_metrics = {
        "best_total": best[0],
        "reproj_init": init_reproj,
        "reproj_final": final_reproj,
        "prior_digest_before": digest_before,
        "prior_digest_after": module_digest(prior),
        "prior_digests": digests,
    }
    if has_3d:
        errs = capture_errors(encoder, prior, videos, clips, spec)
        report.final_metrics["capture_mpjpe"] = errs
    report.wall_clock_s = time.perf_counter() - t0
    if cfg.out_dir:
        save_video_encoder(Path(cfg.out_dir) / "video_encoder.ckpt", encoder, {"best_total": best[0]})
        if cfg.finetune:
            save_prior(Path(cfg.out_dir) / "prior_finetuned.ckpt", prior)
    return encoder, prior, report
