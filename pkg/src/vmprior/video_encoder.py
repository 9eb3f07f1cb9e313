"""Stage-II video encoder: frames -> posterior over the motion prior's latent space.

A small high-to-low multi-branch CNN produces a three-level feature pyramid
per frame. Each level is pooled into a handful of tokens; a spatial-temporal
transformer alternates attention within a frame and across frames, and a
per-frame summary token becomes that frame's motion feature. Attention pooling
over time then gives the clip-level Gaussian, and a linear head regresses a
weak-perspective camera.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .body_model import CameraParams, MotionClip
from .losses import Keypoints2D
from .motion_prior import GaussianParams, MotionVAE, sinusoidal_encoding


class MissingCheckpointError(RuntimeError):
    pass


@dataclass
class VideoEncoderConfig:
    image_size: int = 64
    widths: tuple[int, int, int] = (32, 64, 128)
    dim: int = 256
    n_heads: int = 4
    ff_dim: int = 512
    n_spatial: int = 2
    n_temporal: int = 2
    pool_size: int = 2
    clip_len: int = 16
    use_pe: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("the feature pyramid has exactly three levels")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")
        if self.dim % self.n_heads:
            raise ValueError("dim must be divisible by n_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VideoEncoderConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True, eq=False)
class VideoClip:
    frames: np.ndarray  # (T, H, W) in [0, 1]
    keypoints: Keypoints2D
    camera_gt: CameraParams | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got {frames.shape}")
        if np.any(frames < 0) or np.any(frames > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.keypoints.points.shape[0] != frames.shape[0]:
            raise ValueError("keypoints and frames disagree on clip length")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


class FeaturePyramid(NamedTuple):
    """Per-frame maps at H/4, H/8 and H/16."""

    high: torch.Tensor
    mid: torch.Tensor
    low: torch.Tensor


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    # no bias: blank pixels map to zero features, so the mostly-empty frames
    # do not drown the figure in a constant offset
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class Backbone(nn.Module):
    """High-to-low resolution branches with one low-to-high exchange."""

    def __init__(self, widths=(32, 64, 128)):
        super().__init__()
        w1, w2, w3 = widths
        self.stem = nn.Sequential(_conv(1, 16, 2), nn.ReLU(), _conv(16, w1, 2), nn.ReLU())
        self.branch1 = nn.Sequential(_conv(w1, w1), nn.ReLU())
        self.down2 = _conv(w1, w2, 2)
        self.branch2 = nn.Sequential(_conv(w2, w2), nn.ReLU())
        self.down3 = _conv(w2, w3, 2)
        self.branch3 = nn.Sequential(_conv(w3, w3), nn.ReLU())
        self.up2 = nn.Conv2d(w2, w1, 1, bias=False)
        self.up3 = nn.Conv2d(w3, w2, 1, bias=False)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        """images: (N, 1, H, W)."""
        x1 = self.branch1(self.stem(images))
        x2 = self.branch2(F.relu(self.down2(x1)))
        x3 = self.branch3(F.relu(self.down3(x2)))
        # fuse coarse context back into the finer branches
        x2 = x2 + F.interpolate(self.up3(x3), size=x2.shape[-2:], mode="nearest")
        x1 = x1 + F.interpolate(self.up2(x2), size=x1.shape[-2:], mode="nearest")
        return FeaturePyramid(x1, x2, x3)


class STEncoder(nn.Module):
    """Alternating spatial / temporal self-attention over pyramid tokens."""

    def __init__(self, cfg: VideoEncoderConfig):
        super().__init__()
        D = cfg.dim
        self.cfg = cfg
        self.proj = nn.ModuleList(nn.Conv2d(w, D, 1, bias=False) for w in cfg.widths)
        # sparse line drawings pool to tiny activations; normalise them before
        # the unit-scale token and time embeddings are added
        self.token_norm = nn.LayerNorm(D)
        n_tokens = 3 * cfg.pool_size**2
        self.token_embed = nn.Parameter(torch.randn(n_tokens, D) * 0.02)
        self.frame_token = nn.Parameter(torch.randn(D) * 0.02)

        def layer():
            return nn.TransformerEncoderLayer(D, cfg.n_heads, cfg.ff_dim, dropout=0.0, activation="gelu", batch_first=True)

        n_blocks = max(cfg.n_spatial, cfg.n_temporal)
        self.spatial = nn.ModuleList(layer() for _ in range(cfg.n_spatial))
        self.temporal = nn.ModuleList(layer() for _ in range(cfg.n_temporal))
        self.n_blocks = n_blocks
        self.register_buffer("time_pos", sinusoidal_encoding(cfg.clip_len, D), persistent=False)

    def tokens(self, pyramid: FeaturePyramid) -> torch.Tensor:
        p = self.cfg.pool_size
        toks = [F.adaptive_avg_pool2d(proj(level), p).flatten(2).transpose(1, 2) for proj, level in zip(self.proj, pyramid)]
        toks = self.token_norm(torch.cat(toks, dim=1)) + self.token_embed
        cls = self.frame_token.expand(toks.shape[0], 1, -1)
        return torch.cat([cls, toks], dim=1)

    def forward(self, pyramid: FeaturePyramid, batch: int) -> torch.Tensor:
        """Pyramid over (batch * T) frames -> (batch, T, D) per-frame features."""
        x = self.tokens(pyramid)
        NT, S, D = x.shape
        T = NT // batch
        x = x.reshape(batch, T, S, D)
        if self.cfg.use_pe:
            if T > self.time_pos.shape[0]:
                raise ValueError(f"clip of {T} frames exceeds configured clip_len {self.time_pos.shape[0]}")
            x = x + self.time_pos[:T, None, :].to(x.dtype)
        for i in range(self.n_blocks):
            if i < len(self.spatial):
                x = self.spatial[i](x.reshape(batch * T, S, D)).reshape(batch, T, S, D)
            if i < len(self.temporal):
                xt = x.transpose(1, 2).reshape(batch * S, T, D)
                x = self.temporal[i](xt).reshape(batch, S, T, D).transpose(1, 2)
        return x[:, :, 0]


class VideoEncoder(nn.Module):
    def __init__(self, cfg: VideoEncoderConfig | None = None, latent_dim: int = 256):
        super().__init__()
        self.cfg = cfg = cfg or VideoEncoderConfig()
        self.backbone = Backbone(cfg.widths)
        self.ste = STEncoder(cfg)
        self.out = nn.Linear(cfg.dim, latent_dim) if cfg.dim != latent_dim else nn.Identity()
        self.attn_score = nn.Linear(latent_dim, 1)
        self.mu_head = nn.Linear(latent_dim, latent_dim)
        self.logvar_head = nn.Linear(latent_dim, latent_dim)
        self.camera_head = nn.Linear(latent_dim, 3)
        nn.init.zeros_(self.camera_head.weight)
        nn.init.zeros_(self.camera_head.bias)

    def extract_features(self, frames: torch.Tensor) -> FeaturePyramid:
        """(…, H, W) frames -> pyramid over the flattened leading axes."""
        H = W = self.cfg.image_size
        if frames.shape[-2:] != (H, W):
            raise ValueError(f"expected {H}x{W} frames, got {tuple(frames.shape[-2:])}")
        return self.backbone(frames.reshape(-1, 1, H, W))

    def ste_encode(self, pyramid: FeaturePyramid, batch: int) -> torch.Tensor:
        return self.out(self.ste(pyramid, batch))

    def to_distribution(self, features: torch.Tensor) -> GaussianParams:
        """Attention-pool (…, T, D) features over time into mu / log-variance."""
        attn = torch.softmax(self.attn_score(features), dim=-2)
        pooled = (attn * features).sum(dim=-2)
        return GaussianParams(self.mu_head(pooled), self.logvar_head(pooled))

    def estimate_camera(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (scale (…,), center (…, 2)); scale = exp(raw) > 0."""
        raw = self.camera_head(features.mean(dim=-2))
        return raw[..., 0].exp(), raw[..., 1:]

    def forward(self, frames: torch.Tensor):
        """frames (B, T, H, W) -> (GaussianParams, cam_scale, cam_center)."""
        unbatched = frames.dim() == 3
        if unbatched:
            frames = frames[None]
        B, T = frames.shape[:2]
        if self.cfg.use_pe and T != self.cfg.clip_len:
            raise ValueError(f"expected {self.cfg.clip_len} frames, got {T}")
        feats = self.ste_encode(self.extract_features(frames), B)
        g = self.to_distribution(feats)
        scale, center = self.estimate_camera(feats)
        if unbatched:
            return GaussianParams(g.mu[0], g.log_var[0]), scale[0], center[0]
        return g, scale, center


def video_tensor(video: VideoClip, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(video.frames, dtype=dtype)


def capture(video: VideoClip, encoder: VideoEncoder, prior: MotionVAE | None, generator: torch.Generator | None = None):
    """Video -> (MotionClip, CameraParams) through the frozen prior.

    With ``generator`` given, z is sampled from the predicted posterior;
    otherwise the posterior mean is decoded.
    """
    if prior is None:
        raise MissingCheckpointError("capture needs a trained motion prior checkpoint")
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        g, scale, center = encoder(video_tensor(video, dtype))
        z = g.mu if generator is None else g.mu + g.sigma * torch.randn(g.mu.shape, generator=generator, dtype=dtype)
        motion = prior.decode(z.to(prior.stats_mean.dtype))
    cam = CameraParams(float(scale), tuple(center.double().tolist()))
    return motion.to_clip(), cam
