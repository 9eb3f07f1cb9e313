"""Transformer motion VAE with a style-based generator.

The encoder embeds each 157-dim frame vector, prepends two learnable
distribution tokens and reads the posterior mean / log-variance off those
token positions. The generator maps z through an MLP into a style code w,
then runs learned per-timestep queries through transformer blocks whose
normalisation layers are AdaIN driven by w.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .body_model import FRAME_DIM, NUM_BETAS, NUM_JOINTS, MotionClip, pack_frames, unpack_frames

ADAIN_EPS = 1e-5


@dataclass
class PriorConfig:
    latent_dim: int = 256
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 512
    mapping_depth: int = 4
    clip_len: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.latent_dim % self.n_heads:
            raise ValueError("latent_dim must be divisible by n_heads")
        if self.clip_len < 2:
            raise ValueError("clip_len must be at least 2")
        if min(self.n_layers, self.mapping_depth, self.ff_dim) < 1:
            raise ValueError("n_layers, mapping_depth and ff_dim must be positive")

    @property
    def input_dim(self) -> int:
        return FRAME_DIM

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class GaussianParams(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class MotionParams(NamedTuple):
    """Decoded motion: root (…, T, 3), pose (…, T, 24, 6), shape (…, 10)."""

    root: torch.Tensor
    pose: torch.Tensor
    shape: torch.Tensor

    def to_clip(self, fps: float = 25.0, has_root: bool = True) -> MotionClip:
        if self.pose.dim() != 3:
            raise ValueError("to_clip expects an unbatched motion")
        return MotionClip(
            self.root.detach().double().numpy(),
            self.pose.detach().double().numpy(),
            self.shape.detach().double().numpy(),
            fps=fps,
            has_root=has_root,
        )

    def to_clips(self, fps: float = 25.0, has_root: bool = True) -> list[MotionClip]:
        if self.pose.dim() == 3:
            return [self.to_clip(fps, has_root)]
        return [MotionParams(r, p, s).to_clip(fps, has_root) for r, p, s in zip(self.root, self.pose, self.shape)]


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


def adain(features: torch.Tensor, gamma: torch.Tensor, delta: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Normalise (…, T, C) features over time per channel, then scale by
    ``gamma`` and shift by ``delta`` (both (…, C))."""
    if features.shape[-2] < 2:
        raise ValueError("AdaIN needs at least two time steps")
    mean = features.mean(dim=-2, keepdim=True)
    var = features.var(dim=-2, unbiased=False, keepdim=True)
    normed = (features - mean) / torch.sqrt(var + eps)
    return gamma.unsqueeze(-2) * normed + delta.unsqueeze(-2)


class AdaIN(nn.Module):
    """Style-conditioned instance norm with two affine heads on w."""

    def __init__(self, dim: int, style_dim: int):
        super().__init__()
        self.to_gamma = nn.Linear(style_dim, dim)
        self.to_delta = nn.Linear(style_dim, dim)
        nn.init.ones_(self.to_gamma.bias)
        nn.init.zeros_(self.to_delta.bias)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return adain(x, self.to_gamma(w), self.to_delta(w))


class MappingNetwork(nn.Module):
    """Z -> W: ``depth`` fully connected layers with LeakyReLU in between."""

    def __init__(self, dim: int, depth: int):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(depth):
            layers.append(nn.Linear(dim, dim))
            if i < depth - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class MotionEncoder(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        D = cfg.latent_dim
        self.embed = nn.Linear(FRAME_DIM, D)
        self.mu_token = nn.Parameter(torch.randn(D) * 0.02)
        self.sigma_token = nn.Parameter(torch.randn(D) * 0.02)
        layer = nn.TransformerEncoderLayer(
            D, cfg.n_heads, cfg.ff_dim, dropout=cfg.dropout, activation="gelu", batch_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.register_buffer("pos", sinusoidal_encoding(cfg.clip_len + 2, D), persistent=False)

    def forward(self, x: torch.Tensor) -> GaussianParams:
        """x: normalised frames (B, T, 157)."""
        h = self.embed(x)
        tokens = torch.stack([self.mu_token, self.sigma_token]).expand(h.shape[0], 2, -1)
        h = torch.cat([tokens, h], dim=1) + self.pos[: h.shape[1] + 2].to(h.dtype)
        h = self.transformer(h)
        return GaussianParams(h[:, 0], h[:, 1])


class GeneratorBlock(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        D = cfg.latent_dim
        self.attn = nn.MultiheadAttention(D, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(D, cfg.ff_dim), nn.GELU(), nn.Linear(cfg.ff_dim, D))
        self.norm1 = AdaIN(D, D)
        self.norm2 = AdaIN(D, D)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, x, x, need_weights=False)[0], w)
        return self.norm2(x + self.ff(x), w)


class MotionGenerator(nn.Module):
    """The motion prior decoder: z -> normalised (B, T, 157) frames."""

    def __init__(self, cfg: PriorConfig):
        super().__init__()
        D = cfg.latent_dim
        self.mapping = MappingNetwork(D, cfg.mapping_depth)
        self.queries = nn.Parameter(torch.randn(cfg.clip_len, D) * 0.02)
        self.register_buffer("pos", sinusoidal_encoding(cfg.clip_len, D), persistent=False)
        self.blocks = nn.ModuleList(GeneratorBlock(cfg) for _ in range(cfg.n_layers))
        self.head = nn.Linear(D, FRAME_DIM)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        w = self.mapping(z)
        x = (self.queries + self.pos.to(self.queries.dtype)).expand(z.shape[0], -1, -1)
        for block in self.blocks:
            x = block(x, w)
        return self.head(x)


class MotionVAE(nn.Module):
    """Encoder + generator sharing per-dimension normalisation statistics."""

    def __init__(self, cfg: PriorConfig, mean=None, std=None):
        super().__init__()
        self.cfg = cfg
        self.encoder = MotionEncoder(cfg)
        self.generator = MotionGenerator(cfg)
        mean = torch.zeros(FRAME_DIM) if mean is None else torch.as_tensor(mean)
        std = torch.ones(FRAME_DIM) if std is None else torch.as_tensor(std)
        self.register_buffer("stats_mean", mean.clone().float())
        self.register_buffer("stats_std", std.clone().float())

    def set_stats(self, mean, std) -> None:
        self.stats_mean.copy_(torch.as_tensor(mean, dtype=self.stats_mean.dtype))
        self.stats_std.copy_(torch.as_tensor(std, dtype=self.stats_std.dtype))

    def normalize(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - self.stats_mean) / self.stats_std

    def denormalize(self, frames: torch.Tensor) -> torch.Tensor:
        return frames * self.stats_std + self.stats_mean

    def encode(self, frames: torch.Tensor) -> GaussianParams:
        """frames: raw (B, T, 157) or (T, 157) parameters."""
        if frames.shape[-2] != self.cfg.clip_len or frames.shape[-1] != FRAME_DIM:
            raise ValueError(
                f"expected (..., {self.cfg.clip_len}, {FRAME_DIM}) frames, got {tuple(frames.shape)}"
            )
        if frames.dim() == 2:
            g = self.encoder(self.normalize(frames)[None])
            return GaussianParams(g.mu[0], g.log_var[0])
        return self.encoder(self.normalize(frames))

    def decode_frames(self, z: torch.Tensor) -> torch.Tensor:
        """Raw (B, T, 157) frames, shape not yet averaged."""
        if z.dim() == 1:
            return self.decode_frames(z[None])[0]
        return self.denormalize(self.generator(z))

    def decode(self, z: torch.Tensor) -> MotionParams:
        root, pose, shape = unpack_frames(self.decode_frames(z))
        return MotionParams(root, pose, shape.mean(dim=-2))

    def prior_parameters(self):
        """Parameters of the generator (the part frozen in stage II)."""
        return self.generator.parameters()


def reparameterize(g: GaussianParams, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype)
    return g.mu + g.sigma * eps


def sample_prior(
    generator: torch.Generator | None,
    sigma_scale: float = 1.0,
    n: int | None = None,
    latent_dim: int = 256,
    dtype=torch.float32,
) -> torch.Tensor:
    """Draw z ~ N(0, sigma_scale^2 I); ``n=None`` gives a single vector."""
    if not sigma_scale > 0:
        raise ValueError("sigma_scale must be positive")
    shape = (latent_dim,) if n is None else (n, latent_dim)
    return sigma_scale * torch.randn(shape, generator=generator, dtype=dtype)


def clip_frames(clip: MotionClip, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(clip.to_array(), dtype=dtype)


def encode_clip(model: MotionVAE, clip: MotionClip) -> GaussianParams:
    if clip.num_frames != model.cfg.clip_len:
        raise ValueError(f"clip has {clip.num_frames} frames, model expects {model.cfg.clip_len}")
    with torch.no_grad():
        return model.encode(clip_frames(clip, model.stats_mean.dtype))


def decode_latent(model: MotionVAE, z, fps: float = 25.0) -> MotionClip:
    with torch.no_grad():
        z = torch.as_tensor(z, dtype=model.stats_mean.dtype)
        return model.decode(z).to_clip(fps=fps)


def rectify(model: MotionVAE, clip: MotionClip) -> MotionClip:
    """One deterministic encode/decode pass: decode(encode(clip).mu)."""
    g = encode_clip(model, clip)
    return decode_latent(model, g.mu, fps=clip.fps)


def interpolate_latent(model: MotionVAE, z_a, z_b, steps: int, fps: float = 25.0) -> list[MotionClip]:
    if steps < 2:
        raise ValueError("steps must be at least 2")
    z_a = torch.as_tensor(z_a, dtype=model.stats_mean.dtype)
    z_b = torch.as_tensor(z_b, dtype=model.stats_mean.dtype)
    clips = []
    for alpha in np.linspace(0.0, 1.0, steps):
        # the endpoints are computed from the inputs themselves, not from a blend
        if alpha == 0.0:
            z = z_a
        elif alpha == 1.0:
            z = z_b
        else:
            z = (1 - alpha) * z_a + alpha * z_b
        clips.append(decode_latent(model, z, fps))
    return clips


def frames_from_params(m: MotionParams) -> torch.Tensor:
    return pack_frames(m.root, m.pose, m.shape)

