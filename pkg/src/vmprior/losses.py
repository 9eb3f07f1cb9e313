"""Training objectives for the motion prior and the video encoder.

All losses take torch tensors and are differentiable. Inputs may carry a
leading batch axis: per-clip values are summed over time and then averaged
over the batch, so an unbatched clip gives exactly the per-clip sum.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .body_model import BodySpec, default_body_spec, forward_kinematics, limb_joints, project_weak_perspective, skin_vertices
from .motion_prior import GaussianParams, MotionParams

TERM_NAMES = ("l3d", "llb", "lv", "lkl", "l2d")
CONFIDENCE_THRESHOLD = 0.5


@dataclass
class LossWeights:
    lambda_kl: float = 1e-5
    lambda_lb: float = 100.0
    lambda_V: float = 1.0
    lambda_2d: float = 100.0
    lambda_theta: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be non-negative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def from_json(cls, path) -> "LossWeights":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("loss_weights", data))


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    points: np.ndarray  # (T, N_J, 2)
    confidence: np.ndarray  # (T, N_J)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[-1] != 2 or conf.shape != pts.shape[:2]:
            raise ValueError(f"keypoints must be (T, J, 2) with (T, J) confidences, got {pts.shape}, {conf.shape}")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)


def _batch_mean(per_clip: torch.Tensor) -> torch.Tensor:
    return per_clip.mean() if per_clip.dim() else per_clip


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_3d(target: MotionParams, pred: MotionParams, weights: LossWeights | None = None, w_r=1.0) -> torch.Tensor:
    """Unsquared L2 parameter loss on root, 6D pose and shape.

    ``w_r`` masks the root term; it may be a scalar or a per-clip tensor.
    """
    weights = weights or LossWeights()
    for name in ("root", "pose", "shape"):
        _check_same(getattr(target, name), getattr(pred, name), name)
    root = torch.linalg.vector_norm(target.root - pred.root, dim=-1).sum(-1)
    pose = torch.linalg.vector_norm((target.pose - pred.pose).flatten(-2), dim=-1).sum(-1)
    shape = torch.linalg.vector_norm(target.shape - pred.shape, dim=-1)
    w_r = torch.as_tensor(w_r, dtype=root.dtype)
    return _batch_mean(w_r * root + weights.lambda_theta * pose + shape)


def loss_limb(target: MotionParams, pred: MotionParams, spec: BodySpec | None = None) -> torch.Tensor:
    """Per-frame L2 distance between the stacked wrist/ankle positions, root excluded."""
    spec = spec or default_body_spec()
    _check_same(target.pose, pred.pose, "pose")
    zero = torch.zeros_like(target.root)
    a = limb_joints(zero, target.pose, target.shape, spec)
    b = limb_joints(zero, pred.pose, pred.shape, spec)
    return _batch_mean(torch.linalg.vector_norm((a - b).flatten(-2), dim=-1).sum(-1))


def loss_recon(target: MotionParams, pred: MotionParams, spec: BodySpec | None = None) -> torch.Tensor:
    """Squared vertex error of the skinned surfaces, summed over frames."""
    spec = spec or default_body_spec()
    _check_same(target.pose, pred.pose, "pose")
    _check_same(target.root, pred.root, "root")
    va = skin_vertices(target.root, target.pose, target.shape, spec)
    vb = skin_vertices(pred.root, pred.pose, pred.shape, spec)
    return _batch_mean((va - vb).square().sum(dim=(-1, -2, -3)))


def loss_kl(g: GaussianParams) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) in closed form."""
    # expm1 keeps exp(v) - 1 - v non-negative for tiny v
    kl = 0.5 * (g.mu.square() + torch.expm1(g.log_var) - g.log_var).sum(-1)
    return _batch_mean(kl)


def loss_2d(points, confidence, pose, shape, cam_scale, cam_center, spec: BodySpec | None = None, root=None) -> torch.Tensor:
    """Confidence-gated reprojection error of the predicted joints.

    Joints come from forward kinematics with the root at the origin unless a
    ``root`` translation is passed. Keypoints with confidence <= 0.5 are ignored.
    """
    spec = spec or default_body_spec()
    points = torch.as_tensor(points, dtype=pose.dtype)
    confidence = torch.as_tensor(confidence, dtype=pose.dtype)
    if root is None:
        root = torch.zeros(*pose.shape[:-2], 3, dtype=pose.dtype)
    joints = forward_kinematics(root, pose, shape, spec)
    _check_same(points, joints[..., :2], "keypoints")
    _check_same(confidence, points[..., 0], "confidence")
    cam_scale = torch.as_tensor(cam_scale, dtype=pose.dtype)
    cam_center = torch.as_tensor(cam_center, dtype=pose.dtype)
    # cameras are per clip; give them the time axis
    proj = project_weak_perspective(joints, cam_scale[..., None], cam_center[..., None, :])
    mask = (confidence > CONFIDENCE_THRESHOLD).to(pose.dtype)
    err = torch.linalg.vector_norm(proj - points, dim=-1)
    return _batch_mean((mask * err).sum(dim=(-1, -2)))


def vmp_terms(target, pred, g, spec=None, w_r=1.0, weights: LossWeights | None = None) -> dict[str, torch.Tensor]:
    """Raw (unweighted) stage-I loss terms."""
    weights = weights or LossWeights()
    return {
        "l3d": loss_3d(target, pred, weights, w_r),
        "llb": loss_limb(target, pred, spec),
        "lv": loss_recon(target, pred, spec),
        "lkl": loss_kl(g),
    }


def weighted_terms(terms: dict[str, torch.Tensor], weights: LossWeights) -> dict[str, torch.Tensor]:
    scale = {"l3d": 1.0, "llb": weights.lambda_lb, "lv": weights.lambda_V, "lkl": weights.lambda_kl, "l2d": weights.lambda_2d}
    return {k: scale[k] * v for k, v in terms.items()}


def loss_vmp(target, pred, g, spec=None, weights: LossWeights | None = None, w_r=1.0) -> torch.Tensor:
    weights = weights or LossWeights()
    t = vmp_terms(target, pred, g, spec, w_r, weights)
    return t["l3d"] + weights.lambda_lb * t["llb"] + weights.lambda_V * t["lv"] + weights.lambda_kl * t["lkl"]


def cap_terms(target, pred, g, keypoints, cam_scale, cam_center, spec=None, w_r=1.0,
              weights: LossWeights | None = None, root_in_2d: bool = False) -> dict[str, torch.Tensor]:
    """Raw stage-II terms. ``target=None`` drops the 3D terms (2D-only data)."""
    weights = weights or LossWeights()
    zero = pred.pose.new_zeros(())
    if target is None:
        terms = {"l3d": zero, "llb": zero, "lv": zero, "lkl": loss_kl(g)}
    else:
        terms = vmp_terms(target, pred, g, spec, w_r, weights)
    points, confidence = keypoints
    root = pred.root if root_in_2d else None
    terms["l2d"] = loss_2d(points, confidence, pred.pose, pred.shape, cam_scale, cam_center, spec, root=root)
    return terms


def loss_cap(target, pred, g, keypoints, cam_scale, cam_center, spec=None,
             weights: LossWeights | None = None, w_r=1.0, root_in_2d: bool = False) -> torch.Tensor:
    weights = weights or LossWeights()
    t = cap_terms(target, pred, g, keypoints, cam_scale, cam_center, spec, w_r, weights, root_in_2d)
    vmp = t["l3d"] + weights.lambda_lb * t["llb"] + weights.lambda_V * t["lv"] + weights.lambda_kl * t["lkl"]
    return vmp + weights.lambda_2d * t["l2d"]
