"""Procedural articulated body with an SMPL-compatible parameter layout.

The body has SMPL's 24-joint kinematic tree, a 10-dim linear shape space acting
on bone offsets, and a small ring-mesh surface skinned with linear blend
skinning. Every kinematic function is written in torch so it is differentiable
and runs in whatever dtype its inputs carry (float64 for checks, float32 for
training).
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

NUM_JOINTS = 24
NUM_BETAS = 10
ROT6D_DIM = 6
FRAME_DIM = 3 + NUM_JOINTS * ROT6D_DIM + NUM_BETAS  # 157

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
# L-wrist, R-wrist, L-ankle, R-ankle
LIMB_INDICES = (20, 21, 7, 8)

# child - parent in the rest pose, y up, +x is the body's left; total height ~1.7
_REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.07, -0.09, 0.0],
    [-0.07, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.0],
    [-0.01, -0.41, -0.04],
    [0.01, -0.41, -0.04],
    [0.0, 0.05, 0.02],
    [0.03, -0.06, 0.12],
    [-0.03, -0.06, 0.12],
    [0.0, 0.21, -0.03],
    [0.08, 0.12, -0.01],
    [-0.08, 0.12, -0.01],
    [0.0, 0.09, 0.05],
    [0.12, 0.04, -0.02],
    [-0.12, 0.04, -0.02],
    [0.26, -0.01, -0.02],
    [-0.26, -0.01, -0.02],
    [0.25, 0.01, 0.0],
    [-0.25, 0.01, 0.0],
    [0.08, -0.01, -0.01],
    [-0.08, -0.01, -0.01],
])

VERTS_PER_SEGMENT = 18
_RING_T = (0.25, 0.5, 0.75)


class DegenerateRotationError(ValueError):
    """Raised when a 6D rotation cannot be orthogonalised."""


class BodySpecError(ValueError):
    pass


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraParams:
    """Weak-perspective camera: ``uv = scale * xy + center``."""

    scale: float
    center: tuple[float, float]

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"camera scale must be positive, got {self.scale}")
        c = tuple(float(v) for v in self.center)
        if len(c) != 2 or not all(np.isfinite(c)):
            raise ValueError(f"camera center must be a finite 2-vector, got {self.center}")
        object.__setattr__(self, "center", c)


@dataclass(frozen=True)
class MotionFrame:
    root_trans: np.ndarray  # (3,)
    pose: np.ndarray  # (24, 6)
    shape: np.ndarray  # (10,)


@dataclass(frozen=True, eq=False)
class MotionClip:
    """A length-T motion: per-frame root translation and 6D joint rotations,
    one shape vector for the whole clip."""

    root_trans: np.ndarray  # (T, 3)
    pose: np.ndarray  # (T, 24, 6)
    shape: np.ndarray  # (10,)
    fps: float = 25.0
    has_root: bool = True

    def __post_init__(self):
        root = np.asarray(self.root_trans, dtype=np.float64)
        pose = np.asarray(self.pose, dtype=np.float64)
        shape = np.asarray(self.shape, dtype=np.float64)
        if pose.ndim != 3 or pose.shape[1:] != (NUM_JOINTS, ROT6D_DIM):
            raise ValueError(f"pose must be (T, 24, 6), got {pose.shape}")
        T = pose.shape[0]
        if T < 2:
            raise ValueError(f"a clip needs at least 2 frames, got {T}")
        if root.shape != (T, 3):
            raise ValueError(f"root_trans must be ({T}, 3), got {root.shape}")
        if shape.shape != (NUM_BETAS,):
            raise ValueError(f"shape must be (10,), got {shape.shape}")
        if not (self.fps > 0):
            raise ValueError("fps must be positive")
        for name, arr in (("root_trans", root), ("pose", pose), ("shape", shape)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "root_trans", root)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "fps", float(self.fps))
        object.__setattr__(self, "has_root", bool(self.has_root))

    @property
    def num_frames(self) -> int:
        return self.pose.shape[0]

    def frame(self, t: int) -> MotionFrame:
        return MotionFrame(self.root_trans[t], self.pose[t], self.shape)

    def frames(self):
        return [self.frame(t) for t in range(self.num_frames)]

    def to_array(self) -> np.ndarray:
        """Flatten to (T, 157): root, pose, shape per frame."""
        return pack_frames(self.root_trans, self.pose, self.shape)

    @classmethod
    def from_array(cls, arr: np.ndarray, fps: float = 25.0, has_root: bool = True) -> "MotionClip":
        root, pose, shape = unpack_frames(np.asarray(arr))
        return cls(root, pose, shape.mean(axis=0), fps=fps, has_root=has_root)

    def __eq__(self, other):
        if not isinstance(other, MotionClip):
            return NotImplemented
        return (
            self.fps == other.fps
            and self.has_root == other.has_root
            and np.array_equal(self.root_trans, other.root_trans)
            and np.array_equal(self.pose, other.pose)
            and np.array_equal(self.shape, other.shape)
        )


def pack_frames(root, pose, shape):
    """(…,T,3), (…,T,24,6), (…,10) -> (…,T,157). Works for numpy and torch."""
    if isinstance(pose, torch.Tensor):
        shape_t = shape.unsqueeze(-2).expand(*pose.shape[:-2], NUM_BETAS)
        return torch.cat([root, pose.flatten(-2), shape_t], dim=-1)
    shape_t = np.broadcast_to(np.expand_dims(shape, -2), pose.shape[:-2] + (NUM_BETAS,))
    return np.concatenate([root, pose.reshape(pose.shape[:-2] + (-1,)), shape_t], axis=-1)


def unpack_frames(x):
    """(…,T,157) -> root (…,T,3), pose (…,T,24,6), per-frame shape (…,T,10)."""
    root = x[..., :3]
    pose = x[..., 3:3 + NUM_JOINTS * ROT6D_DIM]
    pose = pose.reshape(*x.shape[:-1], NUM_JOINTS, ROT6D_DIM)
    shape = x[..., 3 + NUM_JOINTS * ROT6D_DIM:]
    return root, pose, shape


# --------------------------------------------------------------------------
# body spec
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BodySpec:
    parent: np.ndarray  # (24,) int, parent[0] == -1
    rest_offsets: np.ndarray  # (24, 3)
    shape_basis: np.ndarray  # (24, 3, 10)
    vertex_template: np.ndarray  # (N_V, 3)
    skin_weights: np.ndarray  # (N_V, 24)
    limb_indices: np.ndarray  # (4,)

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        J = parent.shape[0]
        if parent.ndim != 1 or parent[0] != -1:
            raise BodySpecError("parent[0] must be -1 (root)")
        if np.any(parent[1:] < 0) or np.any(parent[1:] >= np.arange(1, J)):
            raise BodySpecError("parents must precede their children")
        arrays = {
            "rest_offsets": (np.asarray(self.rest_offsets, dtype=np.float64), (J, 3)),
            "shape_basis": (np.asarray(self.shape_basis, dtype=np.float64), (J, 3, NUM_BETAS)),
        }
        for name, (arr, shp) in arrays.items():
            if arr.shape != shp:
                raise BodySpecError(f"{name} must have shape {shp}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        verts = np.asarray(self.vertex_template, dtype=np.float64)
        weights = np.asarray(self.skin_weights, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise BodySpecError("vertex_template must be (N_V, 3)")
        if weights.shape != (verts.shape[0], J):
            raise BodySpecError("skin_weights must be (N_V, num_joints)")
        if np.any(weights < 0) or not np.allclose(weights.sum(axis=1), 1.0, atol=1e-12):
            raise BodySpecError("skin_weights rows must be non-negative and sum to 1")
        if np.any((weights > 0).sum(axis=1) > 2):
            raise BodySpecError("each vertex may have at most 2 skinning influences")
        limbs = np.asarray(self.limb_indices, dtype=np.int64)
        if limbs.shape != (4,) or len(set(limbs.tolist())) != 4 or np.any(limbs < 0) or np.any(limbs >= J):
            raise BodySpecError("limb_indices must be 4 distinct joint indices")
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "vertex_template", verts)
        object.__setattr__(self, "skin_weights", weights)
        object.__setattr__(self, "limb_indices", limbs)

    @property
    def num_joints(self) -> int:
        return self.parent.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertex_template.shape[0]

    def shaped_offsets(self, shape: np.ndarray) -> np.ndarray:
        return self.rest_offsets + self.shape_basis @ np.asarray(shape, dtype=np.float64)

    def edges(self) -> list[tuple[int, int]]:
        return [(int(self.parent[j]), j) for j in range(1, self.num_joints)]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "parent": self.parent.tolist(),
            "rest_offsets": self.rest_offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "vertex_template": self.vertex_template.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "limb_indices": self.limb_indices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodySpec":
        if d.get("version") != 1:
            raise BodySpecError(f"unsupported body-spec version {d.get('version')!r}")
        return cls(
            parent=np.array(d["parent"]),
            rest_offsets=np.array(d["rest_offsets"], dtype=np.float64),
            shape_basis=np.array(d["shape_basis"], dtype=np.float64),
            vertex_template=np.array(d["vertex_template"], dtype=np.float64),
            skin_weights=np.array(d["skin_weights"], dtype=np.float64),
            limb_indices=np.array(d["limb_indices"]),
        )

    def save(self, path) -> None:
        # json writes floats with repr(), the shortest string that round-trips
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BodySpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def tensor(self, name: str, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(getattr(self, name), dtype=like.dtype, device=like.device)


def _ring_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def make_body_spec(seed: int = 0) -> BodySpec:
    """Build the default procedural body. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parent = np.array(SMPL_PARENTS)
    offsets = _REST_OFFSETS.copy()

    # orthonormal basis over the 23 non-root offsets, RMS 0.03 units per joint per unit beta
    q, _ = np.linalg.qr(rng.standard_normal(((NUM_JOINTS - 1) * 3, NUM_BETAS)))
    basis = np.zeros((NUM_JOINTS, 3, NUM_BETAS))
    basis[1:] = (q * 0.03 * np.sqrt(NUM_JOINTS - 1)).reshape(NUM_JOINTS - 1, 3, NUM_BETAS)

    rest = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        rest[j] = rest[parent[j]] + offsets[j]

    verts, weights = [], []
    n_ring = VERTS_PER_SEGMENT // len(_RING_T)
    angles = 2 * np.pi * np.arange(n_ring) / n_ring
    for j in range(NUM_JOINTS):
        radius = 0.035 + 0.02 * rng.random()
        if j == 0:
            # pelvis: three horizontal rings around the root, rigid on joint 0
            u, v = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
            for k, h in enumerate((-0.04, 0.0, 0.04)):
                for a in angles:
                    verts.append(np.array([0.0, h, 0.0]) + 2.5 * radius * (np.cos(a) * u + np.sin(a) * v))
                    w = np.zeros(NUM_JOINTS)
                    w[0] = 1.0
                    weights.append(w)
            continue
        p = parent[j]
        u, v = _ring_basis(offsets[j])
        for t in _RING_T:
            center = rest[p] + t * offsets[j]
            for a in angles:
                verts.append(center + radius * (np.cos(a) * u + np.sin(a) * v))
                w = np.zeros(NUM_JOINTS)
                w[p], w[j] = 1.0 - t, t
                weights.append(w)
    return BodySpec(
        parent=parent,
        rest_offsets=offsets,
        shape_basis=basis,
        vertex_template=np.array(verts),
        skin_weights=np.array(weights),
        limb_indices=np.array(LIMB_INDICES),
    )


@functools.lru_cache(maxsize=None)
def default_body_spec() -> BodySpec:
    return make_body_spec(0)


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

_DEGENERATE_EPS = 1e-8


def rot6d_to_matrix(r6: torch.Tensor) -> torch.Tensor:
    """Decode (…, 6) rotations into (…, 3, 3) matrices.

    The 6D vector holds the first two matrix columns. Column one is normalised,
    column two is Gram-Schmidt orthogonalised against it and the third column
    is their cross product.
    """
    r6 = torch.as_tensor(r6)
    a, b = r6[..., :3], r6[..., 3:]
    a_norm = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    if bool((a_norm <= _DEGENERATE_EPS).any()):
        raise DegenerateRotationError("first 6D column is (near) zero")
    c1 = a / a_norm
    b_perp = b - (c1 * b).sum(-1, keepdim=True) * c1
    b_norm = torch.linalg.vector_norm(b_perp, dim=-1, keepdim=True)
    if bool((b_norm <= _DEGENERATE_EPS).any()):
        raise DegenerateRotationError("6D columns are (near) parallel or second column is zero")
    c2 = b_perp / b_norm
    c3 = torch.linalg.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


def matrix_to_rot6d(R: torch.Tensor, check: bool = True, atol: float = 1e-6) -> torch.Tensor:
    """(…, 3, 3) rotation -> (…, 6): the first two columns, concatenated."""
    R = torch.as_tensor(R)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got {tuple(R.shape)}")
    if check:
        eye = torch.eye(3, dtype=R.dtype, device=R.device)
        ortho_err = (R.transpose(-1, -2) @ R - eye).abs().amax() if R.numel() else 0.0
        det = torch.linalg.det(R)
        if float(ortho_err) > atol or bool(((det - 1).abs() > atol).any()):
            raise ValueError("input is not a proper rotation matrix")
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def axis_angle_to_matrix(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula for (…, 3) rotation vectors."""
    rotvec = torch.as_tensor(rotvec)
    angle = torch.linalg.vector_norm(rotvec, dim=-1, keepdim=True)
    safe = torch.where(angle > 1e-12, angle, torch.ones_like(angle))
    k = rotvec / safe
    kx, ky, kz = k.unbind(-1)
    zero = torch.zeros_like(kx)
    K = torch.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], dim=-1).reshape(*k.shape[:-1], 3, 3)
    s = torch.sin(angle)[..., None]
    c = torch.cos(angle)[..., None]
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device)
    R = eye + s * K + (1 - c) * (K @ K)
    return torch.where((angle > 1e-12)[..., None], R, eye.expand_as(R))


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------


def _broadcast_shape(shape: torch.Tensor, lead: torch.Size) -> torch.Tensor:
    # a clip-level (…, 10) shape gains the time axis of (…, T) frames
    if shape.dim() - 1 < len(lead):
        shape = shape.unsqueeze(-2)
    return shape.expand(*lead, shape.shape[-1])


def _as_tensors(root, pose, shape):
    pose = torch.as_tensor(pose)
    root = torch.as_tensor(root, dtype=pose.dtype)
    shape = torch.as_tensor(shape, dtype=pose.dtype)
    return root, pose, shape


def shaped_rest_joints(shape: torch.Tensor, spec: BodySpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Shaped bone offsets (…, J, 3) and rest joint positions (…, J, 3) with the root at 0."""
    offsets = spec.tensor("rest_offsets", shape) + torch.einsum(
        "jkb,...b->...jk", spec.tensor("shape_basis", shape), shape
    )
    rest = [offsets[..., 0, :]]
    for j in range(1, spec.num_joints):
        rest.append(rest[spec.parent[j]] + offsets[..., j, :])
    return offsets, torch.stack(rest, dim=-2)


def global_transforms(root, pose, shape, spec: BodySpec):
    """World rotations (…, J, 3, 3), joint positions (…, J, 3), shaped rest joints (…, J, 3)."""
    root, pose, shape = _as_tensors(root, pose, shape)
    lead = pose.shape[:-2]
    shape = _broadcast_shape(shape, lead)
    local = rot6d_to_matrix(pose)
    offsets, rest = shaped_rest_joints(shape, spec)
    rots = [local[..., 0, :, :]]
    pos = [offsets[..., 0, :]]
    for j in range(1, spec.num_joints):
        p = spec.parent[j]
        rots.append(rots[p] @ local[..., j, :, :])
        pos.append(pos[p] + (rots[p] @ offsets[..., j, :, None])[..., 0])
    # the root translation goes on last, so FK(r) == FK(0) + r bit for bit
    return torch.stack(rots, dim=-3), torch.stack(pos, dim=-2) + root[..., None, :], rest


def forward_kinematics(root, pose, shape, spec: BodySpec | None = None) -> torch.Tensor:
    """Joint positions (…, 24, 3) for root (…, 3), pose (…, 24, 6), shape (…, 10) or (10,)."""
    spec = spec or default_body_spec()
    return global_transforms(root, pose, shape, spec)[1]


def skin_vertices(root, pose, shape, spec: BodySpec | None = None) -> torch.Tensor:
    """Linear blend skinning of the shaped template, (…, N_V, 3)."""
    spec = spec or default_body_spec()
    rots, pos, rest = global_transforms(root, pose, shape, spec)
    W = spec.tensor("skin_weights", rots)
    _, rest0 = shaped_rest_joints(torch.zeros(NUM_BETAS, dtype=rots.dtype), spec)
    # shape moves the template with the joints it is skinned to
    template = spec.tensor("vertex_template", rots) + W @ (rest - rest0)
    trans = pos - (rots @ rest[..., None])[..., 0]
    A = torch.einsum("vj,...jab->...vab", W, rots)
    b = W @ trans
    return (A @ template[..., None])[..., 0] + b


def limb_joints(root, pose, shape, spec: BodySpec | None = None) -> torch.Tensor:
    """(…, 4, 3) positions of L-wrist, R-wrist, L-ankle, R-ankle."""
    spec = spec or default_body_spec()
    joints = forward_kinematics(root, pose, shape, spec)
    return joints[..., torch.as_tensor(spec.limb_indices), :]


def project_weak_perspective(points, scale, center) -> torch.Tensor:
    """``scale * (x, y) + center`` for (…, K, 3) points; depth is dropped.

    ``scale`` has the points' leading batch shape (or is a scalar) and
    ``center`` the same plus a trailing 2.
    """
    points = torch.as_tensor(points)
    scale = torch.as_tensor(scale, dtype=points.dtype)
    center = torch.as_tensor(center, dtype=points.dtype)
    return scale[..., None, None] * points[..., :2] + center[..., None, :]


def clip_tensors(clip: MotionClip, dtype=torch.float64):
    return (
        torch.as_tensor(clip.root_trans, dtype=dtype),
        torch.as_tensor(clip.pose, dtype=dtype),
        torch.as_tensor(clip.shape, dtype=dtype),
    )


def clip_joints(clip: MotionClip, spec: BodySpec | None = None, root_relative: bool = False) -> np.ndarray:
    root, pose, shape = clip_tensors(clip)
    if root_relative:
        root = torch.zeros_like(root)
    return forward_kinematics(root, pose, shape, spec).numpy()


def clip_vertices(clip: MotionClip, spec: BodySpec | None = None) -> np.ndarray:
    return skin_vertices(*clip_tensors(clip), spec).numpy()
