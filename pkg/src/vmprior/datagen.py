"""Deterministic synthetic motion data, stick-figure rendering and file formats."""
from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from .body_model import (
    FRAME_DIM,
    NUM_BETAS,
    NUM_JOINTS,
    BodySpec,
    CameraParams,
    MotionClip,
    axis_angle_to_matrix,
    default_body_spec,
    forward_kinematics,
    matrix_to_rot6d,
    project_weak_perspective,
    unpack_frames,
)
from .losses import Keypoints2D
from .video_encoder import VideoClip

FAMILIES = ("oscillate", "keyframe_spline", "drift_static")
CLIP_FORMAT_VERSION = 1
MANIFEST_VERSION = 1
STD_FLOOR = 1e-3
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")
_MASK64 = (1 << 64) - 1


class ClipFormatError(ValueError):
    pass


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seeds(master: int, n: int) -> list[int]:
    state, out = master & _MASK64, []
    for _ in range(n):
        state, z = splitmix64(state)
        out.append(z)
    return out


# --------------------------------------------------------------------------
# motion families
# --------------------------------------------------------------------------


@dataclass
class MotionFamilySpec:
    family: str
    seed: int
    T: int = 16
    fps: float = 25.0
    amplitude: float = 0.6  # rad, upper bound on joint rotation magnitude
    freq_range: tuple[float, float] = (0.5, 2.0)  # Hz
    root_range: float = 0.3  # model units
    has_root: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown motion family {self.family!r}; choose from {FAMILIES}")
        if self.T < 2 or not self.fps > 0:
            raise ValueError("T must be >= 2 and fps > 0")
        if not 0 <= self.amplitude <= 0.6:
            raise ValueError("amplitude must lie in [0, 0.6] rad")


def _rotvec_to_6d(rotvec: np.ndarray) -> np.ndarray:
    R = axis_angle_to_matrix(torch.as_tensor(rotvec, dtype=torch.float64))
    return matrix_to_rot6d(R, check=False).numpy()


def _random_axes(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_rotvecs(rng: np.random.Generator, n: int, max_angle: float) -> np.ndarray:
    return _random_axes(rng, n) * rng.uniform(0.0, max_angle, size=(n, 1))


def keyframe_times(T: int) -> np.ndarray:
    return np.linspace(0.0, T - 1, 4)


def keyframe_rotvecs(spec: MotionFamilySpec) -> np.ndarray:
    """The four (4, 24, 3) keyframe poses a keyframe_spline clip interpolates."""
    rng = np.random.default_rng(spec.seed)
    rng.standard_normal(NUM_BETAS)  # shape draw comes first
    return np.stack([_random_rotvecs(rng, NUM_JOINTS, spec.amplitude) for _ in range(4)])


def gen_motion_clip(spec: MotionFamilySpec) -> MotionClip:
    rng = np.random.default_rng(spec.seed)
    shape = 0.5 * rng.standard_normal(NUM_BETAS)
    T = spec.T
    t = np.arange(T) / spec.fps
    root = np.zeros((T, 3))

    if spec.family == "oscillate":
        axes = _random_axes(rng, NUM_JOINTS)
        amp = rng.uniform(0.0, spec.amplitude, NUM_JOINTS)
        freq = rng.uniform(*spec.freq_range, NUM_JOINTS)
        phase = rng.uniform(0.0, 2 * np.pi, NUM_JOINTS)
        angle = amp * np.sin(2 * np.pi * freq * t[:, None] + phase)  # (T, 24)
        rotvec = angle[..., None] * axes
        base = rng.uniform(-spec.root_range, spec.root_range, 3)
        sway = spec.root_range * 0.3 * (spec.amplitude / 0.6)
        root = base + sway * np.sin(2 * np.pi * freq[0] * t[:, None] + phase[:3])
    elif spec.family == "keyframe_spline":
        keys = np.stack([_random_rotvecs(rng, NUM_JOINTS, spec.amplitude) for _ in range(4)])
        kt = keyframe_times(T)
        rotvec = CubicSpline(kt, keys, axis=0)(np.arange(T))
        root_keys = rng.uniform(-spec.root_range, spec.root_range, (4, 3))
        root = CubicSpline(kt, root_keys, axis=0)(np.arange(T))
    else:  # drift_static
        rotvec = np.repeat(_random_rotvecs(rng, NUM_JOINTS, spec.amplitude)[None], T, axis=0)
        start = rng.uniform(-spec.root_range, spec.root_range, 3)
        velocity = rng.uniform(-1.0, 1.0, 3) * spec.root_range
        wobble = rng.uniform(-0.3, 0.3, 3) * spec.root_range
        freq = rng.uniform(*spec.freq_range)
        root = start + velocity * t[:, None] + wobble * np.sin(2 * np.pi * freq * t[:, None])

    if not spec.has_root:
        root = np.zeros((T, 3))
    pose = _rotvec_to_6d(rotvec)
    return MotionClip(root, pose, shape, fps=spec.fps, has_root=spec.has_root)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------


def add_noise_array(frames: np.ndarray, std: float, stats_std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise of ``std`` in normalised units on (…, T, 157) frames.

    Root and pose dims get independent noise per frame; the shape dims get one
    draw per clip so the clip keeps a single body shape.
    """
    if std < 0:
        raise ValueError("noise std must be non-negative")
    frames = np.asarray(frames, dtype=np.float64)
    if std == 0:
        return frames.copy()
    stats_std = np.asarray(stats_std, dtype=np.float64)
    n_dyn = FRAME_DIM - NUM_BETAS
    noise = rng.standard_normal(frames.shape)
    noise[..., n_dyn:] = rng.standard_normal(frames.shape[:-2] + (1, NUM_BETAS))
    return frames + std * stats_std * noise


def add_noise(clip: MotionClip, std: float, rng: np.random.Generator, stats_std=None) -> MotionClip:
    if stats_std is None:
        raise ValueError("add_noise needs normalisation statistics (DatasetManifest.std)")
    noisy = add_noise_array(clip.to_array(), std, stats_std, rng)
    root, pose, shape = unpack_frames(noisy)
    return MotionClip(root, pose, shape[0], fps=clip.fps, has_root=clip.has_root)


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def to_pixels(uv: np.ndarray, size: int) -> np.ndarray:
    """Normalised image coords (x right, y up, [-1, 1]) -> (col, row) pixel coords."""
    col = (uv[..., 0] + 1.0) * size / 2.0
    row = (1.0 - uv[..., 1]) * size / 2.0
    return np.stack([col, row], axis=-1)


def rasterize_segments(segments: np.ndarray, size: int, width: float = 1.5) -> np.ndarray:
    """Anti-aliased max-composite of (S, 2, 2) pixel-space segments."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    pix = np.stack([xs, ys], axis=-1).reshape(-1, 1, 2)  # (P, 1, 2)
    a, b = segments[:, 0][None], segments[:, 1][None]  # (1, S, 2)
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    s = np.clip(((pix - a) * ab).sum(-1) / denom, 0.0, 1.0)
    d = np.linalg.norm(pix - (a + s[..., None] * ab), axis=-1)
    intensity = np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0).max(axis=1)
    return intensity.reshape(size, size)


def render_clip(
    clip: MotionClip,
    spec: BodySpec | None = None,
    cam: CameraParams | None = None,
    size: int = 64,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> VideoClip:
    """Draw the kinematic tree as lines; keypoints are the projected joints."""
    spec = spec or default_body_spec()
    cam = cam or CameraParams(0.9, (0.0, 0.1))
    joints = forward_kinematics(
        torch.as_tensor(clip.root_trans), torch.as_tensor(clip.pose), torch.as_tensor(clip.shape), spec
    )
    uv = project_weak_perspective(joints, cam.scale, cam.center).numpy()
    pix = to_pixels(uv, size)
    edges = np.array(spec.edges())
    frames = np.stack([rasterize_segments(p[edges], size) for p in pix])
    confidence = np.ones(uv.shape[:2])
    if dropout > 0:
        rng = rng or np.random.default_rng(0)
        confidence[rng.random(confidence.shape) < dropout] = 0.3
    return VideoClip(frames, Keypoints2D(uv, confidence), cam)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def clip_to_dict(clip: MotionClip) -> dict:
    return {
        "version": CLIP_FORMAT_VERSION,
        "fps": clip.fps,
        "T": clip.num_frames,
        "joints": NUM_JOINTS,
        "rep": "rot6d",
        "has_root": clip.has_root,
        "root_trans": clip.root_trans.tolist(),
        "pose": clip.pose.tolist(),
        "shape": clip.shape.tolist(),
    }


def clip_from_dict(d: dict, source: str = "<dict>") -> MotionClip:
    if not isinstance(d, dict):
        raise ClipFormatError(f"{source}: top level must be an object")
    if d.get("version") != CLIP_FORMAT_VERSION:
        raise ClipFormatError(f"{source}: unsupported clip version {d.get('version')!r}")
    if d.get("rep") != "rot6d" or d.get("joints") != NUM_JOINTS:
        raise ClipFormatError(f"{source}: expected rep 'rot6d' with {NUM_JOINTS} joints")
    try:
        clip = MotionClip(
            np.array(d["root_trans"], dtype=np.float64),
            np.array(d["pose"], dtype=np.float64),
            np.array(d["shape"], dtype=np.float64),
            fps=d["fps"],
            has_root=d["has_root"],
        )
    except KeyError as e:
        raise ClipFormatError(f"{source}: missing field {e.args[0]!r}") from None
    except ValueError as e:
        raise ClipFormatError(f"{source}: {e}") from None
    if clip.num_frames != d.get("T"):
        raise ClipFormatError(f"{source}: T={d.get('T')} but {clip.num_frames} frames stored")
    return clip


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_clip(clip: MotionClip, path) -> None:
    _atomic_write(Path(path), json.dumps(clip_to_dict(clip)))


def _load_json(path: Path, error=ClipFormatError):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise error(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None


def read_clip(path) -> MotionClip:
    path = Path(path)
    return clip_from_dict(_load_json(path), str(path))


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # exactly one whitespace byte follows maxval; pixel bytes may look like whitespace
    m = _PGM_HEADER.match(data)
    if m is None:
        raise ClipFormatError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ClipFormatError(f"{path}: only 8-bit PGM is supported")
    pixels = data[m.end():]
    if len(pixels) != w * h:
        raise ClipFormatError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w) / 255.0


def write_video(video: VideoClip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(video.frames):
        write_pgm(directory / f"frame_{t:04d}.pgm", frame)
    meta = {"points": video.keypoints.points.tolist(), "confidence": video.keypoints.confidence.tolist()}
    if video.camera_gt is not None:
        meta["camera"] = {"s": video.camera_gt.scale, "c": list(video.camera_gt.center)}
    _atomic_write(directory / "keypoints.json", json.dumps(meta))


def read_video(directory) -> VideoClip:
    directory = Path(directory)
    meta = _load_json(directory / "keypoints.json")
    frame_paths = sorted(directory.glob("frame_*.pgm"))
    if not frame_paths:
        raise ClipFormatError(f"{directory}: no frame_*.pgm files")
    frames = np.stack([read_pgm(p) for p in frame_paths])
    cam = None
    if "camera" in meta:
        cam = CameraParams(meta["camera"]["s"], tuple(meta["camera"]["c"]))
    return VideoClip(frames, Keypoints2D(np.array(meta["points"]), np.array(meta["confidence"])), cam)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    counts: dict = field(default_factory=lambda: {"oscillate": 3, "keyframe_spline": 3, "drift_static": 2})
    seed: int = 0
    split: tuple[float, float] = (1.0, 0.0)
    T: int = 16
    fps: float = 25.0
    amplitude: float = 0.6
    root_fraction: float = 0.5
    render: bool = True
    image_size: int = 64
    keypoint_dropout: float = 0.0

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 2 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions (train, val) must be non-negative and sum to 1")
        unknown = set(self.counts) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown families {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


@dataclass
class ClipEntry:
    name: str
    path: str
    family: str
    has_root: bool
    split: str
    seed: int
    video: str | None = None
    camera: dict | None = None


@dataclass
class DatasetManifest:
    root_dir: Path
    clips: list[ClipEntry]
    mean: np.ndarray
    std: np.ndarray
    config: dict = field(default_factory=dict)

    def entries(self, split: str | None = None) -> list[ClipEntry]:
        return [c for c in self.clips if split is None or c.split == split]

    def load_clips(self, split: str | None = "train") -> list[MotionClip]:
        return [read_clip(self.root_dir / c.path) for c in self.entries(split)]

    def load_videos(self, split: str | None = "train") -> list[VideoClip]:
        return [read_video(self.root_dir / c.video) for c in self.entries(split) if c.video]

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "config": self.config,
            "clips": [asdict(c) for c in self.clips],
            "stats": {"mean": self.mean.tolist(), "std": self.std.tolist()},
        }

    def save(self, path) -> None:
        _atomic_write(Path(path), json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = _load_json(path)
        if d.get("version") != MANIFEST_VERSION:
            raise ClipFormatError(f"{path}: unsupported manifest version {d.get('version')!r}")
        return cls(
            root_dir=path.parent,
            clips=[ClipEntry(**c) for c in d["clips"]],
            mean=np.array(d["stats"]["mean"], dtype=np.float64),
            std=np.array(d["stats"]["std"], dtype=np.float64),
            config=d.get("config", {}),
        )


def compute_stats(clips: list[MotionClip]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean / std over every frame of ``clips`` (std floored)."""
    frames = np.concatenate([c.to_array() for c in clips], axis=0)
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), STD_FLOOR)


def dataset_specs(config: DatasetConfig) -> list[tuple[str, MotionFamilySpec]]:
    """The clip names and generation specs ``make_dataset`` would produce."""
    total = sum(config.counts.values())
    seeds = derive_seeds(config.seed, total)
    out, i = [], 0
    for family in FAMILIES:
        for k in range(config.counts.get(family, 0)):
            # evenly interleaved: clip i is rooted when the running quota ticks over
            f = config.root_fraction
            has_root = int(np.floor((i + 1) * f)) > int(np.floor(i * f))
            spec = MotionFamilySpec(family, seeds[i], T=config.T, fps=config.fps, amplitude=config.amplitude, has_root=has_root)
            out.append((f"{family}_{k:03d}", spec))
            i += 1
    return out


def _camera_for(seed: int) -> CameraParams:
    rng = np.random.default_rng(seed ^ 0x5EED)
    return CameraParams(float(rng.uniform(0.7, 0.95)), (float(rng.uniform(-0.1, 0.1)), float(0.1 + rng.uniform(-0.1, 0.1))))


def make_dataset(config: DatasetConfig, out_dir, spec: BodySpec | None = None) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    specs = dataset_specs(config)
    n_train = int(round(config.split[0] * len(specs)))
    order = np.random.default_rng(config.seed).permutation(len(specs))
    train_ids = set(order[:n_train].tolist())

    entries, train_clips = [], []
    for i, (name, fam_spec) in enumerate(specs):
        clip = gen_motion_clip(fam_spec)
        rel = f"clips/{name}.mclip.json"
        write_clip(clip, out_dir / rel)
        split = "train" if i in train_ids else "val"
        entry = ClipEntry(name, rel, fam_spec.family, fam_spec.has_root, split, fam_spec.seed)
        if config.render:
            cam = _camera_for(fam_spec.seed)
            rng = np.random.default_rng(fam_spec.seed ^ 0xD20)
            video = render_clip(clip, spec, cam, config.image_size, config.keypoint_dropout, rng)
            entry.video = f"videos/{name}"
            entry.camera = {"s": cam.scale, "c": list(cam.center)}
            write_video(video, out_dir / entry.video)
        entries.append(entry)
        if split == "train":
            train_clips.append(clip)

    mean, std = compute_stats(train_clips) if train_clips else (np.zeros(FRAME_DIM), np.ones(FRAME_DIM))
    manifest = DatasetManifest(out_dir, entries, mean, std, config.to_dict())
    manifest.save(out_dir / "dataset.manifest.json")
    return manifest
