"""Self-describing weight container.

Layout (all integers little-endian)::

    bytes 0..3    magic b"VMP1"
    bytes 4..11   uint64 H, length of the JSON header
    next H bytes  UTF-8 JSON header
    rest          tensor data, concatenated

The header is ``{"format": "VMP1", "kind": str, "config": {...}, "meta": {...},
"tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}``; each
tensor's ``offset`` counts from the first data byte and its bytes are the
C-order little-endian array of ``dtype`` (float32, float64 or int64).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VMP1"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: dict, state: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"format": "VMP1", "kind": kind, "config": config, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode())
    data = memoryview(raw)[12 + hlen:]
    state = {}
    for e in header["tensors"]:
        buf = data[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return header, state


def state_digest(state: dict[str, torch.Tensor]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return state_digest(dict(module.state_dict()))


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


# model-specific wrappers -------------------------------------------------------


def save_prior(path, model, meta: dict | None = None) -> None:
    save_checkpoint(path, "prior", model.cfg.to_dict(), dict(model.state_dict()), meta)


def load_prior(path, dtype: torch.dtype | None = None):
    from .motion_prior import MotionVAE, PriorConfig

    header, state = load_checkpoint(path)
    if header.get("kind") != "prior":
        raise CheckpointError(f"{path}: expected a prior checkpoint, got {header.get('kind')!r}")
    model = MotionVAE(PriorConfig.from_dict(header["config"]))
    model.to(dtype or state["stats_mean"].dtype)
    model.load_state_dict(state)
    return model.eval()


def save_video_encoder(path, encoder, meta: dict | None = None) -> None:
    cfg = encoder.cfg.to_dict()
    cfg["latent_dim"] = encoder.mu_head.out_features
    save_checkpoint(path, "video_encoder", cfg, dict(encoder.state_dict()), meta)


def load_video_encoder(path, dtype: torch.dtype | None = None):
    from .video_encoder import VideoEncoder, VideoEncoderConfig

    header, state = load_checkpoint(path)
    if header.get("kind") != "video_encoder":
        raise CheckpointError(f"{path}: expected a video_encoder checkpoint, got {header.get('kind')!r}")
    cfg = dict(header["config"])
    latent_dim = cfg.pop("latent_dim", 256)
    enc = VideoEncoder(VideoEncoderConfig.from_dict(cfg), latent_dim=latent_dim)
    enc.to(dtype or state["mu_head.weight"].dtype)
    enc.load_state_dict(state)
    return enc.eval()
