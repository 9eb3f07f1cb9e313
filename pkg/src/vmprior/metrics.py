"""Pose-accuracy and diversity metrics on joint tracks.

Tracks are numpy arrays of shape (T, J, 3); sample sets are (N, T, J, 3).
MPJPE and MPVPE are root-relative: joint 0 is subtracted per frame from both
inputs before comparing.
"""
from __future__ import annotations

import numpy as np


class DegenerateConfigurationError(ValueError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim < 2 or pred.shape[-1] != 3:
        raise ValueError(f"expected (..., K, 3) points, got {pred.shape}")
    return pred, gt


def root_align(track: np.ndarray, root: int = 0) -> np.ndarray:
    return track - track[..., root:root + 1, :]


def mpjpe(pred, gt, root: int | None = 0) -> float:
    """Mean per-joint position error; ``root=None`` skips root alignment."""
    pred, gt = _pair(pred, gt)
    if root is not None:
        pred, gt = root_align(pred, root), root_align(gt, root)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mpvpe(pred_vertices, gt_vertices, pred_root=None, gt_root=None) -> float:
    """Mean per-vertex error. Root-aligned when the (T, 3) root joint
    positions of both bodies are given."""
    pred, gt = _pair(pred_vertices, gt_vertices)
    if pred_root is not None and gt_root is not None:
        pred = pred - np.asarray(pred_root, dtype=np.float64)[..., None, :]
        gt = gt - np.asarray(gt_root, dtype=np.float64)[..., None, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def procrustes_align(X, Y) -> tuple[np.ndarray, float, np.ndarray]:
    """Similarity (R, s, t) minimising sum_k ||s R x_k + t - y_k||^2 for (K, 3) inputs."""
    X, Y = _pair(X, Y)
    if X.ndim != 2 or X.shape[0] < 3:
        raise DegenerateConfigurationError("need at least 3 corresponding points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = (Xc**2).sum()
    sv = np.linalg.svd(Xc, compute_uv=False)
    if var_x <= 1e-12 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("source points are (nearly) collinear or coincident")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ D @ Vt
    s = float((S * np.diag(D)).sum() / var_x)
    t = my - s * R @ mx
    return R, s, t


def apply_similarity(X, R, s, t) -> np.ndarray:
    return s * np.asarray(X) @ np.asarray(R).T + t


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame Procrustes alignment of pred onto gt."""
    pred, gt = _pair(pred, gt)
    frames_p = pred.reshape(-1, *pred.shape[-2:])
    frames_g = gt.reshape(-1, *gt.shape[-2:])
    errs = []
    for p, g in zip(frames_p, frames_g):
        R, s, t = procrustes_align(p, g)
        if np.array_equal(p, g):
            # the identity is optimal; skip the SVD round-off
            errs.append(np.zeros(len(p)))
            continue
        errs.append(np.linalg.norm(apply_similarity(p, R, s, t) - g, axis=-1))
    return float(np.mean(errs))


def accel_error(pred, gt, fps: float = 25.0) -> float:
    """Mean L2 difference of second temporal differences, in units / s^2."""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 3:
        raise ValueError("acceleration error needs at least 3 frames")
    acc_p = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    acc_g = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(acc_p - acc_g, axis=-1).mean() * fps**2)


def _samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (N, T, J, 3) samples, got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("diversity needs at least two samples")
    return x


def apd(samples) -> float:
    """Average pairwise distance: mean over pairs i<j, frames and joints."""
    x = _samples(samples)
    i, j = np.triu_indices(x.shape[0], k=1)
    return float(np.linalg.norm(x[i] - x[j], axis=-1).mean())


def clip_apd(samples) -> float:
    """Pairwise distance between whole flattened clips, scaled by 1/sqrt(T*J)."""
    x = _samples(samples)
    n, T, J, _ = x.shape
    flat = x.reshape(n, -1)
    i, j = np.triu_indices(n, k=1)
    return float((np.linalg.norm(flat[i] - flat[j], axis=-1) / np.sqrt(T * J)).mean())


def local_apd(samples, sigma_scale: float | None = None, root: int = 0) -> float:
    """APD after subtracting each clip's per-frame root position.

    ``sigma_scale`` only labels the sampling regime; it does not enter the value.
    """
    return apd(root_align(_samples(samples), root))


def pose_report(pred_joints, gt_joints, pred_vertices=None, gt_vertices=None, fps: float = 25.0) -> dict:
    report = {
        "mpjpe": mpjpe(pred_joints, gt_joints),
        "pa_mpjpe": pa_mpjpe(pred_joints, gt_joints),
        "mpvpe": None,
        "accel": accel_error(pred_joints, gt_joints, fps),
    }
    if pred_vertices is not None and gt_vertices is not None:
        report["mpvpe"] = mpvpe(pred_vertices, gt_vertices, np.asarray(pred_joints)[..., 0, :], np.asarray(gt_joints)[..., 0, :])
    return report


def diversity_report(samples_s1, samples_s5=None) -> dict:
    report = {"apd": apd(samples_s1), "clip_apd": clip_apd(samples_s1), "local_apd_s1": local_apd(samples_s1, 1.0)}
    report["local_apd_s5"] = local_apd(samples_s5, 5.0) if samples_s5 is not None else None
    return report
