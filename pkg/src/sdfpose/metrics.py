"""Pose, surface-fitting and bounding-box evaluation.

Poses are compared as object-to-world similarities: the translation is the
object's position in meters and the per-axis scales are its size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .lie import Sim3

TRANS_THRESHOLD = 0.2
ROT_THRESHOLD_DEG = 20.0
SCALE_THRESHOLD_PCT = 20.0


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``.

    Uses the trace formula; when ``tr(R) + 1`` is tiny (rotations near a half
    turn) it switches to the branch of the largest diagonal entry.
    """
    R = np.asarray(R, dtype=float)
    tr = float(np.trace(R))
    if tr + 1.0 > 1e-9:
        w = 0.5 * math.sqrt(max(tr + 1.0, 0.0))
        q = np.array([w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[1 + i] = 0.5 * r
        q[1 + j] = (R[j, i] + R[i, j]) / (2 * r)
        q[1 + k] = (R[k, i] + R[i, k]) / (2 * r)
        q[0] = (R[k, j] - R[j, k]) / (2 * r)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def decompose_pose(T) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(q, p, s)``: rotation quaternion, translation, per-axis scales
    ``s_i = |R_s e_i|`` of the linear block ``R_s``."""
    M = T.matrix if isinstance(T, Sim3) else np.asarray(T, dtype=float)
    Rs = M[:3, :3]
    s = np.linalg.norm(Rs, axis=0)
    return rotation_to_quaternion(Rs / s), M[:3, 3].copy(), s


def compose_pose(q, p, s) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = quaternion_to_rotation(q) * np.asarray(s, dtype=float)
    M[:3, 3] = p
    return M


@dataclass(frozen=True)
class PoseErrors:
    rotation_deg: float
    translation: float
    scale_pct: float

    def as_tuple(self):
        return (self.rotation_deg, self.translation, self.scale_pct)


def pose_errors(pred, gt) -> PoseErrors:
    q_p, p_p, s_p = decompose_pose(pred)
    q_g, p_g, s_g = decompose_pose(gt)
    c = min(1.0, abs(float(q_g @ q_p)))
    rot = math.degrees(2.0 * math.acos(c))
    trans = float(np.linalg.norm(p_p - p_g))
    scale = 100.0 * abs(float(np.mean(s_p / s_g)) - 1.0)
    return PoseErrors(rot, trans, scale)


def pose_accurate(errors) -> bool:
    rot, trans, scale = errors.as_tuple() if isinstance(errors, PoseErrors) else errors
    return bool(trans <= TRANS_THRESHOLD and rot <= ROT_THRESHOLD_DEG and scale <= SCALE_THRESHOLD_PCT)


def fitting_rate(S_est, S_gt, lam: float = 0.2) -> float:
    """Fraction of estimated points closer than ``lam`` to the reference set."""
    S_est = np.atleast_2d(np.asarray(S_est, dtype=float))
    S_gt = np.atleast_2d(np.asarray(S_gt, dtype=float))
    if S_est.size == 0 or S_gt.size == 0:
        raise ValueError("point sets must be nonempty")
    dist, _ = cKDTree(S_gt).query(S_est)
    return float(np.mean(dist < lam))


def bbox_iou_3d(S_est, S_gt) -> float:
    """IoU of the axis-aligned bounding boxes of two point sets."""
    A = np.atleast_2d(np.asarray(S_est, dtype=float))
    B = np.atleast_2d(np.asarray(S_gt, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("point sets must be nonempty")
    lo_a, hi_a = A.min(axis=0), A.max(axis=0)
    lo_b, hi_b = B.min(axis=0), B.max(axis=0)
    inter = np.prod(np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None))
    union = np.prod(hi_a - lo_a) + np.prod(hi_b - lo_b) - inter
    if union <= 0:
        return 1.0 if np.allclose(lo_a, lo_b) and np.allclose(hi_a, hi_b) else 0.0
    return float(inter / union)
