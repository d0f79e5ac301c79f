"""Per-object orchestration: masks -> ellipsoid initialization -> joint
pose/shape optimization -> world-frame reconstruction and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import quadric
from .decoder import DecoderWeights
from .lie import Sim3
from .mesh import Mesh, marching_cubes, sdf_grid, transform_mesh
from .metrics import bbox_iou_3d, fitting_rate, pose_accurate, pose_errors
from .optim import ObjectEstimate, OptimConfig, optimize
from .scene import DEFAULT_EPSILON, Intrinsics, PointSet, mask_truncated, observe_object


MIN_MASK_PIXELS = 20


@dataclass(eq=False)
class Initialization:
    world_to_object: Sim3
    quadric: quadric.DualQuadric
    symmetric_axes: tuple = ()


@dataclass(eq=False)
class ObjectResult:
    object_id: int
    init: Sim3  # world -> object
    estimate: ObjectEstimate
    symmetric_axes: tuple = ()


def class_code(weights: DecoderWeights) -> np.ndarray:
    return weights.class_code if weights.class_code is not None else np.zeros(weights.latent_dim)


def view_ellipses(views, object_id: int, intrinsics: Intrinsics, min_pixels: int = MIN_MASK_PIXELS):
    """Ellipses fitted to the object's mask in every usable view, with the
    matching cameras. Masks touching the image border or smaller than
    ``min_pixels`` are left out."""
    grid = intrinsics.normalized_grid()
    ellipses, cams = [], []
    for v in views:
        m = v.masks.get(object_id)
        if v.skipped or m is None or m.sum() < min_pixels or mask_truncated(m):
            continue
        try:
            ellipses.append(quadric.fit_ellipse(grid[m], moment_factor=4.0))
        except quadric.DegenerateObservation:
            continue
        cams.append(v.camera)
    return ellipses, cams


def flip_score(points: PointSet, weights: DecoderWeights, config: OptimConfig | None = None, iterations: int = 15, max_points: int = 2000):
    """Score for :func:`quadric.recover_pose`: the error reached by a short
    optimization from the candidate. The raw error at the candidates is not
    reliable because the initial rotation is itself off by tens of degrees."""
    cfg = config or OptimConfig()
    short = replace(cfg, max_iterations=iterations, max_points=min(cfg.max_points, max_points))
    z = class_code(weights)
    return lambda W: optimize(W, points, weights, z, short).final_error


def initialize_from_ellipses(ellipses, cameras, axes, score=None) -> Initialization:
    Q = quadric.solve_dual_quadric(quadric.build_system(ellipses, cameras))
    rec = quadric.recover_pose(Q, axes, score=score)
    return Initialization(rec.world_to_object, Q, rec.symmetric_axes)


def initialize_object(
    views,
    object_id: int,
    intrinsics: Intrinsics,
    weights: DecoderWeights,
    points: PointSet | None = None,
    config: OptimConfig | None = None,
    flip_iterations: int = 15,
) -> Initialization:
    """Initial world -> object pose from the masks of all usable views, with
    the class ellipsoid ``g(z)`` as the canonical shape. The axis flip is
    chosen by :func:`flip_score` when observation ``points`` are given."""
    ellipses, cams = view_ellipses(views, object_id, intrinsics)
    score = None
    if points is not None and len(points) and flip_iterations > 0:
        score = flip_score(points, weights, config, flip_iterations)
    return initialize_from_ellipses(ellipses, cams, weights.coarse_decode(class_code(weights)), score)


def estimate_object(views, object_id, intrinsics, weights, config=None, epsilon=DEFAULT_EPSILON) -> ObjectResult:
    cfg = config or OptimConfig()
    pts = observe_object(views, object_id, epsilon, intrinsics)
    init = initialize_object(views, object_id, intrinsics, weights, pts, cfg)
    est = optimize(init.world_to_object, pts, weights, class_code(weights), cfg)
    return ObjectResult(object_id, init.world_to_object, est, init.symmetric_axes)


def reconstruct(weights: DecoderWeights, estimate: ObjectEstimate, resolution: int = 64) -> Mesh:
    code = class_code(weights) + estimate.delta_z
    return transform_mesh(marching_cubes(sdf_grid(weights, code, resolution)), estimate.T)


def evaluate_object(obj, T_pred: Sim3, mesh: Mesh | None, n_gt: int = 4000, seed: int = 0, lam: float = 0.2) -> dict:
    """Pose errors (object-to-world), accuracy, fitting rate and box IoU."""
    errs = pose_errors(T_pred.inverse(), obj.object_to_world)
    row = {
        "rot_deg": errs.rotation_deg,
        "trans": errs.translation,
        "scale_pct": errs.scale_pct,
        "accurate": pose_accurate(errs),
        "fit_rate": float("nan"),
        "iou": float("nan"),
    }
    if mesh is not None and not mesh.is_empty:
        gt = obj.surface_points_world(n_gt, np.random.default_rng(seed))
        row["fit_rate"] = fitting_rate(mesh.vertices, gt, lam)
        row["iou"] = bbox_iou_3d(mesh.vertices, gt)
    return row
