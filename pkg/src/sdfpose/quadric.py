"""Ellipsoid initialization from multi-view segmentation masks.

Pipeline: fit an ellipse to each mask, stack the dual-conic projection
constraints of all views into a homogeneous system ``M w = 0``, take its
null vector as the dual quadric, and read the object's SIM(3) pose off the
recovered ellipsoid given the class semi-axes.

``vech`` serializes the lower triangle column by column, e.g. for 4x4:
(0,0) (1,0) (2,0) (3,0) (1,1) (2,1) (3,1) (2,2) (3,2) (3,3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lie import Sim3, rotation_angle


class DegenerateObservation(ValueError):
    pass


class InsufficientViews(ValueError):
    pass


class AmbiguousSolution(ValueError):
    pass


class NonEllipsoid(ValueError):
    pass


def vech_indices(n: int) -> list[tuple[int, int]]:
    return [(i, j) for j in range(n) for i in range(j, n)]


def vech(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.array([S[i, j] for i, j in vech_indices(S.shape[0])])


def unvech(v, n: int) -> np.ndarray:
    S = np.zeros((n, n))
    for value, (i, j) in zip(v, vech_indices(n)):
        S[i, j] = S[j, i] = value
    return S


@dataclass(frozen=True, eq=False)
class FittedEllipse:
    center: np.ndarray
    shape: np.ndarray

    @property
    def dual_conic(self) -> np.ndarray:
        c, E = self.center, self.shape
        H = np.empty((3, 3))
        H[:2, :2] = E - np.outer(c, c)
        H[:2, 2] = H[2, :2] = -c
        H[2, 2] = -1.0
        return H

    @property
    def axes(self) -> np.ndarray:
        """Semi-axis lengths (square roots of the eigenvalues of ``shape``)."""
        return np.sqrt(np.linalg.eigvalsh(self.shape))[::-1]


def fit_ellipse(points, moment_factor: float = 2.0) -> FittedEllipse:
    """Moment fit of an ellipse to a set of normalized pixel coordinates.

    ``center`` is the mean and ``shape = moment_factor * scatter / N``.
    The default factor 2 reproduces the boundary of a point set spread along
    the ellipse outline; pass 4 for filled (raster) masks, whose second moment
    is a quarter of the shape matrix.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        raise DegenerateObservation(f"mask has only {len(p)} pixels")
    c = p.mean(axis=0)
    d = p - c
    E = moment_factor * (d.T @ d) / len(p)
    if np.linalg.eigvalsh(E)[0] < 1e-12:
        raise DegenerateObservation("mask pixels are collinear")
    return FittedEllipse(c, E)


def ellipse_from_dual_conic(H: np.ndarray) -> FittedEllipse:
    """Inverse of :attr:`FittedEllipse.dual_conic` for any nonzero scaling of H."""
    H = np.asarray(H, dtype=float)
    H = H / -H[2, 2]
    c = -H[:2, 2]
    return FittedEllipse(c, H[:2, :2] + np.outer(c, c))


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """Camera pose: optical frame -> world, a rigid transform."""

    pose: Sim3
    view_id: int = 0

    def __post_init__(self):
        if abs(self.pose.scale - 1.0) > 1e-9 or not self.pose.is_valid():
            raise ValueError("camera pose must be a rigid transform")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), view_id: int = 0) -> "CameraFrame":
        """Optical frame at ``eye`` with +z toward ``target`` (x right, y down)."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=float)
        if np.linalg.norm(np.cross(z, up)) < 1e-6:
            up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(Sim3.from_parts(1.0, np.column_stack([x, y, z]), eye), view_id)


def projection_operator(camera: CameraFrame) -> np.ndarray:
    """6x10 matrix G with ``vech(P C^-1 Q C^-T P^T) = G vech(Q)``."""
    A = camera.pose.inverse().matrix[:3, :]
    G = np.zeros((6, 10))
    for row, (i, j) in enumerate(vech_indices(3)):
        for col, (a, b) in enumerate(vech_indices(4)):
            if a == b:
                G[row, col] = A[i, a] * A[j, a]
            else:
                G[row, col] = A[i, a] * A[j, b] + A[i, b] * A[j, a]
    return G


def build_system(
    ellipses: Sequence[FittedEllipse],
    cameras: Sequence[CameraFrame],
    center_constrained: bool = True,
    center_weight: float = 1.0,
) -> np.ndarray:
    """Stack the per-view constraints ``G_k v - beta_k h_k = 0``.

    Unknowns are ordered ``w = (v, beta_1..beta_K)``. With
    ``center_constrained`` two more rows per view require the center of the
    projected conic ``G_k v`` to coincide with the fitted ellipse center;
    they involve v only, so they stay exact on noiseless data.
    """
    K = len(ellipses)
    if K != len(cameras):
        raise ValueError("one camera per ellipse required")
    if K < 3:
        raise InsufficientViews(f"need at least 3 views, got {K}")
    rows = 6 * K + (2 * K if center_constrained else 0)
    M = np.zeros((rows, 10 + K))
    for k, (ell, cam) in enumerate(zip(ellipses, cameras)):
        G = projection_operator(cam)
        h = vech(ell.dual_conic)
        # both blocks scaled to unit norm; beta absorbs the scale of h
        g_norm = np.linalg.norm(G)
        M[6 * k : 6 * k + 6, :10] = G / g_norm
        M[6 * k : 6 * k + 6, 10 + k] = -h / np.linalg.norm(h)
        if center_constrained:
            # vech positions of entries (0,2), (1,2), (2,2) of a 3x3 matrix
            cx, cy = ell.center
            r = 6 * K + 2 * k
            M[r, :10] = center_weight * (G[2] - cx * G[5]) / g_norm
            M[r + 1, :10] = center_weight * (G[4] - cy * G[5]) / g_norm
    return M


@dataclass(frozen=True, eq=False)
class DualQuadric:
    Q: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return vech(self.Q)

    @classmethod
    def from_vech(cls, v) -> "DualQuadric":
        return cls(unvech(v, 4))

    @classmethod
    def from_ellipsoid(cls, object_to_world: Sim3, axes) -> "DualQuadric":
        """``T diag(u^2, -1) T^T`` for an axis-aligned ellipsoid placed by T."""
        Qu = np.diag(np.append(np.asarray(axes, dtype=float) ** 2, -1.0))
        T = object_to_world.matrix
        return cls(T @ Qu @ T.T)

    def normalized(self) -> "DualQuadric":
        if abs(self.Q[3, 3]) < 1e-15:
            raise NonEllipsoid("Q*[3,3] vanishes; quadric is not a bounded ellipsoid")
        return DualQuadric(self.Q / -self.Q[3, 3])

    @property
    def center(self) -> np.ndarray:
        Q = self.normalized().Q
        return -Q[:3, 3]

    @property
    def shape_matrix(self) -> np.ndarray:
        """``P Q P^T + t t^T``; equals ``s^2 R U^2 R^T`` for a valid ellipsoid."""
        Q = self.normalized().Q
        t = -Q[:3, 3]
        return Q[:3, :3] + np.outer(t, t)

    def is_ellipsoid(self) -> bool:
        try:
            return bool(np.linalg.eigvalsh(self.shape_matrix)[0] > 0)
        except NonEllipsoid:
            return False

    @property
    def semi_axes(self) -> np.ndarray:
        """Semi-axis lengths in descending order."""
        return np.sqrt(np.clip(np.linalg.eigvalsh(self.shape_matrix), 0, None))[::-1]


def solve_dual_quadric(M: np.ndarray, ambiguity_tol: float = 1e-9) -> DualQuadric:
    if M.shape[1] < 10:
        raise ValueError("system needs at least 10 unknowns")
    _, svals, Vt = np.linalg.svd(M, full_matrices=True)
    n = M.shape[1]
    svals = np.concatenate([svals, np.zeros(max(0, n - len(svals)))])
    smallest, second = svals[n - 1], svals[n - 2]
    if second - smallest <= ambiguity_tol * max(svals[0], 1e-300):
        raise AmbiguousSolution(
            f"two smallest singular values {smallest:.3e}, {second:.3e} are not separated"
        )
    w = Vt[n - 1]
    quadric = DualQuadric.from_vech(w[:10]).normalized()
    if not quadric.is_ellipsoid():
        raise NonEllipsoid("recovered quadric is not an ellipsoid")
    return quadric


# rotation-preserving sign flips of the three axes
AXIS_FLIPS = [np.diag(d) for d in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1])]


@dataclass(frozen=True, eq=False)
class RecoveredPose:
    """Result of :func:`recover_pose`.

    ``object_to_world`` is ``T^-1`` (scale = object size); the optimizer works
    with ``world_to_object``. ``symmetric_axes`` lists groups of object axes
    whose semi-axes coincide, about which the rotation is unconstrained.
    """

    object_to_world: Sim3
    symmetric_axes: tuple = field(default_factory=tuple)

    @property
    def world_to_object(self) -> Sim3:
        return self.object_to_world.inverse()

    @property
    def scale(self) -> float:
        return self.object_to_world.scale

    @property
    def rotation(self) -> np.ndarray:
        return self.object_to_world.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.object_to_world.translation


def _closest_rotation_in_span(basis: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Orthonormal vectors in span(basis) closest (Procrustes) to ``targets``."""
    # basis: 3 x m orthonormal, targets: 3 x m
    U, _, Vt = np.linalg.svd(basis.T @ targets)
    return basis @ (U @ Vt)


def recover_pose(
    quadric: DualQuadric,
    axes,
    score: Callable[[Sim3], float] | None = None,
    tie_tol: float = 1e-6,
) -> RecoveredPose:
    """SIM(3) placement of the canonical ellipsoid ``axes`` that reproduces ``quadric``.

    Eigenvectors of ``A = P Q P^T + t t^T`` are matched to ``axes`` by rank
    (largest eigenvalue to largest semi-axis). Of the four sign patterns with
    det +1, the one picked minimizes ``score(world_to_object)`` when a score
    is given and the rotation angle from identity otherwise. Coinciding
    semi-axes leave a rotation unconstrained; the rotation nearest identity
    within the degenerate eigenspace is used and the axes are reported.
    """
    u = np.asarray(axes, dtype=float).reshape(3)
    if np.any(u <= 0):
        raise ValueError("semi-axes must be positive")
    A = quadric.shape_matrix
    t = quadric.center
    evals, evecs = np.linalg.eigh(A)
    if evals[0] < -1e-8 * max(1.0, abs(evals[-1])):
        raise NonEllipsoid(f"shape matrix has negative eigenvalue {evals[0]:.3e}")
    evals = np.clip(evals, 0.0, None)

    # eigenpairs sorted descending, matched to u sorted descending
    order_e = np.argsort(-evals, kind="stable")
    order_u = np.argsort(-u, kind="stable")
    Y = np.empty(3)
    V = np.empty((3, 3))
    for rank in range(3):
        Y[order_u[rank]] = evals[order_e[rank]]
        V[:, order_u[rank]] = evecs[:, order_e[rank]]

    scale = math.sqrt(float(np.sum(Y / u**2)) / 3.0)

    # groups of axes with (relatively) equal semi-axes
    groups: list[list[int]] = []
    for i in order_u:
        if groups and abs(u[groups[-1][0]] - u[i]) <= tie_tol * max(u):
            groups[-1].append(int(i))
        else:
            groups.append([int(i)])
    symmetric = tuple(tuple(sorted(g)) for g in groups if len(g) > 1)

    # inside a degenerate eigenspace pick the basis nearest the identity axes
    for g in groups:
        if len(g) > 1:
            V[:, g] = _closest_rotation_in_span(V[:, g], np.eye(3)[:, g])
    if np.linalg.det(V) < 0:
        V[:, order_u[-1]] *= -1

    candidates = []
    for F in AXIS_FLIPS:
        R = V @ F
        if symmetric:
            for g in symmetric:
                R[:, list(g)] = _closest_rotation_in_span(R[:, list(g)], np.eye(3)[:, list(g)])
            if np.linalg.det(R) < 0:
                continue
        candidates.append(Sim3.from_parts(scale, R, t))

    if score is not None:
        best = min(candidates, key=lambda T: score(T.inverse()))
    else:
        best = min(candidates, key=lambda T: rotation_angle(T.rotation))
    return RecoveredPose(best, symmetric)


def conic_of_ellipsoid(quadric: DualQuadric, camera: CameraFrame) -> np.ndarray:
    """Dual conic ``P C^-1 Q C^-T P^T`` (unnormalized)."""
    A = camera.pose.inverse().matrix[:3, :]
    return A @ quadric.Q @ A.T


def initialize(
    masks_points: Sequence[np.ndarray],
    cameras: Sequence[CameraFrame],
    axes,
    moment_factor: float = 4.0,
    center_constrained: bool = True,
) -> RecoveredPose:
    """Ellipse fits -> dual quadric -> pose, skipping degenerate views."""
    ellipses, used = [], []
    for pts, cam in zip(masks_points, cameras):
        try:
            ellipses.append(fit_ellipse(pts, moment_factor))
        except DegenerateObservation:
            continue
        used.append(cam)
    M = build_system(ellipses, used, center_constrained=center_constrained)
    return recover_pose(solve_dual_quadric(M), axes)


def flip_equivalent(R1: np.ndarray, R2: np.ndarray) -> float:
    """Smallest angle between R1 and R2 F over the axis-flip group."""
    return min(rotation_angle(R1.T @ R2 @ F) for F in AXIS_FLIPS)


__all__ = [
    "AXIS_FLIPS",
    "AmbiguousSolution",
    "CameraFrame",
    "DegenerateObservation",
    "DualQuadric",
    "FittedEllipse",
    "InsufficientViews",
    "NonEllipsoid",
    "RecoveredPose",
    "build_system",
    "conic_of_ellipsoid",
    "ellipse_from_dual_conic",
    "fit_ellipse",
    "flip_equivalent",
    "initialize",
    "projection_operator",
    "recover_pose",
    "solve_dual_quadric",
    "unvech",
    "vech",
]
