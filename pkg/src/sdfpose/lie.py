"""SO(3) / SIM(3) helpers.

Tangent vectors of SIM(3) are 7-vectors ordered ``(rho, theta, sigma)``:
translation part, rotation vector, log-scale. Perturbations are applied on
the left, ``T' = exp(xi) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# below this rotation angle the Rodrigues coefficients use their Taylor limits
SMALL_ANGLE = 1e-6
# below this |X|^2 (X = sigma*I + theta_x) the SIM(3) left Jacobian uses the matrix series
SMALL_GENERATOR = 1e-4
LOG_ANGLE_LIMIT = math.pi - 1e-6


class LieDomainError(ValueError):
    """Raised when log is requested at (or too close to) a rotation of angle pi."""


def hat_so3(theta) -> np.ndarray:
    t = np.asarray(theta, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -t[2], t[1]],
            [t[2], 0.0, -t[0]],
            [-t[1], t[0], 0.0],
        ]
    )


def vee_so3(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def hat_sim3(xi) -> np.ndarray:
    """4x4 Lie algebra matrix ``[sigma*I + theta_x, rho; 0, 0]``."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    out = np.zeros((4, 4))
    out[:3, :3] = xi[6] * np.eye(3) + hat_so3(xi[3:6])
    out[:3, 3] = xi[:3]
    return out


def exp_so3(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    K = hat_so3(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (math.sin(angle) / angle) * K
        + ((1.0 - math.cos(angle)) / angle**2) * K @ K
    )


def log_so3(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    v = 0.5 * vee_so3(R - R.T)
    sin_a = float(np.linalg.norm(v))
    cos_a = 0.5 * (float(np.trace(R)) - 1.0)
    angle = math.atan2(sin_a, cos_a)
    if angle >= LOG_ANGLE_LIMIT:
        raise LieDomainError(f"rotation angle {angle:.9f} too close to pi for log")
    if sin_a < SMALL_ANGLE:
        return v * (1.0 + angle * angle / 6.0)
    return v * (angle / sin_a)


def _sim3_left_jacobian(theta: np.ndarray, sigma: float) -> np.ndarray:
    """``sum_n X^n / (n+1)!`` for ``X = sigma*I + theta_x``.

    This is the block that maps rho onto the translation of ``exp(xi)``.
    """
    angle = float(np.linalg.norm(theta))
    K = hat_so3(theta)
    if angle * angle + sigma * sigma < SMALL_GENERATOR:
        X = sigma * np.eye(3) + K
        out = np.eye(3)
        term = np.eye(3)
        for n in range(1, 14):
            term = term @ X / (n + 1)
            out = out + term
        return out

    if abs(sigma) < SMALL_ANGLE:
        a = 1.0 + 0.5 * sigma + sigma * sigma / 6.0
    else:
        a = math.expm1(sigma) / sigma

    if angle < SMALL_ANGLE:
        # theta -> 0 limits, exact in sigma
        es = math.exp(sigma)
        b = (es * (sigma - 1.0) + 1.0) / sigma**2
        c = (es * (sigma * sigma - 2.0 * sigma + 2.0) - 2.0) / (2.0 * sigma**3)
        return a * np.eye(3) + b * K + c * K @ K

    es = math.exp(sigma)
    sa, ca = math.sin(angle), math.cos(angle)
    denom = sigma * sigma + angle * angle
    int_sin = (es * (sigma * sa - angle * ca) + angle) / denom
    int_cos = (es * (sigma * ca + angle * sa) - sigma) / denom
    b = int_sin / angle
    c = (a - int_cos) / (angle * angle)
    return a * np.eye(3) + b * K + c * K @ K


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform stored as a 4x4 matrix ``[sR, t; 0, 1]``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(4, 4)
        m[3] = (0.0, 0.0, 0.0, 1.0)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, scale: float = 1.0, rotation=None, translation=None) -> "Sim3":
        if scale <= 0:
            raise ValueError("scale must be positive")
        m = np.eye(4)
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        m[:3, :3] = scale * R
        if translation is not None:
            m[:3, 3] = np.asarray(translation, dtype=float).reshape(3)
        return cls(m)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Sim3":
        """Inverse of :meth:`to_list` (row-major 16 numbers)."""
        if len(values) != 16:
            raise ValueError("expected 16 values")
        return cls(np.asarray(values, dtype=float).reshape(4, 4))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.reshape(-1)]

    @property
    def scale(self) -> float:
        return float(np.cbrt(np.linalg.det(self.matrix[:3, :3])))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3] / self.scale

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3].copy()

    def inverse(self) -> "Sim3":
        s, R, t = self.scale, self.rotation, self.translation
        return Sim3.from_parts(1.0 / s, R.T, -(R.T @ t) / s)

    def apply(self, points) -> np.ndarray:
        """Map an (N, 3) array (or a single 3-vector) through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return Sim3(self.matrix @ other.matrix)

    def is_valid(self, tol: float = 1e-9) -> bool:
        s = self.scale
        if not np.isfinite(self.matrix).all() or s <= 0:
            return False
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
        )


def exp_sim3(xi) -> Sim3:
    xi = np.asarray(xi, dtype=float).reshape(7)
    rho, theta, sigma = xi[:3], xi[3:6], float(xi[6])
    m = np.eye(4)
    m[:3, :3] = math.exp(sigma) * exp_so3(theta)
    m[:3, 3] = _sim3_left_jacobian(theta, sigma) @ rho
    return Sim3(m)


def log_sim3(T: Sim3) -> np.ndarray:
    """Tangent vector with ``exp_sim3(log_sim3(T)) == T``.

    Raises :class:`LieDomainError` when the rotation angle is within 1e-6 of pi.
    """
    theta = log_so3(T.rotation)
    sigma = math.log(T.scale)
    W = _sim3_left_jacobian(theta, sigma)
    rho = np.linalg.solve(W, T.translation)
    return np.concatenate([rho, theta, [sigma]])


def retract(T: Sim3, xi) -> Sim3:
    """Left perturbation ``exp(xi) @ T``."""
    return exp_sim3(xi) @ T


def odot(x_hom) -> np.ndarray:
    """4x7 matrix with ``hat_sim3(xi) @ x_hom == odot(x_hom) @ xi``."""
    x_hom = np.asarray(x_hom, dtype=float).reshape(4)
    x = x_hom[:3]
    out = np.zeros((4, 7))
    out[:3, :3] = np.eye(3)
    out[:3, 3:6] = -hat_so3(x)
    out[:3, 6] = x
    return out


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = 0.5 * (float(np.trace(R)) - 1.0)
    s = float(np.linalg.norm(0.5 * vee_so3(R - R.T)))
    return math.atan2(s, c)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
