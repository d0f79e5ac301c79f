"""Ground-truth parametric shapes for the synthetic corpus and scenes.

A shape is a superellipsoid (semi-axes ``a``, exponents ``e = (e1, e2)``)
pushed through a shear ``x += k1 z, y += k2 z``. The shear removes the
axis-flip symmetry of the plain superellipsoid, so object poses are
unambiguous. Exponents are kept in ``(0, 1]``, which keeps the body convex.

Distances use the gauge ``g = F^(e1/2)`` of the undeformed implicit ``F``:
``g`` is positively homogeneous of degree one, equals 1 exactly on the
surface, and for a convex body ``(g - 1) * inradius`` bounds the distance
from below (used for sphere tracing). Exact signed distances come from a
nearest-sample search followed by tangent-plane projection iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


@dataclass(frozen=True, eq=False)
class SuperShape:
    axes: tuple[float, float, float]
    exponents: tuple[float, float] = (1.0, 1.0)
    shear: tuple[float, float] = (0.0, 0.0)
    n_reference: int = 40000
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if min(self.axes) <= 0:
            raise ValueError("semi-axes must be positive")
        if not all(0 < e <= 1.0 for e in self.exponents):
            raise ValueError("exponents must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"axes": list(self.axes), "exponents": list(self.exponents), "shear": list(self.shear)}

    @classmethod
    def from_dict(cls, d: dict) -> "SuperShape":
        return cls(tuple(d["axes"]), tuple(d["exponents"]), tuple(d.get("shear", (0.0, 0.0))))

    @property
    def is_sphere(self) -> bool:
        return (
            len(set(self.axes)) == 1
            and tuple(self.exponents) == (1.0, 1.0)
            and tuple(self.shear) == (0.0, 0.0)
        )

    # ------------------------------------------------------------ geometry

    @property
    def deform(self) -> np.ndarray:
        k1, k2 = self.shear
        return np.array([[1.0, 0.0, k1], [0.0, 1.0, k2], [0.0, 0.0, 1.0]])

    @property
    def deform_inv(self) -> np.ndarray:
        k1, k2 = self.shear
        return np.array([[1.0, 0.0, -k1], [0.0, 1.0, -k2], [0.0, 0.0, 1.0]])

    def _base_gauge_and_grad(self, p: np.ndarray):
        """Gauge of the undeformed superellipsoid and its gradient, for (N, 3) p."""
        a = np.asarray(self.axes, dtype=float)
        e1, e2 = self.exponents
        q = np.abs(p) / a
        m = q.max(axis=1)
        safe = np.where(m > 0, m, 1.0)
        q = q / safe[:, None]
        X = q[:, 0] ** (2.0 / e2)
        Y = q[:, 1] ** (2.0 / e2)
        W = X + Y
        Z = q[:, 2] ** (2.0 / e1)
        Wp = np.where(W > 0, W, 1.0) ** (e2 / e1)
        Wp = np.where(W > 0, Wp, 0.0)
        F = Wp + Z
        g = F ** (e1 / 2.0)
        # derivatives at the normalized point; g is 1-homogeneous so grad is 0-homogeneous
        Wm = np.where(W > 0, np.where(W > 0, W, 1.0) ** (e2 / e1 - 1.0), 0.0)
        dF = np.empty_like(p)
        dF[:, 0] = (2.0 / e1) * Wm * q[:, 0] ** (2.0 / e2 - 1.0) / a[0]
        dF[:, 1] = (2.0 / e1) * Wm * q[:, 1] ** (2.0 / e2 - 1.0) / a[1]
        dF[:, 2] = (2.0 / e1) * q[:, 2] ** (2.0 / e1 - 1.0) / a[2]
        dF *= np.sign(p)
        grad = (e1 / 2.0) * (F ** (e1 / 2.0 - 1.0))[:, None] * dF
        return m * g, grad

    def gauge(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._base_gauge_and_grad(x @ self.deform_inv.T)[0]

    def gauge_grad(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._base_gauge_and_grad(x @ self.deform_inv.T)[1] @ self.deform_inv

    def normals(self, x) -> np.ndarray:
        n = self.gauge_grad(x)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def radial_project(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x / self.gauge(x)[:, None]

    def _reference(self):
        if "tree" not in self._cache:
            pts = self.radial_project(fibonacci_sphere(self.n_reference))
            nrm = self.normals(pts)
            self._cache["points"] = pts
            self._cache["normals"] = nrm
            self._cache["tree"] = cKDTree(pts)
            # support distance of the tangent planes: inradius of a convex body
            self._cache["inradius"] = float(np.min(np.einsum("ij,ij->i", pts, nrm)))
            self._cache["radius"] = float(np.max(np.linalg.norm(pts, axis=1)))
        return self._cache

    @property
    def inradius(self) -> float:
        return self._reference()["inradius"]

    @property
    def bounding_radius(self) -> float:
        return self._reference()["radius"]

    def closest_points(self, x, iterations: int = 20) -> np.ndarray:
        """Nearest surface points: reference-sample lookup, then damped
        tangent steps that are only accepted when they reduce the distance."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ref = self._reference()
        dist, idx = ref["tree"].query(x)
        p = ref["points"][idx]
        lam = np.ones(len(x))
        for _ in range(iterations):
            n = self.normals(p)
            step = x - p
            tangent = step - np.einsum("ij,ij->i", step, n)[:, None] * n
            cand = self.radial_project(p + lam[:, None] * tangent)
            cand_dist = np.linalg.norm(x - cand, axis=1)
            better = cand_dist < dist
            p = np.where(better[:, None], cand, p)
            dist = np.where(better, cand_dist, dist)
            lam = np.where(better, np.minimum(1.0, 2.0 * lam), 0.5 * lam)
        return p

    def sdf(self, x) -> np.ndarray:
        """Signed distance, negative inside."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.is_sphere:
            return np.linalg.norm(x, axis=1) - self.axes[0]
        d = np.linalg.norm(x - self.closest_points(x), axis=1)
        return np.where(self.gauge(x) < 1.0, -d, d)

    def distance_bound(self, x) -> np.ndarray:
        """Signed lower bound on the distance; same sign as :meth:`sdf`."""
        return (self.gauge(x) - 1.0) * self.inradius * 0.98

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform surface samples and their outward unit normals."""
        pool = max(8 * n, 20000)
        d = rng.normal(size=(pool, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        p = self.radial_project(d)
        nrm = self.normals(p)
        r = np.linalg.norm(p, axis=1)
        # area element of a radial parametrization: r^2 / cos(angle(n, ray))
        w = r**2 / np.einsum("ij,ij->i", nrm, d)
        idx = rng.choice(pool, size=n, replace=n > pool, p=w / w.sum())
        return p[idx], nrm[idx]

    def scaled(self, factor: float) -> "SuperShape":
        return SuperShape(tuple(float(a) * factor for a in self.axes), self.exponents, self.shear)
