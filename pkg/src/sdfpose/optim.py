"""Test-time joint pose and shape optimization.

The estimate is ``(T, dz)``: ``T`` maps world points into the object frame
and ``dz`` deforms the fixed class code ``z``. A world point ``x`` with label
``d`` contributes the residuals

    fine:   r = s * f(T x; z + dz) - d
    coarse: r = s * h(T x, g(z + dz)) - d

where ``s = 1 / scale(T)`` converts object-frame distances back to world
units. Perturbations are on the left, ``T <- exp(xi) T``, so ``xi`` acts in
the object frame and ``ds/dsigma = -s``. The error is

    alpha * |dz|^2 + mean over points of (beta * huber(r_fine) + gamma * huber(r_coarse)).

Descent follows ``T <- exp(-eta1 de/dxi) T``, ``dz <- dz - eta2 de/ddz``
with a shared step multiplier that is halved until the error does not
increase and grown again after accepted steps. By default each gradient
entry is first divided by the diagonal of the Gauss-Newton matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np

from .decoder import DecoderWeights, ellipsoid_sdf, ellipsoid_sdf_gradient
from .lie import Sim3, exp_sim3, odot


MAX_STEP = 1.0


class EmptyObservation(ValueError):
    pass


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class ShapeModel(Protocol):
    latent_dim: int

    def fine(self, Y: np.ndarray, z: np.ndarray):
        """Values (N,), gradients wrt points (N,3) and wrt code (N,d)."""

    def coarse(self, z: np.ndarray):
        """Semi-axes (3,) and their Jacobian wrt the code (3,d)."""


@dataclass(frozen=True)
class NeuralShapeModel:
    """Adapter exposing :class:`DecoderWeights` through :class:`ShapeModel`."""

    weights: DecoderWeights

    @property
    def latent_dim(self) -> int:
        return self.weights.latent_dim

    def fine(self, Y, z):
        return self.weights.fine_value_and_gradients(Y, z)

    def coarse(self, z):
        return self.weights.coarse_decode(z), self.weights.coarse_jacobian(z)


def as_shape_model(decoder) -> ShapeModel:
    return NeuralShapeModel(decoder) if isinstance(decoder, DecoderWeights) else decoder


def huber(r, delta: float):
    """Huber value and derivative (elementwise for arrays)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    quad = a <= delta
    value = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    deriv = np.where(quad, r, delta * np.sign(r))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


@dataclass
class OptimConfig:
    alpha: float = 1e-2
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.05
    eta1: float = 0.5
    eta2: float = 0.5
    precondition: bool = True
    damping: float = 1e-6
    max_iterations: int = 200
    tolerance: float = 1e-6
    max_points: int = 10000
    max_halvings: int = 30
    growth: float = 1.5
    seed: int = 0

    def __post_init__(self):
        for name in ("delta", "eta1", "eta2", "tolerance", "max_points", "growth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"OptimConfig.{name} must be positive")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"OptimConfig.{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ObjectEstimate:
    T: Sim3  # world -> object
    delta_z: np.ndarray
    iterations: int = 0
    final_error: float = float("nan")
    breakdown: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def object_to_world(self) -> Sim3:
        return self.T.inverse()

    def to_dict(self) -> dict:
        return {
            "T": self.T.to_list(),
            "delta_z": [float(v) for v in self.delta_z],
            "convergence": {
                "iterations": self.iterations,
                "final_error": self.final_error,
                "breakdown": self.breakdown,
                "history": self.history,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectEstimate":
        c = d.get("convergence", {})
        return cls(
            Sim3.from_list(d["T"]),
            np.asarray(d["delta_z"], dtype=float),
            c.get("iterations", 0),
            c.get("final_error", float("nan")),
            c.get("breakdown", {}),
            c.get("history", []),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --------------------------------------------------------- per-point terms


def _object_frame(X, T: Sim3):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return T.apply(X), 1.0 / T.scale


def _pose_rows(Y, s, value, grad_x):
    """``d (s * value(T x)) / d xi`` for every point, shape (N, 7)."""
    J = np.einsum("ni,nij->nj", grad_x, _odot_batch(Y))
    J[:, 6] -= value
    return s * J


def _odot_batch(Y):
    N = len(Y)
    out = np.zeros((N, 3, 7))
    out[:, 0, 0] = out[:, 1, 1] = out[:, 2, 2] = 1.0
    x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
    # -[y]x block
    out[:, 0, 4], out[:, 0, 5] = z, -y
    out[:, 1, 3], out[:, 1, 5] = -z, x
    out[:, 2, 3], out[:, 2, 4] = y, -x
    out[:, :, 6] = Y
    return out


def fine_residuals(X, D, T: Sim3, delta_z, decoder, z, jacobians: bool = True):
    """Fine residuals ``s f(T x; z + dz) - d`` with ``dr/dxi`` (N,7) and ``dr/d dz`` (N,d)."""
    model = as_shape_model(decoder)
    Y, s = _object_frame(X, T)
    code = np.asarray(z, dtype=float) + np.asarray(delta_z, dtype=float)
    f, gx, gz = model.fine(Y, code)
    r = s * f - np.asarray(D, dtype=float)
    if not jacobians:
        return r, None, None
    return r, _pose_rows(Y, s, f, gx), s * gz


def coarse_residuals(X, D, T: Sim3, delta_z, decoder, z, jacobians: bool = True):
    """Coarse residuals ``s h(T x, g(z + dz)) - d`` and their Jacobians."""
    model = as_shape_model(decoder)
    Y, s = _object_frame(X, T)
    code = np.asarray(z, dtype=float) + np.asarray(delta_z, dtype=float)
    u, du_dz = model.coarse(code)
    h = ellipsoid_sdf(Y, u)
    r = s * h - np.asarray(D, dtype=float)
    if not jacobians:
        return r, None, None
    gx, gu = ellipsoid_sdf_gradient(Y, u)
    return r, _pose_rows(Y, s, h, gx), s * (gu @ du_dz)


def _terms(residuals, X, D, T, delta_z, decoder, z, delta, jacobians):
    r, Jxi, Jz = residuals(X, D, T, delta_z, decoder, z, jacobians)
    val, der = huber(r, delta)
    val = np.atleast_1d(val)
    if not jacobians:
        return val, None, None
    der = np.atleast_1d(der)[:, None]
    return val, der * Jxi, der * Jz


def fine_terms(X, D, T: Sim3, delta_z, decoder, z, delta: float, jacobians: bool = True):
    """Per-point Huber values of the fine residual, plus their gradients
    ``d/dxi`` (N,7) and ``d/d dz`` (N,d) when requested."""
    return _terms(fine_residuals, X, D, T, delta_z, decoder, z, delta, jacobians)


def coarse_terms(X, D, T: Sim3, delta_z, decoder, z, delta: float, jacobians: bool = True):
    return _terms(coarse_residuals, X, D, T, delta_z, decoder, z, delta, jacobians)


def fine_error(x, d, T, delta_z, decoder, z, delta: float = 0.05) -> float:
    """Huber fine error of a single labelled point."""
    return float(fine_terms([x], [d], T, delta_z, decoder, z, delta, jacobians=False)[0][0])


def coarse_error(x, d, T, delta_z, decoder, z, delta: float = 0.05) -> float:
    return float(coarse_terms([x], [d], T, delta_z, decoder, z, delta, jacobians=False)[0][0])


def pose_jacobian(x, d, T, delta_z, decoder, z, delta: float = 0.05, level: str = "fine") -> np.ndarray:
    terms = fine_terms if level == "fine" else coarse_terms
    return terms([x], [d], T, delta_z, decoder, z, delta)[1][0]


def code_jacobian(x, d, T, delta_z, decoder, z, delta: float = 0.05, level: str = "fine") -> np.ndarray:
    terms = fine_terms if level == "fine" else coarse_terms
    return terms([x], [d], T, delta_z, decoder, z, delta)[2][0]


# ------------------------------------------------------------ whole problem


def _points(observation):
    X = np.asarray(observation.x, dtype=float)
    D = np.asarray(observation.d, dtype=float)
    if len(D) == 0:
        raise EmptyObservation("observation contains no points")
    return X, D


def evaluate(T, delta_z, X, D, decoder, z, cfg: OptimConfig, gradients: bool = True):
    """Total error, per-term breakdown, the two gradients, and the diagonal
    of the Gauss-Newton matrix (``None`` entries without gradients)."""
    N = len(D)
    delta_z = np.asarray(delta_z, dtype=float)
    reg = cfg.alpha * float(delta_z @ delta_z)
    g_xi = np.zeros(7)
    g_z = 2.0 * cfg.alpha * delta_z
    diag = np.concatenate([np.zeros(7), np.full(len(delta_z), 2.0 * cfg.alpha)])
    parts = {"fine": 0.0, "coarse": 0.0}
    for name, weight, residuals in (("fine", cfg.beta, fine_residuals), ("coarse", cfg.gamma, coarse_residuals)):
        if weight <= 0:
            continue
        r, Jxi, Jz = residuals(X, D, T, delta_z, decoder, z, gradients)
        val, der = huber(r, cfg.delta)
        parts[name] = weight * float(np.sum(val)) / N
        if gradients:
            g_xi += weight * (der @ Jxi) / N
            g_z = g_z + weight * (der @ Jz) / N
            # Huber curvature is 1 in the quadratic zone and 0 beyond it
            quad = (np.abs(r) <= cfg.delta).astype(float)
            diag[:7] += weight * (quad @ Jxi**2) / N
            diag[7:] += weight * (quad @ Jz**2) / N
    total = reg + parts["fine"] + parts["coarse"]
    breakdown = {"regularizer": reg, "fine": parts["fine"], "coarse": parts["coarse"]}
    if not gradients:
        return total, breakdown, None, None, None
    return total, breakdown, g_xi, g_z, diag


def total_error(estimate: ObjectEstimate, observation, decoder, z, config: OptimConfig | None = None):
    """``(value, breakdown)`` of the test-time objective for an estimate."""
    cfg = config or OptimConfig()
    X, D = _points(observation)
    total, breakdown, *_ = evaluate(estimate.T, estimate.delta_z, X, D, decoder, z, cfg, gradients=False)
    return total, breakdown


def subsample(observation, max_points: int, seed: int):
    X, D = _points(observation)
    if len(D) <= max_points:
        return X, D
    idx = np.sort(np.random.default_rng(seed).choice(len(D), size=max_points, replace=False))
    return X[idx], D[idx]


def optimize(T0: Sim3, observation, decoder, z, config: OptimConfig | None = None, delta_z0=None) -> ObjectEstimate:
    """First-order descent on SIM(3) x R^d from ``(T0, delta_z0)``.

    With ``config.precondition`` every gradient entry is divided by the
    matching diagonal entry of the Gauss-Newton matrix (plus damping), which
    evens out the very different curvatures of translation, rotation, scale
    and code directions; without it the update is the plain gradient step.
    """
    cfg = config or OptimConfig()
    if not T0.is_valid(1e-6):
        raise ValueError("initial pose is not a valid similarity transform")
    X, D = subsample(observation, cfg.max_points, cfg.seed)
    z = np.asarray(z, dtype=float)
    T = T0
    dz = np.zeros_like(z) if delta_z0 is None else np.asarray(delta_z0, dtype=float).copy()
    err, breakdown, g_xi, g_z, diag = evaluate(T, dz, X, D, decoder, z, cfg)
    initial = err
    history = [err]
    scale = 1.0
    it = 0
    e_new = err
    for it in range(1, cfg.max_iterations + 1):
        if cfg.precondition:
            pre = 1.0 / (diag + cfg.damping * (diag.max() + 1e-12))
            step_xi, step_z = cfg.eta1 * pre[:7] * g_xi, cfg.eta2 * pre[7:] * g_z
        else:
            step_xi, step_z = cfg.eta1 * g_xi, cfg.eta2 * g_z
        # with few points in the quadratic zone the diagonal can be tiny; cap
        # every component at MAX_STEP so the trial exponential stays finite
        largest = max(np.abs(step_xi).max(), np.abs(step_z).max() if step_z.size else 0.0)
        if largest > MAX_STEP:
            step_xi, step_z = step_xi * (MAX_STEP / largest), step_z * (MAX_STEP / largest)
        accepted = False
        for _ in range(cfg.max_halvings):
            T_new = exp_sim3(-scale * step_xi) @ T
            dz_new = dz - scale * step_z
            e_new = evaluate(T_new, dz_new, X, D, decoder, z, cfg, gradients=False)[0]
            if math.isfinite(e_new) and e_new <= err:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if not math.isfinite(e_new) or e_new > 10.0 * initial:
                raise OptimizationDiverged(f"error {e_new:.3e} exceeds 10x initial {initial:.3e}", history)
            it -= 1
            break
        change = err - e_new
        T, dz = T_new, dz_new
        err, breakdown, g_xi, g_z, diag = evaluate(T, dz, X, D, decoder, z, cfg)
        history.append(err)
        scale = min(scale * cfg.growth, 1.0)
        if change < cfg.tolerance:
            break
    return ObjectEstimate(T, dz, it, err, breakdown, history)
