"""Bi-level shape model: a coarse ellipsoid decoder and a fine SDF decoder
sharing one latent code, plus the closed-form ellipsoid distance
approximation used by the coarse level.

Fine decoder ``f(x, z)``: four dense layers of width ``hidden``; the input
``(x, z)`` is concatenated again to the input of layer 2. Coarse decoder
``g(z)``: two dense layers of width ``coarse_hidden`` followed by a softplus,
so the semi-axes it returns are always positive. Hidden activations are
``softplus(beta * t) / beta``.

Weight matrices are stored ``(in, out)`` so a batch is ``X @ W + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"SDFW"
CENTER_EPS = 1e-9


def softplus(t, beta: float = 1.0):
    return np.logaddexp(0.0, beta * t) / beta


def _softplus_and_slope(a, beta: float):
    """``softplus(beta a) / beta`` and its derivative, sharing one exponential."""
    t = beta * a
    e = np.exp(-np.abs(t))
    h = (np.maximum(t, 0.0) + np.log1p(e)) / beta
    slope = np.where(t >= 0, 1.0, e) / (1.0 + e)
    return h, slope


def _dense_init(rng, n_in, n_out, std=None):
    std = np.sqrt(2.0 / n_in) if std is None else std
    return rng.normal(scale=std, size=(n_in, n_out)), np.zeros(n_out)


@dataclass
class DecoderWeights:
    fine: list  # [(W, b)] * 4
    coarse: list  # [(W, b)] * 2
    latent_dim: int
    beta: float = 10.0
    skip_layer: int = 2
    class_code: np.ndarray | None = None

    # ------------------------------------------------------------ creation

    @classmethod
    def initialize(
        cls,
        latent_dim: int = 16,
        hidden: int = 64,
        coarse_hidden: int = 32,
        seed: int = 0,
        beta: float = 10.0,
        init_radius: float = 0.5,
    ) -> "DecoderWeights":
        """Random weights; the fine decoder starts close to a sphere of
        ``init_radius`` (geometric initialization), the coarse decoder to
        semi-axes of about the same size."""
        rng = np.random.default_rng(seed)
        n_in = 3 + latent_dim
        fine = [
            _dense_init(rng, n_in, hidden),
            _dense_init(rng, hidden, hidden),
            _dense_init(rng, hidden + n_in, hidden),
        ]
        W3 = rng.normal(loc=np.sqrt(np.pi / hidden), scale=1e-4, size=(hidden, 1))
        fine.append((W3, np.array([-init_radius])))
        # code inputs start with small weights so every code decodes alike
        for W, _ in (fine[0], fine[2]):
            W[-latent_dim:] *= 0.1
        c0 = _dense_init(rng, latent_dim, coarse_hidden)
        V1 = rng.normal(scale=1e-2, size=(coarse_hidden, 3))
        # softplus^-1(init_radius)
        c1 = np.full(3, np.log(np.expm1(init_radius)))
        return cls(fine, [c0, (V1, c1)], latent_dim, beta)

    def astype(self, dtype) -> "DecoderWeights":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    @property
    def hidden(self) -> int:
        return self.fine[0][0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in the declared file order."""
        out = []
        for W, b in self.fine + self.coarse:
            out += [W, b]
        return out

    def with_arrays(self, arrays) -> "DecoderWeights":
        it = iter(arrays)
        fine = [(next(it), next(it)) for _ in self.fine]
        coarse = [(next(it), next(it)) for _ in self.coarse]
        return DecoderWeights(fine, coarse, self.latent_dim, self.beta, self.skip_layer, self.class_code)

    def _check_code(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"code has dimension {z.shape[-1]}, decoder expects {self.latent_dim}")
        return z

    # ------------------------------------------------------------ fine level

    @property
    def dtype(self):
        return self.fine[0][0].dtype

    def _fine_forward(self, X, Z):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = self._check_code(Z)
        if X.shape[-1] != 3:
            raise ValueError("points must be 3-vectors")
        Z = np.broadcast_to(Z, (len(X), self.latent_dim))
        inp = np.concatenate([X, Z], axis=1).astype(self.dtype, copy=False)
        slopes, acts = [], []
        h = inp
        for i, (W, b) in enumerate(self.fine[:-1]):
            if i == self.skip_layer:
                h = np.concatenate([h, inp], axis=1)
            acts.append(h)
            h, slope = _softplus_and_slope(h @ W + b, self.beta)
            slopes.append(slope)
        acts.append(h)
        W, b = self.fine[-1]
        out = (h @ W + b)[:, 0]
        return out, (slopes, acts)

    def _fine_backward(self, cache, gout, want_params: bool):
        """Backpropagate ``d loss / d out`` (N,) to inputs and optionally params."""
        slopes, acts = cache
        n_in = 3 + self.latent_dim
        grads = [None] * len(self.fine)
        W, b = self.fine[-1]
        g = np.asarray(gout, dtype=self.dtype)[:, None]
        if want_params:
            grads[-1] = (acts[-1].T @ g, g.sum(axis=0))
        g = g @ W.T
        g_inp = 0.0
        for i in range(len(self.fine) - 2, -1, -1):
            W, b = self.fine[i]
            g = g * slopes[i]
            if want_params:
                grads[i] = (acts[i].T @ g, g.sum(axis=0))
            g = g @ W.T
            if i == self.skip_layer:
                g_inp = g_inp + g[:, -n_in:]
                g = g[:, :-n_in]
        g_inp = g_inp + g
        return g_inp, grads

    def fine_decode(self, X, z) -> np.ndarray:
        """SDF values at an (N, 3) batch (or a single point) for code ``z``."""
        return self._fine_forward(X, z)[0]

    def fine_gradients(self, X, z):
        """``(grad_x f (N,3), grad_z f (N,d))``; ``z`` may be per point."""
        out, cache = self._fine_forward(X, z)
        g_inp, _ = self._fine_backward(cache, np.ones_like(out), want_params=False)
        return g_inp[:, :3], g_inp[:, 3:]

    def fine_value_and_gradients(self, X, z):
        out, cache = self._fine_forward(X, z)
        g_inp, _ = self._fine_backward(cache, np.ones_like(out), want_params=False)
        return out, g_inp[:, :3], g_inp[:, 3:]

    def fine_forward_cached(self, X, Z):
        """Values plus the cache consumed by :meth:`fine_param_backward`."""
        return self._fine_forward(X, Z)

    def fine_param_backward(self, cache, gout):
        """Parameter gradients and code gradients of ``sum(gout * f)``."""
        g_inp, grads = self._fine_backward(cache, gout, want_params=True)
        return grads, g_inp[:, 3:]

    # ---------------------------------------------------------- coarse level

    def _coarse_forward(self, Z):
        Z = np.atleast_2d(self._check_code(Z))
        (W0, b0), (W1, b1) = self.coarse
        h0, slope0 = _softplus_and_slope(Z @ W0 + b0, self.beta)
        U, slope1 = _softplus_and_slope(h0 @ W1 + b1, 1.0)
        return U, (Z, slope0, h0, slope1)

    def _coarse_backward(self, cache, gU, want_params: bool):
        Z, slope0, h0, slope1 = cache
        (W0, b0), (W1, b1) = self.coarse
        g1 = gU * slope1
        grads = None
        g0 = (g1 @ W1.T) * slope0
        if want_params:
            grads = [(Z.T @ g0, g0.sum(axis=0)), (h0.T @ g1, g1.sum(axis=0))]
        return g0 @ W0.T, grads

    def coarse_decode(self, z) -> np.ndarray:
        """Semi-axes ``u = g(z)``; shape (3,) for one code, (M, 3) for a batch."""
        z = self._check_code(z)
        U = self._coarse_forward(z)[0]
        return U[0] if z.ndim == 1 else U

    def coarse_jacobian(self, z) -> np.ndarray:
        """``du/dz`` as a 3 x d matrix for a single code."""
        U, cache = self._coarse_forward(z)
        rows = [self._coarse_backward(cache, e[None, :], False)[0][0] for e in np.eye(3)]
        return np.stack(rows)

    def coarse_param_backward(self, Z, gU):
        _, cache = self._coarse_forward(Z)
        gZ, grads = self._coarse_backward(cache, np.atleast_2d(gU), True)
        return grads, gZ

    # --------------------------------------------------------------- file IO

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DecoderWeights":
        return cls.from_bytes(Path(path).read_bytes())

    def to_bytes(self) -> bytes:
        arrays = self.arrays()
        header = {
            "format_version": FORMAT_VERSION,
            "activation": f"softplus(beta={self.beta!r})",
            "beta": self.beta,
            "latent_dim": self.latent_dim,
            "skip_layer": self.skip_layer,
            "fine_layers": [list(W.shape) for W, _ in self.fine],
            "coarse_layers": [list(W.shape) for W, _ in self.coarse],
            "has_class_code": self.class_code is not None,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<I", len(blob)), blob]
        for a in arrays:
            parts.append(np.asarray(a, dtype="<f4").tobytes())
        if self.class_code is not None:
            parts.append(np.asarray(self.class_code, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DecoderWeights":
        if data[:4] != MAGIC:
            raise ValueError("not a decoder weights file")
        (n,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8 : 8 + n])
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported weights format {header['format_version']}")
        offset = 8 + n

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(float)
            offset += 4 * count
            return arr.reshape(shape)

        fine = [(take(s), take((s[1],))) for s in header["fine_layers"]]
        coarse = [(take(s), take((s[1],))) for s in header["coarse_layers"]]
        d = header["latent_dim"]
        code = take((d,)) if header["has_class_code"] else None
        if offset != len(data):
            raise ValueError("trailing bytes in weights file")
        return cls(fine, coarse, d, header["beta"], header["skip_layer"], code)


# ------------------------------------------------------------- ellipsoid SDF


def ellipsoid_sdf(x, u) -> np.ndarray:
    """``|U^-1 x| (|U^-1 x| - 1) / |U^-2 x|`` for (N, 3) points.

    ``u`` is one (3,) set of semi-axes or one per point. Points within 1e-9 of
    the center get ``-min(u)``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    U = np.broadcast_to(np.asarray(u, dtype=float), X.shape)
    a = np.linalg.norm(X / U, axis=1)
    b = np.linalg.norm(X / U**2, axis=1)
    center = np.linalg.norm(X, axis=1) < CENTER_EPS
    b = np.where(center, 1.0, b)
    return np.where(center, -U.min(axis=1), a * (a - 1.0) / b)


def ellipsoid_sdf_gradient(x, u):
    """``(dh/dx, dh/du)``, each (N, 3)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    U = np.broadcast_to(np.asarray(u, dtype=float), X.shape)
    a = np.linalg.norm(X / U, axis=1)
    b = np.linalg.norm(X / U**2, axis=1)
    center = np.linalg.norm(X, axis=1) < CENTER_EPS
    a = np.where(center, 1.0, a)
    b = np.where(center, 1.0, b)
    dh_da = ((2.0 * a - 1.0) / b)[:, None]
    dh_db = (-a * (a - 1.0) / b**2)[:, None]
    da_dx = X / U**2 / a[:, None]
    db_dx = X / U**4 / b[:, None]
    da_du = -(X**2) / U**3 / a[:, None]
    db_du = -2.0 * X**2 / U**5 / b[:, None]
    gx = dh_da * da_dx + dh_db * db_dx
    gu = dh_da * da_du + dh_db * db_du
    gx[center] = 0.0
    gu[center] = 0.0
    # center value is -min(u)
    if center.any():
        idx = np.argmin(U[center], axis=1)
        gu[np.flatnonzero(center), idx] = -1.0
    return gx, gu


# ----------------------------------------------------------- latent codes


@dataclass
class LatentCode:
    mu: np.ndarray
    sigma: np.ndarray
    delta_z: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        if self.sigma.shape != self.mu.shape:
            raise ValueError("mu and sigma must have the same shape")
        if self.delta_z is None:
            self.delta_z = np.zeros_like(self.mu)

    @property
    def z(self) -> np.ndarray:
        """Deterministic code (the mean) plus the test-time deformation."""
        return self.mu + self.delta_z

    def sample(self, seed) -> np.ndarray:
        return sample_code(self.mu, self.sigma, seed)


def sample_code(mu, sigma, rng_seed) -> np.ndarray:
    """Reparametrized draw ``mu + sigma * eps`` with ``eps ~ N(0, I)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return mu + sigma * rng.standard_normal(size=np.broadcast(mu, sigma).shape)


def kl_standard_normal(mu, sigma) -> float:
    """KL divergence of ``N(mu, diag(sigma^2))`` from ``N(0, I)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))
