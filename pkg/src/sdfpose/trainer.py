"""Offline training of the bi-level decoder on a synthetic shape corpus.

Every instance ``n`` owns a Gaussian code ``(mu_n, sigma_n)``; the decoders
are shared. One optimizer step draws ``z_n = mu_n + sigma_n * eps`` for every
instance and a minibatch of its labelled points, and minimizes

    beta * fine Huber loss + gamma * coarse Huber loss + alpha * KL

with the object pose fixed to the identity (points are given in the object
frame). ``sigma`` is parametrized by its logarithm.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .decoder import DecoderWeights, LatentCode, ellipsoid_sdf, ellipsoid_sdf_gradient, kl_standard_normal
from .shapes import SuperShape

log = logging.getLogger(__name__)

FINE_OFFSETS = (0.005, 0.02, 0.05)
MIN_SEMI_AXIS = 0.05


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------- corpus


@dataclass(frozen=True)
class ShapeFamily:
    """Uniform ranges for the corpus parameters: (low, high) per entry.

    Sampled shapes are rescaled to a bounding radius of ``max_radius``, so
    the ranges only set proportions."""

    axes: tuple = ((0.5, 0.6), (0.3, 0.38), (0.18, 0.25))
    exponents: tuple = ((0.3, 0.7), (0.3, 0.7))
    shear: tuple = ((0.25, 0.4), (0.15, 0.25))
    max_radius: float = 0.9

    @classmethod
    def sphere(cls, radius: float = 0.5) -> "ShapeFamily":
        r = (radius, radius)
        return cls(axes=(r, r, r), exponents=((1.0, 1.0), (1.0, 1.0)), shear=((0.0, 0.0), (0.0, 0.0)), max_radius=radius)

    def sample(self, rng: np.random.Generator) -> SuperShape:
        while True:
            a = tuple(float(rng.uniform(lo, hi)) for lo, hi in self.axes)
            e = tuple(float(rng.uniform(lo, hi)) for lo, hi in self.exponents)
            k = tuple(float(rng.uniform(lo, hi)) for lo, hi in self.shear)
            if min(a) < MIN_SEMI_AXIS:
                continue
            shape = SuperShape(a, e, k)
            # every instance is normalized to the same bounding radius so the
            # canonical size is unambiguous and scale lives only in the pose
            shape = shape.scaled(self.max_radius / shape.bounding_radius)
            if min(shape.axes) >= MIN_SEMI_AXIS:
                return shape

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainingInstance:
    instance_id: int
    shape: SuperShape
    coarse_points: np.ndarray
    coarse_sdf: np.ndarray
    fine_points: np.ndarray
    fine_sdf: np.ndarray


def uniform_ball(n: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)


def make_instance(
    instance_id: int,
    shape: SuperShape,
    rng: np.random.Generator,
    n_coarse: int = 4096,
    n_fine: int = 8192,
) -> TrainingInstance:
    coarse = uniform_ball(n_coarse, rng)
    surf, nrm = shape.sample_surface(n_fine, rng)
    offsets = np.array(FINE_OFFSETS + tuple(-o for o in FINE_OFFSETS))
    fine = surf + rng.choice(offsets, size=n_fine)[:, None] * nrm
    return TrainingInstance(instance_id, shape, coarse, shape.sdf(coarse), fine, shape.sdf(fine))


def generate_corpus(
    n_instances: int,
    family: ShapeFamily | None = None,
    seed: int = 0,
    n_coarse: int = 4096,
    n_fine: int = 8192,
) -> list[TrainingInstance]:
    if n_instances < 1:
        raise ValueError("need at least one instance")
    family = family or ShapeFamily()
    rng = np.random.default_rng(seed)
    shapes = [family.sample(rng) for _ in range(n_instances)]
    return [make_instance(i, s, rng, n_coarse, n_fine) for i, s in enumerate(shapes)]


def save_corpus(corpus: list[TrainingInstance], path) -> None:
    """``path`` (JSON index) plus ``path + '.bin'`` (little-endian float64)."""
    path = Path(path)
    index, chunks, offset = [], [], 0
    for inst in corpus:
        entry = {"id": inst.instance_id, "shape": inst.shape.to_dict(), "arrays": {}}
        for name in ("coarse_points", "coarse_sdf", "fine_points", "fine_sdf"):
            arr = np.ascontiguousarray(getattr(inst, name), dtype="<f8")
            entry["arrays"][name] = {"offset": offset, "shape": list(arr.shape)}
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        index.append(entry)
    path.write_text(json.dumps({"format_version": 1, "instances": index}, indent=1, sort_keys=True))
    Path(str(path) + ".bin").write_bytes(b"".join(chunks))


def load_corpus(path) -> list[TrainingInstance]:
    path = Path(path)
    index = json.loads(path.read_text())
    blob = Path(str(path) + ".bin").read_bytes()
    out = []
    for entry in index["instances"]:
        arrs = {}
        for name, spec in entry["arrays"].items():
            count = int(np.prod(spec["shape"]))
            arrs[name] = np.frombuffer(blob, "<f8", count, spec["offset"]).reshape(spec["shape"]).copy()
        out.append(TrainingInstance(entry["id"], SuperShape.from_dict(entry["shape"]), **arrs))
    return out


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update. ``lr`` is a scalar or one per array.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    state.t += 1
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=p.dtype)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        step = lrs[i] * m_hat / (np.sqrt(v_hat) + state.eps)
        out.append((p - step).astype(p.dtype, copy=False))
    return out


# ----------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 5e-4
    decay: float = 0.5
    coarse_decay_every: int = 150
    fine_decay_every: int = 350
    batch_size: int = 512
    steps_per_epoch: int = 4
    latent_dim: int = 16
    hidden: int = 64
    coarse_hidden: int = 32
    alpha: float = 1e-3
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.05
    init_sigma: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "seed" and (not isinstance(v, (int, float)) or v <= 0):
                raise ValueError(f"TrainConfig.{f.name} must be positive, got {v!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    weights: DecoderWeights
    codes: list
    trace: list = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "coarse_loss", "fine_loss", "kl", "total"])
        for row in self.trace:
            w.writerow([row[0]] + [f"{v:.8e}" for v in row[1:]])
        return buf.getvalue()


def huber_loss(r: np.ndarray, delta: float):
    """Elementwise Huber value and derivative."""
    a = np.abs(r)
    quad = a <= delta
    value = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    deriv = np.where(quad, r, delta * np.sign(r))
    return value, deriv


def train(corpus: list[TrainingInstance], config: TrainConfig | None = None) -> TrainResult:
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    N, d = len(corpus), cfg.latent_dim
    # network math runs in float32 during training; results are returned as float64
    weights = DecoderWeights.initialize(d, cfg.hidden, cfg.coarse_hidden, seed=cfg.seed).astype(np.float32)
    mu = rng.normal(scale=1e-2, size=(N, d))
    log_sigma = np.full((N, d), math.log(cfg.init_sigma))

    params = weights.arrays() + [mu, log_sigma]
    n_fine_arrays = 2 * len(weights.fine)
    n_net = len(weights.arrays())
    state = AdamState.zeros(params)
    B = cfg.batch_size
    trace = []

    for epoch in range(cfg.epochs):
        lr_fine = cfg.learning_rate * cfg.decay ** (epoch // cfg.fine_decay_every)
        lr_coarse = cfg.learning_rate * cfg.decay ** (epoch // cfg.coarse_decay_every)
        lrs = [lr_fine] * n_fine_arrays + [lr_coarse] * (n_net - n_fine_arrays) + [lr_fine, lr_fine]
        sums = np.zeros(3)
        for step in range(cfg.steps_per_epoch):
            weights = weights.with_arrays(params[:n_net])
            mu, log_sigma = params[n_net], params[n_net + 1]
            sigma = np.exp(log_sigma)
            eps = rng.standard_normal(size=(N, d))
            Z = mu + sigma * eps

            Xf, Df, Zf, own_f, Xc, Dc, own_c = [], [], [], [], [], [], []
            for n, inst in enumerate(corpus):
                i_f = rng.integers(0, len(inst.fine_points), size=B)
                i_c = rng.integers(0, len(inst.coarse_points), size=B // 2)
                # the fine decoder sees near-surface and uniform samples
                Xf += [inst.fine_points[i_f], inst.coarse_points[i_c]]
                Df += [inst.fine_sdf[i_f], inst.coarse_sdf[i_c]]
                own_f.append(np.full(B + B // 2, n))
                Xc.append(inst.coarse_points[i_c])
                Dc.append(inst.coarse_sdf[i_c])
                own_c.append(np.full(B // 2, n))
            Xf, Df, own_f = np.concatenate(Xf), np.concatenate(Df), np.concatenate(own_f)
            Xc, Dc, own_c = np.concatenate(Xc), np.concatenate(Dc), np.concatenate(own_c)

            # fine level
            f, cache = weights.fine_forward_cached(Xf, Z[own_f])
            fine_val, fine_der = huber_loss(f - Df, cfg.delta)
            fine_loss = fine_val.mean()
            g_fine, gz_f = weights.fine_param_backward(cache, cfg.beta * fine_der / len(Xf))

            # coarse level
            U = weights.coarse_decode(Z)
            h = ellipsoid_sdf(Xc, U[own_c])
            coarse_val, coarse_der = huber_loss(h - Dc, cfg.delta)
            coarse_loss = coarse_val.mean()
            _, gu = ellipsoid_sdf_gradient(Xc, U[own_c])
            gU = np.zeros((N, 3))
            np.add.at(gU, own_c, (cfg.gamma * coarse_der / len(Xc))[:, None] * gu)
            g_coarse, gz_c = weights.coarse_param_backward(Z, gU)

            # KL averaged over instances and code dimensions
            kl = sum(kl_standard_normal(mu[n], sigma[n]) for n in range(N)) / (N * d)
            total = cfg.beta * fine_loss + cfg.gamma * coarse_loss + cfg.alpha * kl
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {epoch * cfg.steps_per_epoch + step}"
                )

            gZ = gz_c.copy()
            np.add.at(gZ, own_f, gz_f)
            g_mu = gZ + cfg.alpha * mu / (N * d)
            g_ls = gZ * eps * sigma + cfg.alpha * (sigma**2 - 1.0) / (N * d)
            grads = []
            for gW, gb in g_fine + g_coarse:
                grads += [gW, gb]
            grads += [g_mu, g_ls]
            params = adam_step(params, grads, state, lrs)
            sums += (coarse_loss, fine_loss, kl)
        sums /= cfg.steps_per_epoch
        total = cfg.beta * sums[1] + cfg.gamma * sums[0] + cfg.alpha * sums[2]
        trace.append((epoch, float(sums[0]), float(sums[1]), float(sums[2]), float(total)))
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d coarse %.5f fine %.5f kl %.3f", epoch, *sums)

    weights = weights.with_arrays(params[:n_net]).astype(np.float64)
    mu, sigma = params[n_net], np.exp(params[n_net + 1])
    weights.class_code = mu.mean(axis=0)
    codes = [LatentCode(mu[n].copy(), sigma[n].copy()) for n in range(N)]
    return TrainResult(weights, codes, trace)


def heldout_surface_residuals(result: TrainResult, corpus, n_points: int = 500, seed: int = 99) -> np.ndarray:
    """``|f(p, mu_n)|`` at fresh surface samples of every training shape."""
    rng = np.random.default_rng(seed)
    out = []
    for inst, code in zip(corpus, result.codes):
        p, _ = inst.shape.sample_surface(n_points, rng)
        out.append(np.abs(result.weights.fine_decode(p, code.mu)))
    return np.concatenate(out)
