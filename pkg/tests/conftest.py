import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def series_exp(A: np.ndarray, terms: int = 30) -> np.ndarray:
    """Truncated power series of the matrix exponential."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms):
        term = term @ A / n
        out = out + term
    return out


def random_tangent(rng, max_angle=np.pi * 0.95, rho_scale=1.0, sigma_scale=0.7):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return np.concatenate(
        [rng.normal(scale=rho_scale, size=3), axis * angle, [rng.uniform(-sigma_scale, sigma_scale)]]
    )


# ---------------------------------------------------------------- shared models

# Shorter schedule than the defaults with the same decay ratios; about a
# minute on one core and enough for the end-to-end checks.
SHORT_SCHEDULE = dict(epochs=300, coarse_decay_every=90, fine_decay_every=210)


@pytest.fixture(scope="session")
def corpus10():
    from sdfpose.trainer import generate_corpus

    return generate_corpus(10, seed=0)


@pytest.fixture(scope="session")
def trained(corpus10):
    from sdfpose.trainer import TrainConfig, train

    return train(corpus10, TrainConfig(**SHORT_SCHEDULE))


class EllipsoidModel:
    """Analytic shape model: both levels are the ellipsoid function ``h``
    with semi-axes ``u0 + B z``, so the code Jacobian is the fixed matrix ``B``."""

    def __init__(self, u0, B=None):
        from sdfpose.decoder import ellipsoid_sdf, ellipsoid_sdf_gradient

        self._h, self._grad = ellipsoid_sdf, ellipsoid_sdf_gradient
        self.u0 = np.asarray(u0, dtype=float)
        self.B = np.zeros((3, 2)) if B is None else np.asarray(B, dtype=float)
        self.latent_dim = self.B.shape[1]

    def axes(self, z):
        return self.u0 + self.B @ np.asarray(z, dtype=float)

    def fine(self, Y, z):
        u = self.axes(z)
        gx, gu = self._grad(Y, u)
        return self._h(Y, u), gx, gu @ self.B

    def coarse(self, z):
        return self.axes(z), self.B.copy()


@pytest.fixture(scope="session")
def sphere_corpus():
    from sdfpose.trainer import ShapeFamily, generate_corpus

    return generate_corpus(1, ShapeFamily.sphere(0.5), seed=6)


@pytest.fixture(scope="session")
def sphere_model(sphere_corpus):
    from sdfpose.trainer import TrainConfig, train

    return train(sphere_corpus, TrainConfig(epochs=500, seed=6))


# ------------------------------------------------------- acceptance report

ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
