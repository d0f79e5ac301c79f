import math

import numpy as np
import pytest
from scipy.optimize import least_squares

from sdfpose.decoder import ellipsoid_sdf, kl_standard_normal
from sdfpose.trainer import (
    FINE_OFFSETS,
    AdamState,
    ShapeFamily,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    generate_corpus,
    heldout_surface_residuals,
    huber_loss,
    load_corpus,
    save_corpus,
    train,
)

TINY = dict(epochs=3, batch_size=32, hidden=16, coarse_hidden=8, latent_dim=4)


# --------------------------------------------------------------------- Adam


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = [np.array([1.0, -2.0])]
    state = AdamState.zeros(p)
    state.m[0][:] = [0.5, 0.5]
    state.v[0][:] = [0.25, 0.25]
    out = adam_step(p, [np.zeros(2)], state, 0.1)
    # the bias-corrected step is not zero, only the incoming gradient is;
    # with fresh moments nothing moves
    fresh = AdamState.zeros(p)
    np.testing.assert_array_equal(adam_step(p, [np.zeros(2)], fresh, 0.1)[0], p[0])
    np.testing.assert_allclose(state.m[0], [0.45, 0.45])
    np.testing.assert_allclose(state.v[0], [0.25 * 0.999] * 2)
    assert out[0].shape == (2,)


def test_adam_constant_gradient_step_tends_to_lr_sign():
    p = [np.array([0.0, 0.0, 0.0])]
    g = np.array([3.0, -0.02, 1e-3])
    state = AdamState.zeros(p)
    for _ in range(200):
        prev = p[0]
        p = adam_step(p, [g], state, 0.01)
    np.testing.assert_allclose(prev - p[0], 0.01 * np.sign(g), rtol=1e-4)


def test_adam_matches_hand_rolled_scalar_trace():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    x, m, v = 2.0, 0.0, 0.0
    grads = [math.sin(t) + 0.3 * t for t in range(1, 21)]
    expected = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(x)
    p = [np.array([2.0])]
    state = AdamState.zeros(p)
    got = []
    for g in grads:
        p = adam_step(p, [np.array([g])], state, lr)
        got.append(p[0][0])
    np.testing.assert_allclose(got, expected, rtol=1e-13)
    assert state.t == 20
    # frozen endpoint of the same recurrence
    assert got[-1] == pytest.approx(0.99392339345, abs=1e-10)


# ------------------------------------------------------------------- corpus


def test_corpus_is_deterministic(tmp_path):
    save_corpus(generate_corpus(3, seed=5), tmp_path / "a.json")
    save_corpus(generate_corpus(3, seed=5), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json.bin").read_bytes() == (tmp_path / "b.json.bin").read_bytes()


def test_corpus_round_trip(tmp_path):
    corpus = generate_corpus(2, seed=1, n_coarse=64, n_fine=128)
    save_corpus(corpus, tmp_path / "c.json")
    back = load_corpus(tmp_path / "c.json")
    for a, b in zip(corpus, back):
        assert a.shape.to_dict() == b.shape.to_dict()
        np.testing.assert_array_equal(a.fine_points, b.fine_points)
        np.testing.assert_array_equal(a.coarse_sdf, b.coarse_sdf)


def test_corpus_counts_normalization_and_labels():
    corpus = generate_corpus(4, seed=2)
    for inst in corpus:
        assert inst.coarse_points.shape == (4096, 3) and inst.fine_points.shape == (8192, 3)
        assert np.all(np.linalg.norm(inst.coarse_points, axis=1) <= 1.0)
        assert inst.shape.bounding_radius <= 1.0 + 1e-9
        assert min(inst.shape.axes) >= 0.05
        np.testing.assert_allclose(inst.shape.sdf(inst.fine_points), inst.fine_sdf, atol=1e-6)
        np.testing.assert_allclose(inst.shape.sdf(inst.coarse_points), inst.coarse_sdf, atol=1e-6)
        # labels carry the 1e-6 closest-point accuracy
        assert np.all(np.abs(inst.fine_sdf) <= max(FINE_OFFSETS) + 1e-6)


def test_sphere_member_labels_are_exact():
    (inst,) = generate_corpus(1, ShapeFamily.sphere(0.5), seed=3)
    for X, D in ((inst.coarse_points, inst.coarse_sdf), (inst.fine_points, inst.fine_sdf)):
        np.testing.assert_allclose(D, np.linalg.norm(X, axis=1) - 0.5, atol=1e-6)


def test_corpus_rejects_empty():
    with pytest.raises(ValueError):
        generate_corpus(0)


# ----------------------------------------------------------------- training


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(delta=-1.0)
    assert TrainConfig.from_dict({"epochs": 7, "unknown": 1}).epochs == 7


def test_huber_examples():
    v, d = huber_loss(np.array([0.01, -0.2]), 0.05)
    np.testing.assert_allclose(v, [0.5e-4, 0.05 * (0.2 - 0.025)])
    np.testing.assert_allclose(d, [0.01, -0.05])


def test_kl_closed_form():
    assert kl_standard_normal(np.zeros(3), np.ones(3)) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert kl_standard_normal(rng.normal(size=3), rng.uniform(0.1, 3, size=3)) > 0


def test_training_is_deterministic():
    corpus = generate_corpus(2, seed=4, n_coarse=256, n_fine=512)
    a = train(corpus, TrainConfig(**TINY, seed=3))
    b = train(corpus, TrainConfig(**TINY, seed=3))
    assert a.weights.to_bytes() == b.weights.to_bytes()
    assert a.trace == b.trace


def test_nan_labels_abort_with_batch_id():
    corpus = generate_corpus(1, seed=4, n_coarse=64, n_fine=64)
    corpus[0].fine_sdf[:] = np.nan
    with pytest.raises(TrainingDiverged, match="batch 0"):
        train(corpus, TrainConfig(**TINY))


def test_trace_csv_layout():
    corpus = generate_corpus(1, seed=4, n_coarse=64, n_fine=64)
    csv = train(corpus, TrainConfig(**TINY)).trace_csv().splitlines()
    assert csv[0] == "epoch,coarse_loss,fine_loss,kl,total"
    assert len(csv) == 1 + TINY["epochs"]
    assert csv[1].startswith("0,")


def test_single_sphere_fits_surface(sphere_model, sphere_corpus):
    assert np.median(heldout_surface_residuals(sphere_model, sphere_corpus)) < 0.02


def test_trained_corpus_losses_decrease(trained):
    total = np.array([row[4] for row in trained.trace])
    assert total[-1] < 0.2 * total[0]
    avg = np.convolve(total, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(avg) <= 0)


def test_trained_corpus_surface_residual(trained, corpus10):
    assert heldout_surface_residuals(trained, corpus10).mean() < 0.03


def test_trained_codes_are_distinct(trained):
    mus = np.array([c.mu for c in trained.codes])
    d = np.linalg.norm(mus[:, None] - mus[None], axis=2)
    assert np.all(d[~np.eye(len(mus), dtype=bool)] > 1e-3)


def _best_fit_axes(inst):
    fit = least_squares(
        lambda u: ellipsoid_sdf(inst.coarse_points, u) - inst.coarse_sdf,
        np.full(3, 0.5),
        loss="huber",
        f_scale=0.05,
        bounds=(0.05, 2.0),
    )
    return fit.x


def test_trained_coarse_axes_match_best_fit_ellipsoids(trained, corpus10):
    for inst, code in zip(corpus10, trained.codes):
        u = trained.weights.coarse_decode(code.mu)
        assert np.all(np.abs(u / _best_fit_axes(inst) - 1.0) < 0.15)


@pytest.mark.xfail(
    strict=True,
    reason="the corpus shapes are boxy and sheared, so the SDF-optimal ellipsoid exceeds the "
    "superellipsoid semi-axes by up to 26%",
)
def test_trained_coarse_axes_match_ground_truth_semi_axes(trained, corpus10):
    for inst, code in zip(corpus10, trained.codes):
        u = trained.weights.coarse_decode(code.mu)
        assert np.all(np.abs(u / np.array(inst.shape.axes) - 1.0) < 0.15)
