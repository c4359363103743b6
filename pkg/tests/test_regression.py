import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entk.data import blobs, split
from entk.errors import DimensionError, IntegrityError, NotPositiveDefiniteError
from entk.model import Activation, Dense, ModelSpec, init_params
from entk.ntk import compute_kernel
from entk.regression import accuracy, krr_fit, krr_predict, one_hot, predict_labels, train_gd

SPEC = ModelSpec((2,), (Dense(2, 16), Activation("tanh"), Dense(16, 2)))
PARAMS = init_params(SPEC, 0)


def spd(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def test_one_hot():
    np.testing.assert_array_equal(one_hot([1, 0, 2], 3), np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1.0]]))
    with pytest.raises(DimensionError):
        one_hot([3], 3)


def test_identity_kernel_alpha_is_targets():
    y = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(krr_fit(np.eye(5), y, 0.0).alpha, y)


@given(st.integers(2, 12), st.integers(0, 1000))
def test_interpolation_at_zero_ridge(n, seed):
    k = spd(n, seed)
    y = one_hot(np.arange(n) % 3, 3)
    scores, _ = krr_predict(krr_fit(k, y, 0.0), k)
    np.testing.assert_allclose(scores, y, atol=1e-8)


def test_training_row_reproduces_prediction():
    k = spd(6, 1)
    y = np.random.default_rng(1).standard_normal((6, 2))
    model = krr_fit(k, y, 0.1)
    full, _ = krr_predict(model, k)
    row, _ = krr_predict(model, k[3:4])
    np.testing.assert_array_equal(row[0], full[3])


def test_zero_cross_ties_to_class_zero():
    model = krr_fit(spd(4, 2), one_hot([0, 1, 2, 1], 3), 0.0)
    scores, labels = krr_predict(model, np.zeros((5, 4)))
    assert np.all(scores == 0) and np.all(labels == 0)


@given(st.integers(0, 1000))
def test_monotone_shrinkage(seed):
    k = spd(8, seed) - 7.5 * np.eye(8)
    k = k + max(0.0, 1e-6 - np.linalg.eigvalsh(k)[0]) * np.eye(8)
    y = np.random.default_rng(seed).standard_normal((8, 2))
    norms = [np.linalg.norm(krr_fit(k, y, lam).alpha) for lam in (0.0, 1e-3, 1e-1, 10.0)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_label_invariance_under_scaling(c, seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((10, 4))
    k, kc = feats @ feats.T, rng.standard_normal((5, 4)) @ feats.T
    y = one_hot(rng.integers(0, 3, 10), 3)
    _, a = krr_predict(krr_fit(k, y, 0.5), kc)
    _, b = krr_predict(krr_fit(c * k, y, 0.5 * c), c * kc)
    np.testing.assert_array_equal(a, b)


def test_not_pd_advises_ridge():
    k = np.ones((3, 3))
    with pytest.raises(NotPositiveDefiniteError, match="lambda > 0"):
        krr_fit(k, np.eye(3), 0.0)
    krr_fit(k, np.eye(3), 1e-3)


def test_negative_ridge_rejected():
    with pytest.raises(ValueError):
        krr_fit(np.eye(2), np.eye(2), -1.0)


def test_label_vector_targets_from_kernel_matrix():
    x = blobs(6, 2, 4.0).x
    km = compute_kernel(SPEC, PARAMS, x, kind="pntk")
    model = krr_fit(km, np.array([0, 1, 0, 1, 0, 1]), 1e-3)
    assert model.alpha.shape == (6, 2) and model.kind == "pntk"


def test_full_ntk_stacked_targets():
    x = blobs(6, 2, 4.0).x
    km = compute_kernel(SPEC, PARAMS, x, kind="ntk")
    labels = np.array([0, 1, 0, 1, 0, 1])
    model = krr_fit(km, labels, 0.0)
    cross = compute_kernel(SPEC, PARAMS, x, x.copy(), kind="ntk")
    scores, pred = krr_predict(model, cross)
    np.testing.assert_allclose(scores, one_hot(labels, 2), atol=1e-8)
    np.testing.assert_array_equal(pred, labels)


def test_fingerprint_mismatch():
    x = blobs(6, 2, 4.0).x
    model = krr_fit(compute_kernel(SPEC, PARAMS, x, kind="pntk"), np.arange(6) % 2, 1e-3)
    other_model = compute_kernel(SPEC, init_params(SPEC, 5), x[:2], x, kind="pntk")
    with pytest.raises(IntegrityError, match="model"):
        krr_predict(model, other_model)
    other_data = compute_kernel(SPEC, PARAMS, x[:2], x + 1, kind="pntk")
    with pytest.raises(IntegrityError, match="data"):
        krr_predict(model, other_data)


def test_gradient_descent_reduces_loss():
    ds = blobs(40, 2, 4.0, seed=2)
    trained, losses = train_gd(SPEC, PARAMS, ds.x, ds.labels, steps=50, lr=0.5)
    assert losses[-1] < losses[0]
    assert accuracy(predict_labels(SPEC, trained, ds.x), ds.labels) >= 0.9


def test_blobs_surrogate_accuracy():
    ds = blobs(120, 2, 4.0, seed=1)
    train, test = split(ds, 80)
    km = compute_kernel(SPEC, PARAMS, train.x, kind="pntk")
    cross = compute_kernel(SPEC, PARAMS, test.x, train.x, kind="pntk")
    _, pred = krr_predict(krr_fit(km, train.labels, 1e-3, classes=2), cross)
    assert accuracy(pred, test.labels) >= 0.95
