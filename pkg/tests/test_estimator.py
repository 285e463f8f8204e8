import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pyramid_nerf.estimator import PyramidFieldRegressor


@pytest.fixture(scope="module")
def ray_data(tiny_dataset):
    rays, colors, scales = tiny_dataset.ray_table("train")
    return rays.to_matrix(), colors, scales


def test_params_round_trip():
    est = PyramidFieldRegressor(levels=3, mode="gauss", iterations=5)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(levels=4).levels == 4


def test_fit_predict_score(ray_data):
    X, y, scales = ray_data
    est = PyramidFieldRegressor(levels=4, iterations=15, batch_rays=128, samples_per_ray=16, seed=1)
    assert est.fit(X, y, scales=scales) is est
    assert len(est.loss_curve_) == 15 and est.n_features_in_ == 9
    rows = np.linspace(0, len(X) - 1, 300).astype(int)
    pred = est.predict(X[rows])
    assert pred.shape == (300, 3) and np.all((pred >= 0) & (pred <= 1))
    assert 0 < est.score(X[rows], y[rows]) < np.inf


def test_fit_is_deterministic(ray_data):
    X, y, _ = ray_data
    a = PyramidFieldRegressor(levels=3, iterations=5, batch_rays=64, samples_per_ray=8).fit(X, y)
    b = PyramidFieldRegressor(levels=3, iterations=5, batch_rays=64, samples_per_ray=8).fit(X, y)
    assert a.loss_curve_ == b.loss_curve_
    assert np.array_equal(a.predict(X[:50]), b.predict(X[:50]))


def test_unfitted():
    with pytest.raises(NotFittedError):
        PyramidFieldRegressor().predict(np.zeros((1, 9)))


def test_input_validation(ray_data):
    X, y, _ = ray_data
    est = PyramidFieldRegressor(iterations=1)
    with pytest.raises(ValueError, match="9 ray features"):
        est.fit(X[:, :8], y)
    with pytest.raises(ValueError, match="RGB"):
        est.fit(X, y[:, :2])
    bad = X.copy()
    bad[0, 7] = bad[0, 8]
    with pytest.raises(ValueError, match="near"):
        est.fit(bad, y)
