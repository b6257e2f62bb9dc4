import numpy as np
import pytest
from sklearn.base import clone

from bym2 import SpatialPoissonModel
from bym2.graph import Graph

FAST = dict(dz=0.75, diff_logdens=6)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(8)
    g = Graph.lattice(4, 4)
    E = np.full(16, 30.0)
    z = rng.standard_normal((16, 1))
    y = rng.poisson(E * np.exp(0.3 * z[:, 0] + 0.2 * rng.standard_normal(16)))
    return g, y, E, z


def test_fit_predict(data):
    g, y, E, _ = data
    est = SpatialPoissonModel(g, **FAST).fit(None, y, exposure=E)
    pred = est.predict()
    assert pred.shape == (16,)
    assert np.all(pred > 0)
    assert est.n_features_in_ == 0
    assert est.coef_.shape == (0,)
    # smoothing pulls risks toward the overall level
    assert np.std(pred) < np.std(y / E)


def test_covariates(data):
    g, y, E, z = data
    est = SpatialPoissonModel(g, **FAST).fit(z, y, exposure=E)
    assert est.coef_.shape == (1,)
    np.testing.assert_allclose(est.predict(z), est.predict(), rtol=1e-12)
    shifted = est.predict(z + 1.0)
    np.testing.assert_allclose(shifted / est.predict(), np.exp(est.coef_[0]), rtol=1e-10)
    with pytest.raises(ValueError):
        est.predict(np.hstack([z, z]))


def test_params_and_clone(data):
    g, *_ = data
    est = SpatialPoissonModel(g, model="leroux", phi_prior="uniform")
    params = est.get_params()
    assert params["model"] == "leroux" and params["graph"] is g
    assert clone(est).get_params()["phi_prior"] == "uniform"


def test_validation(data):
    g, y, E, _ = data
    est = SpatialPoissonModel(g, **FAST)
    with pytest.raises(ValueError):
        est.fit(None, y, exposure=None)
    with pytest.raises(ValueError):
        est.fit(None, y[:5], exposure=E[:5])
    with pytest.raises(ValueError):
        est.fit(None, -y, exposure=E)
    with pytest.raises(TypeError):
        SpatialPoissonModel(None).fit(None, y, exposure=E)


def test_predict_before_fit(data):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        SpatialPoissonModel(data[0]).predict()


@pytest.mark.parametrize("model", ["iid", "besag", "bym", "dean"])
def test_other_models(data, model):
    g, y, E, _ = data
    est = SpatialPoissonModel(g, model=model, **FAST).fit(None, y, exposure=E)
    assert np.all(np.isfinite(est.predict()))
