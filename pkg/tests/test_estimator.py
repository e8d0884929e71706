"""Scikit-learn estimator wrapper: parameter handling, fit/predict, and grid
consistency checks."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.utils.estimator_checks import check_get_params_invariance

from lareco.errors import GridMismatch
from lareco.estimator import DedReconstructor
from lareco.grid import GridSpec, OccupancyVolume


def make_dataset(n=4, grid_n=8, r=2.6):
    g = GridSpec.centered(grid_n, 1.0)
    idx = np.stack(np.meshgrid(*[np.arange(grid_n)] * 3, indexing="ij"), axis=-1)
    centers = g.world(idx.reshape(-1, 3))
    shape = OccupancyVolume(g, (np.linalg.norm(centers, axis=1) <= r).reshape(g.dims))
    path = OccupancyVolume(g, (np.abs(centers).max(axis=1) <= 1.1).reshape(g.dims))
    return [path] * n, [shape] * n, g


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = DedReconstructor(epochs=3, lambda_swr=0.2)
        params = est.get_params()
        assert params["epochs"] == 3
        assert params["lambda_swr"] == 0.2
        est.set_params(epochs=7)
        assert est.get_params()["epochs"] == 7

    def test_clone_compatible(self):
        est = DedReconstructor(hidden_sizes=(8,), epochs=2, seed=5)
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert not hasattr(c, "model_")

    def test_get_params_invariance(self):
        check_get_params_invariance("DedReconstructor", DedReconstructor())

    def test_unfitted_predict_raises(self):
        X, _, _ = make_dataset()
        with pytest.raises(Exception):
            DedReconstructor().predict(X)


class TestFitPredict:
    def test_fit_predict_smoke(self):
        X, y, g = make_dataset()
        est = DedReconstructor(hidden_sizes=(8,), epochs=3, seed=0)
        est.fit(X, y)
        assert est.grid_ == g
        assert len(est.history_) == 3
        preds = est.predict(X)
        assert len(preds) == len(X)
        for p in preds:
            assert isinstance(p, OccupancyVolume)
            assert p.grid == g

    def test_predict_proba_range_and_threshold(self):
        X, y, _ = make_dataset()
        est = DedReconstructor(hidden_sizes=(8,), epochs=3, seed=0).fit(X, y)
        z = est.predict_proba(X)
        assert z.shape == (len(X), X[0].grid.n_voxels)
        assert np.all(z > 0) and np.all(z < 1)
        preds = est.predict(X)
        for zi, p in zip(z, preds):
            assert np.array_equal(p.data.ravel(), zi >= 0.5)

    def test_array_input_with_constructor_grid(self):
        X, y, g = make_dataset()
        Xa = np.stack([v.data.ravel().astype(float) for v in X])
        ya = np.stack([v.data.ravel().astype(float) for v in y])
        est = DedReconstructor(grid=g, hidden_sizes=(8,), epochs=2, seed=0)
        est.fit(Xa, ya)
        ref = DedReconstructor(hidden_sizes=(8,), epochs=2, seed=0).fit(X, y)
        assert np.allclose(est.predict_proba(Xa), ref.predict_proba(X))

    def test_array_input_without_grid_rejected(self):
        X, _, _ = make_dataset()
        Xa = np.stack([v.data.ravel().astype(float) for v in X])
        with pytest.raises(ValueError):
            DedReconstructor().fit(Xa, Xa)

    def test_deterministic_given_seed(self):
        X, y, _ = make_dataset()
        a = DedReconstructor(hidden_sizes=(8,), epochs=2, seed=3).fit(X, y)
        b = DedReconstructor(hidden_sizes=(8,), epochs=2, seed=3).fit(X, y)
        assert np.array_equal(a.predict_proba(X), b.predict_proba(X))


class TestGridConsistency:
    def test_constructor_grid_mismatch_rejected(self):
        X, y, _ = make_dataset()
        est = DedReconstructor(grid=GridSpec.centered(8, 2.0), hidden_sizes=(8,),
                               epochs=1)
        with pytest.raises(GridMismatch):
            est.fit(X, y)

    def test_input_target_grid_mismatch_rejected(self):
        X, y, _ = make_dataset()
        other = GridSpec.centered(8, 2.0)
        y2 = [OccupancyVolume(other, v.data) for v in y]
        with pytest.raises(GridMismatch):
            DedReconstructor(hidden_sizes=(8,), epochs=1).fit(X, y2)

    def test_predict_grid_mismatch_rejected(self):
        X, y, _ = make_dataset()
        est = DedReconstructor(hidden_sizes=(8,), epochs=1, seed=0).fit(X, y)
        other = [OccupancyVolume(GridSpec.centered(8, 2.0), v.data) for v in X]
        with pytest.raises(GridMismatch):
            est.predict(other)
