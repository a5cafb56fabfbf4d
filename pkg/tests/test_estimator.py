import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cbctkit.errors import ConfigError
from cbctkit.estimator import SparseViewRestorer


def _toy_data(n, seed=0, shape=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    dense = rng.uniform(-900, 200, size=(n, *shape)).astype(np.float32)
    sparse = dense + rng.normal(0, 150, size=dense.shape).astype(np.float32)
    return sparse, dense


def _micro_estimator(**overrides):
    params = dict(
        levels=2,
        base_channels=4,
        time_embed_dim=8,
        epochs=2,
        batch_size=2,
        random_state=0,
    )
    params.update(overrides)
    return SparseViewRestorer(**params)


def test_get_set_params_and_clone():
    est = _micro_estimator(epochs=5)
    params = est.get_params()
    assert params["epochs"] == 5
    assert params["levels"] == 2
    est.set_params(epochs=7)
    assert est.epochs == 7
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_predict_before_fit_raises():
    est = _micro_estimator()
    X, _ = _toy_data(2)
    with pytest.raises(NotFittedError):
        est.predict(X)


def test_fit_predict_score_smoke():
    X, y = _toy_data(4, seed=1)
    est = _micro_estimator().fit(X, y)
    assert len(est.history_) == 2
    pred = est.predict(X)
    assert pred.shape == X.shape
    assert np.all(np.isfinite(pred))
    score = est.score(X, y)
    assert np.isfinite(score)
    # transform is the pipeline-friendly alias
    np.testing.assert_array_equal(est.transform(X), est.predict(X))


def test_fit_accepts_validation_pairs():
    X, y = _toy_data(4, seed=2)
    Xv, yv = _toy_data(2, seed=3)
    est = _micro_estimator(epochs=1).fit(X, y, X_val=Xv, y_val=yv)
    assert isinstance(est.history_[0]["val_psnr_masked"], float)


def test_fit_deterministic_in_random_state():
    X, y = _toy_data(4, seed=4)
    p1 = _micro_estimator().fit(X, y).predict(X)
    p2 = _micro_estimator().fit(X, y).predict(X)
    np.testing.assert_array_equal(p1, p2)


def test_predict_steps_override():
    X, y = _toy_data(2, seed=5)
    est = _micro_estimator(epochs=1).fit(X, y)
    p1 = est.predict(X, n_steps=1)
    p2 = est.predict(X, n_steps=5)
    assert p1.shape == p2.shape


def test_input_validation():
    est = _micro_estimator()
    X, y = _toy_data(2, seed=6)
    with pytest.raises(ConfigError):
        est.fit(X, y[:1])
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ConfigError):
        est.fit(bad, y)
    with pytest.raises(ConfigError):
        est.fit([np.zeros((8, 8, 8)), np.zeros((8, 8, 4))], [np.zeros((8, 8, 8))] * 2)


def test_divisibility_validated():
    est = _micro_estimator(levels=3)
    X = np.zeros((2, 10, 10, 10), dtype=np.float32)
    with pytest.raises(ConfigError):
        est.fit(X, X)


def test_accepts_volume_lists():
    from cbctkit.volume import VoxelVolume

    X, y = _toy_data(2, seed=7)
    vols_x = [VoxelVolume(v, (4, 4, 6), unit="HU") for v in X]
    vols_y = [VoxelVolume(v, (4, 4, 6), unit="HU") for v in y]
    est = _micro_estimator(epochs=1).fit(vols_x, vols_y)
    pred = est.predict(vols_x)
    assert pred.shape == X.shape
