import numpy as np
import pytest
from sklearn.base import clone

from volsurf.checkpoint import checkpoint_dict, estimator_from_dict, load_checkpoint, save_checkpoint
from volsurf.estimators import (
    ConvLSTMForecaster,
    ConvTFForecaster,
    PersistenceForecaster,
    PIConvTFForecaster,
    PINNVolatilityRegressor,
    SAConvLSTMForecaster,
)
from volsurf.exceptions import DataError, ShapeError, TrainingDivergenceError, UnsupportedVersionError
from volsurf.surface_data import SyntheticConfig, build_dataset, samples_to_arrays, split_with_validation, synthetic_series


@pytest.fixture(scope="module")
def tiny():
    s = synthetic_series(SyntheticConfig(days=30), seed=3)
    d = [g.date for g in s]
    split = split_with_validation(d, (d[0], d[19]), (d[20], d[29]), 0.25)
    ds = build_dataset(s, split, 3)
    ref = s[0].spot
    return {
        "plain": [samples_to_arrays(part, False) for part in (ds.train, ds.validation, ds.test)],
        "aug": [samples_to_arrays(part, True, ref) for part in (ds.train, ds.validation, ds.test)],
    }


SMALL = {
    "convlstm": lambda **kw: ConvLSTMForecaster(hidden_channels=3, epochs=2, batch_size=4, **kw),
    "sa_convlstm": lambda **kw: SAConvLSTMForecaster(hidden_channels=3, qk_channels=2, epochs=2, batch_size=4, **kw),
    "convtf": lambda **kw: ConvTFForecaster(hidden_channels=8, heads=2, sffn_peak=8, epochs=2, batch_size=4, **kw),
    "piconvtf": lambda **kw: PIConvTFForecaster(hidden_channels=8, heads=2, sffn_peak=8, epochs=2, batch_size=4, **kw),
}


def _fit(kind, data, **kw):
    est = SMALL[kind](**kw)
    (X, y, m), (Xv, yv, _), _ = data["aug"] if kind == "piconvtf" else data["plain"]
    if kind == "piconvtf":
        return est.fit(X, y, market=m, eval_set=(Xv, yv))
    return est.fit(X, y, eval_set=(Xv, yv))


def test_default_hyperparameters():
    lstm = ConvLSTMForecaster().get_params()
    assert (lstm["hidden_channels"], lstm["kernel_size"], lstm["epochs"], lstm["batch_size"], lstm["learning_rate"]) == (
        64, 3, 100, 32, 1e-3)
    tf = ConvTFForecaster().get_params()
    assert (tf["hidden_channels"], tf["heads"], tf["epochs"], tf["batch_size"], tf["learning_rate"]) == (
        32, 4, 100, 16, 1e-3)
    pinn = PINNVolatilityRegressor().get_params()
    assert (pinn["hidden_units"], pinn["epochs"], pinn["batch_size"], pinn["learning_rate"]) == (10000, 2000, 256, 0.1)
    assert PIConvTFForecaster().get_params()["lam"] == 0.1


@pytest.mark.parametrize("kind", sorted(SMALL))
def test_fit_predict_shapes_and_clone(kind, tiny):
    est = _fit(kind, tiny)
    _, _, (Xte, yte, _) = tiny["aug"] if kind == "piconvtf" else tiny["plain"]
    pred = est.predict(Xte)
    assert pred.shape == yte.shape and np.isfinite(pred).all()
    assert est.best_epoch_ == int(np.argmin([r.val_loss for r in est.history_])) + 1
    assert est.score(Xte, yte) <= 0
    fresh = clone(est)
    assert fresh.get_params() == est.get_params() and not hasattr(fresh, "module_")


@pytest.mark.parametrize("kind", sorted(SMALL))
def test_checkpoint_round_trip(kind, tiny, tmp_path):
    est = _fit(kind, tiny)
    _, _, (Xte, _, _) = tiny["aug"] if kind == "piconvtf" else tiny["plain"]
    save_checkpoint(tmp_path / "ck.json", est)
    again = load_checkpoint(tmp_path / "ck.json")
    assert type(again) is type(est) and again.get_params() == est.get_params()
    np.testing.assert_array_equal(again.predict(Xte), est.predict(Xte))


def test_checkpoint_rejects_other_versions(tiny, tmp_path):
    payload = checkpoint_dict(_fit("convlstm", tiny))
    payload["version"] = 99
    with pytest.raises(UnsupportedVersionError):
        estimator_from_dict(payload)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.json")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.json")


def test_fit_is_deterministic(tiny):
    _, _, (Xte, _, _) = tiny["plain"]
    a = _fit("convtf", tiny, random_state=4).predict(Xte)
    b = _fit("convtf", tiny, random_state=4).predict(Xte)
    c = _fit("convtf", tiny, random_state=5).predict(Xte)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_input_validation(tiny):
    (X, y, m), _, _ = tiny["aug"]
    with pytest.raises(ShapeError):
        SMALL["piconvtf"]().fit(X, y)  # market matrices missing
    with pytest.raises(ShapeError):
        SMALL["convlstm"]().fit(X[:, :, :, :5], y)
    est = _fit("convlstm", tiny)
    with pytest.raises(ShapeError):
        est.predict(X)  # 5 channels, fitted on 1
    with pytest.raises(ShapeError):
        SMALL["convlstm"]().fit(X[0], y)


def test_validation_tail_used_without_eval_set(tiny):
    (X, y, _), _, _ = tiny["plain"]
    est = SMALL["convlstm"]().fit(X, y)
    assert len(est.history_) == 2 and est.stats_["channel_mean"].shape == (1,)


def test_persistence_returns_last_frame(tiny):
    (X, y, _), _, _ = tiny["aug"]
    est = PersistenceForecaster().fit(X, y)
    np.testing.assert_array_equal(est.predict(X), X[:, -1, 0])


def test_divergence_attaches_estimator(tiny):
    class Exploding(ConvLSTMForecaster):
        def _loss(self, pred, target, market=None):
            return super()._loss(pred, target) * float("nan")

    (X, y, _), (Xv, yv, _), _ = tiny["plain"]
    est = Exploding(hidden_channels=2, epochs=3, batch_size=4)
    with pytest.raises(TrainingDivergenceError) as info:
        est.fit(X, y, eval_set=(Xv, yv))
    assert info.value.estimator is est and hasattr(est, "module_")


def test_pinn_regressor_fits_constant_vol():
    rng = np.random.default_rng(0)
    n = 64
    S = np.full(n, 100.0)
    tau = rng.uniform(0.1, 1.0, n)
    m = rng.uniform(0.9, 1.1, n)
    X = np.column_stack([S, tau, m, np.full(n, 0.02)])
    y = np.full(n, 0.25)
    est = PINNVolatilityRegressor(hidden_units=16, epochs=30, batch_size=32, learning_rate=0.01, cycles=2)
    est.fit(X, y)
    assert est.spot_scale_ == 100.0 and len(est.history_) == 30
    sigma = est.predict(X)
    assert sigma.shape == (n,) and (sigma > 0).all()
    assert est.score(X, y) > -60.0
    assert est.predict_price(X).shape == (n,)
    again = estimator_from_dict(checkpoint_dict(est))
    np.testing.assert_array_equal(again.predict(X), sigma)
