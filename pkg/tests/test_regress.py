import numpy as np
import pytest
from hypothesis import given, strategies as st

from segqa import regress
from segqa.errors import NumericError, ValidationError
from segqa.phantom import Split, profile_bank, segment
from segqa.regress.direct import DirectNetConfig, to_bins
from segqa.regress.linear import ols_coefficients
from segqa.stats import mean_dsc


def _linear_data(seed, n=60, noise=0.0):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 4))
    beta = np.array([0.7, 0.05, -0.03, 0.02, 0.1])
    y = beta[0] + X @ beta[1:] + noise * r.normal(size=n)
    return X, y, beta


@given(st.integers(0, 2**31 - 1))
def test_ols_recovers_exact_coefficients(seed):
    X, y, beta = _linear_data(seed)
    assert np.allclose(ols_coefficients(X, y), beta, atol=1e-6)


def test_ols_matches_lstsq():
    X, y, _ = _linear_data(3, noise=0.05)
    ref = np.linalg.lstsq(np.hstack([np.ones((len(X), 1)), X]), y, rcond=None)[0]
    assert np.allclose(ols_coefficients(X, y), ref, atol=1e-6)


def test_constant_target_predicts_constant():
    X, _, _ = _linear_data(4)
    for method in ("ols", "bagging", "gbt", "rf", "gpr"):
        m = regress.fit(method, X, np.full(len(X), 0.8))
        assert np.allclose(regress.predict(m, X[:5]), 0.8, atol=1e-3), method


def test_rank_deficiency():
    # duplicated unit-scale columns are rescued by the ridge jitter
    y = np.linspace(0, 1, 20)
    m = regress.fit("ols", np.ones((20, 4)), y)
    assert np.allclose(regress.predict(m, np.ones((3, 4))), y.mean(), atol=1e-6)
    with pytest.raises(NumericError):
        regress.fit("ols", np.full((20, 4), 1e8), y)


@pytest.mark.parametrize("method", regress.FEATURE_METHODS)
def test_methods_fit_and_are_deterministic(method):
    X, y, _ = _linear_data(5, noise=0.01)
    a, b = regress.fit(method, X, y, seed=2), regress.fit(method, X, y, seed=2)
    assert a.equals(b)
    pred = regress.predict(a, X)
    assert pred.shape == (len(X),) and np.all((0 <= pred) & (pred <= 1))
    assert np.mean(np.abs(pred - np.clip(y, 0, 1))) < 0.05
    with pytest.raises(ValidationError):
        regress.predict(a, X[:, :3])


def test_shape_only_uses_one_column():
    X, y, _ = _linear_data(6)
    m = regress.fit("shape_only", X, y)
    X2 = X.copy()
    X2[:, :3] = 0.0
    assert np.array_equal(regress.predict(m, X), regress.predict(m, X2))


def test_bagging_close_to_ols_on_linear_data():
    X, y, _ = _linear_data(7, noise=0.02)
    ols, bag = regress.fit("ols", X, y), regress.fit("bagging", X, y)
    assert np.max(np.abs(regress.predict(ols, X) - regress.predict(bag, X))) < 0.01


def test_gpr_std_and_clamp():
    X, y, _ = _linear_data(8, noise=0.01)
    m = regress.fit("gpr", X, y)
    pred, std = regress.predict(m, X[:5], return_std=True)
    assert np.all(std > 0)
    far, far_std = regress.predict(m, X[:1] + 50, return_std=True)
    assert far_std[0] > std.max()
    with pytest.raises(ValidationError):
        regress.predict(regress.fit("ols", X, y), X, return_std=True)
    raw = regress.predict(regress.fit("ols", X, y + 5), X, clamp=False)
    assert raw.max() > 1


def test_save_load_round_trip(tmp_path):
    X, y, _ = _linear_data(9, noise=0.01)
    for method in regress.FEATURE_METHODS:
        m = regress.fit(method, X, y)
        back = regress.load_model(regress.save_model(m, tmp_path / f"{method}.bin"))
        assert back.equals(m)
        assert np.array_equal(regress.predict(back, X), regress.predict(m, X))


def test_input_validation():
    with pytest.raises(ValidationError):
        regress.fit("nope", np.zeros((10, 4)), np.zeros(10))
    with pytest.raises(ValidationError):
        regress.fit("ols", np.zeros((10, 4)), np.zeros(9))
    with pytest.raises(ValidationError):
        regress.fit("ols", np.full((10, 4), np.nan), np.zeros(10))
    with pytest.raises(ValidationError):
        regress.fit("ols", np.zeros((4, 4)), np.zeros(4))


def test_to_bins():
    assert to_bins([0.0, 0.004, 0.006, 0.5, 1.0]).tolist() == [0, 0, 1, 50, 99]


def test_direct_net_small(small_dataset, tmp_path):
    prof = profile_bank(19)[0]
    recs = small_dataset.records([Split.QA_TRAIN, Split.QA_TEST])
    segs = [segment(prof, r.volume, r.truth) for r in recs]
    y = [mean_dsc(s, r.truth) for s, r in zip(segs, recs)]
    vols = [r.volume for r in recs]
    cfg = DirectNetConfig(epochs=2, batch_size=8, width=2, seed=1)
    m = regress.fit_direct_net(vols, segs, y, cfg)
    pred = regress.predict_direct_net(m, vols, segs)
    assert pred.shape == (len(recs),) and np.all((0 <= pred) & (pred < 1))
    assert m.equals(regress.fit_direct_net(vols, segs, y, cfg))
    back = regress.load_model(regress.save_model(m, tmp_path / "d.bin"))
    assert np.array_equal(regress.predict_direct_net(back, vols, segs), pred)
    with pytest.raises(ValidationError):
        regress.fit_direct_net(vols[:5], segs[:5], y[:5], cfg)
