import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize, special, stats

from mufigp import calibration as C
from mufigp.exceptions import DegeneratePredictionError
from mufigp.gp import GaussianPrediction, GpModel
from mufigp.kernels import rbf

N = 10_000
U = np.linspace(0, 1, 2001)


def _synthetic(seed, true_sd=1.0, n=N):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=n)
    sd = rng.uniform(0.5, 2.0, size=n)
    return GaussianPrediction(mu, sd ** 2), mu + true_sd * sd * rng.normal(size=n)


def test_pre_calibration_coverage_oracle():
    # a 95% interval of width 2 * 1.96 sigma covers |z| <= 0.98 when the truth has 2 sigma
    oracle = special.ndtr(0.98) - special.ndtr(-0.98)
    assert oracle == pytest.approx(0.6729, abs=1e-4)
    p, y = _synthetic(0, true_sd=2.0)
    assert C.coverage(p, y) == pytest.approx(oracle, abs=0.015)


def test_isotonic_identity_on_calibrated_data():
    p, y = _synthetic(1)
    cm = C.fit_isotonic(p, y)
    assert np.max(np.abs(cm.warp(U) - U)) <= 0.02
    assert np.all(np.diff(cm.warp(U)) >= 0)
    assert cm.warp(0.0) == 0.0 and cm.warp(1.0) == 1.0


@pytest.mark.parametrize("method", ["isotonic", "normal", "beta"])
def test_coverage_repair_for_overconfident_predictor(method):
    p, y = _synthetic(2, true_sd=2.0)
    p_eval, y_eval = _synthetic(3, true_sd=2.0)
    cm = C.fit_map(method, p, y, rng=np.random.default_rng(0))
    assert 0.93 <= C.coverage(C.apply(cm, p_eval), y_eval) <= 0.97


def test_isotonic_map_matches_empirical_coverage_on_its_set():
    p, y = _synthetic(4, true_sd=1.5)
    q = C.apply(C.fit_isotonic(p, y), p)
    for level in (0.5, 0.8, 0.95):
        assert abs(C.coverage(q, y, level) - level) <= 2 / math.sqrt(N)


@given(st.integers(0, 10_000), st.floats(0.4, 3.0))
def test_isotonic_never_increases_pinball_on_its_own_set(seed, true_sd):
    p, y = _synthetic(seed, true_sd=true_sd, n=400)
    q = C.apply(C.fit_isotonic(p, y), p)
    assert C.pinball_loss(q, y) <= C.pinball_loss(p, y) + 1e-12


def test_variance_scale_examples():
    p, y = _synthetic(5)
    assert 0.95 <= C.fit_variance_scale(p, y).s <= 1.05
    p, y = _synthetic(6, true_sd=2.0)
    assert C.fit_variance_scale(p, y).s == pytest.approx(4.0, rel=0.1)
    r = 0.37
    cm = C.fit_variance_scale(GaussianPrediction(np.zeros(12), np.ones(12)), np.full(12, r))
    assert cm.s == r * r


@given(st.integers(0, 10_000))
def test_variance_scale_is_the_nll_argmin(seed):
    p, y = _synthetic(seed, true_sd=1.7, n=200)
    mu, var = p.mean, p.variance

    def f(log_s):
        s = math.exp(log_s)
        return np.mean(0.5 * np.log(2 * np.pi * s * var) + 0.5 * (y - mu) ** 2 / (s * var))

    res = optimize.minimize_scalar(f, bracket=(-5.0, 5.0), method="golden", tol=1e-12)
    assert C.fit_variance_scale(p, y).s == pytest.approx(math.exp(res.x), rel=1e-6)


def test_beta_identity_on_calibrated_data():
    p, y = _synthetic(7)
    cm = C.fit_beta(p, y, rng=np.random.default_rng(0))
    assert np.max(np.abs(cm.warp(U) - U)) <= 0.03
    assert cm.warp(0.0) == 0.0 and cm.warp(1.0) == 1.0
    assert np.all(np.diff(cm.warp(U)) >= 0)


def test_beta_recovers_a_known_warp():
    true = C.CalibrationMap("beta", a=1.5, b=0.7, c=0.3)
    rng = np.random.default_rng(8)
    mu = rng.normal(size=N)
    p = GaussianPrediction(mu, np.ones(N))
    # PIT values distributed as the warp's inverse image of uniforms
    y = mu + special.ndtri(true.inverse(rng.uniform(size=N)))
    cm = C.fit_beta(p, y, rng=rng)
    assert np.max(np.abs(cm.warp(U) - true.warp(U))) <= 0.05


def test_beta_falls_back_to_identity_when_optimizer_fails(monkeypatch):
    p, y = _synthetic(9, n=50)
    monkeypatch.setattr(C.optimize, "minimize",
                        lambda *a, **k: (_ for _ in ()).throw(FloatingPointError("boom")))
    with pytest.warns(RuntimeWarning):
        cm = C.fit_beta(p, y, rng=np.random.default_rng(0))
    assert cm.kind == "identity"


def test_apply_identity_and_variance_scale():
    p = GaussianPrediction(np.array([0.0, 1.0]), np.array([1.0, 4.0]))
    assert C.apply(C.CalibrationMap(), p) is p
    q = C.apply(C.CalibrationMap("variance_scale", s=4.0), GaussianPrediction(np.zeros(1), np.ones(1)))
    lo, hi = C._quantiles(q, np.array([0.025, 0.975]))
    assert (hi[0] - lo[0]) / 2 == pytest.approx(1.959964 * 2, abs=1e-6)
    assert (hi[0] - lo[0]) / 2 == pytest.approx(3.92, abs=1e-3)


def test_isotonic_identity_breakpoints_match_the_gaussian():
    bp = np.linspace(0, 1, 11)
    cm = C.CalibrationMap("isotonic", breakpoints=bp, values=bp)
    p = GaussianPrediction(np.array([0.3, -1.0]), np.array([2.0, 0.5]))
    q = C.apply(cm, p)
    levels = np.array([0.05, 0.3, 0.5, 0.9])
    np.testing.assert_allclose(q.quantile(levels), C._quantiles(p, levels), atol=1e-9)


def test_median_fixed_by_symmetric_maps():
    p = GaussianPrediction(np.array([0.3, -1.0]), np.array([2.0, 0.5]))
    for cm in (C.CalibrationMap("variance_scale", s=3.0), C.CalibrationMap("beta", a=2.0, b=2.0)):
        np.testing.assert_allclose(C._quantiles(C.apply(cm, p), np.array([0.5]))[0], p.mean,
                                   atol=1e-9)


def test_quantile_object_moments_and_density():
    cm = C.CalibrationMap("beta", a=1.0, b=1.0)  # identity warp through the quantile path
    p = GaussianPrediction(np.array([0.5]), np.array([4.0]))
    q = C.apply(cm, p)
    assert q.mean[0] == pytest.approx(0.5, abs=1e-3)
    assert q.std[0] == pytest.approx(2.0, rel=1e-2)
    assert q.density(np.array([0.5]))[0] == pytest.approx(stats.norm(0.5, 2).pdf(0.5), rel=1e-4)


def test_metric_closed_forms():
    z = GaussianPrediction(np.zeros(5), np.ones(5))
    m = C.metrics(z, np.zeros(5))
    assert m["nll"] == pytest.approx(0.918939, abs=1e-6)
    assert m["mpiw"] == pytest.approx(3.919928, abs=1e-6)


def test_median_pinball_is_half_the_mae():
    rng = np.random.default_rng(10)
    p = GaussianPrediction(rng.normal(size=50), np.ones(50))
    y = rng.normal(size=50)
    assert C.pinball_loss(p, y, levels=[0.5]) == pytest.approx(0.5 * np.mean(np.abs(y - p.mean)))


def test_ence_on_calibrated_data():
    p, y = _synthetic(11)
    assert C.ence(p, y) <= 0.1


def test_degenerate_and_small_inputs():
    p = GaussianPrediction(np.zeros(12), np.r_[np.ones(11), 0.0])
    for fit in (C.fit_isotonic, C.fit_variance_scale, C.fit_beta):
        with pytest.raises(DegeneratePredictionError):
            fit(p, np.zeros(12))
    with pytest.raises(ValueError):
        C.fit_isotonic(GaussianPrediction(np.zeros(5), np.ones(5)), np.zeros(5))


def test_map_round_trip_and_metrics_csv():
    p, y = _synthetic(12, true_sd=2.0, n=500)
    for method in C.CALIBRATION_METHODS:
        cm = C.fit_map(method, p, y, rng=np.random.default_rng(0))
        again = C.CalibrationMap.from_dict(cm.to_dict())
        np.testing.assert_array_equal(again.warp(U), cm.warp(U))
        assert again.s == cm.s
    text = C.metrics_csv([("gp", "none", C.metrics(p, y))])
    assert text.splitlines()[0] == "method,calibration,pinball,nll,ence,mpiw"


def test_calibrated_model_wraps_the_top_level():
    rng = np.random.default_rng(13)
    X = rng.uniform(size=(15, 1))
    m = GpModel(rbf([0], 1.0, 0.2), 1e-2, X, np.sin(6 * X[:, 0]))
    Xc = rng.uniform(size=(200, 1))
    yc = np.sin(6 * Xc[:, 0]) + 0.3 * rng.normal(size=200)
    cal = C.calibrate_model(m, Xc, yc, "normal")
    p = cal.predict(Xc)
    np.testing.assert_allclose(p.mean, m.predict(Xc).mean)
    np.testing.assert_allclose(p.variance, cal.map.s * m.predict(Xc).variance)
    again = C.CalibratedModel.from_dict(cal.to_dict())
    np.testing.assert_array_equal(again.predict(Xc).variance, p.variance)
    split = C.split_calibration(10, rng=np.random.default_rng(0))
    assert sorted(np.r_[split[0], split[1]].tolist()) == list(range(10))
