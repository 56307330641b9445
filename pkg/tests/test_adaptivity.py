import numpy as np
import pytest

from mufigp.adaptivity import (AdaptConfig, adapt_loop, history_csv, max_posterior_std, model_dataset,
                               replay)
from mufigp.dataset_io import FidelityDataset
from mufigp.exceptions import ConfigurationError
from mufigp.gp import GpModel
from mufigp.kernels import rbf
from mufigp.problems import get_problem, low, nonlinear_high
from mufigp.stack import fit_stack

BOX = [[0.0, 1.0]]


def _gp(X, y, ls=0.2):
    return GpModel(rbf([0], 1.0, ls), 1e-6, np.asarray(X, float).reshape(-1, 1), y)


def test_symmetric_two_point_gp_acquires_the_midpoint():
    m = _gp([0.0, 1.0], [0.0, 0.0], ls=0.3)
    x, _ = max_posterior_std(m, 1, AdaptConfig(BOX), np.random.default_rng(0))
    assert abs(x[0] - 0.5) <= 0.02


@pytest.mark.parametrize("seed", range(5))
def test_argmax_agrees_with_dense_grid(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=6)
    m = _gp(X, np.sin(5 * X), ls=rng.uniform(0.05, 0.3))
    _, best = max_posterior_std(m, 1, AdaptConfig(BOX), rng)
    grid = np.linspace(0, 1, 1001)[:, None]
    assert abs(best - m.predict(grid).std.max()) <= 1e-3


def test_dense_noise_free_data_stops_on_threshold():
    X = np.linspace(0, 1, 60)
    m = _gp(X, np.sin(3 * X), ls=0.3)
    _, best = max_posterior_std(m, 1, AdaptConfig(BOX), np.random.default_rng(0))
    assert best <= 1e-3
    out, hist = adapt_loop(m, lambda P: np.sin(3 * P[:, 0]), AdaptConfig(BOX, std_threshold=1e-3),
                           np.random.default_rng(0))
    assert hist == [] and out is m


def test_zero_steps_leaves_the_model_alone():
    m = _gp([0.2, 0.7], [1.0, 2.0])
    out, hist = adapt_loop(m, lambda P: P[:, 0], AdaptConfig(BOX, steps=0))
    assert out is m and hist == []


def test_std_shrinks_monotonically_without_refits():
    m = _gp([0.1, 0.5], [0.0, 1.0], ls=0.15)
    f = lambda P: np.cos(4 * P[:, 0])
    _, hist = adapt_loop(m, f, AdaptConfig(BOX, steps=8, refit=False), np.random.default_rng(1))
    sig = [h.sigma_before for h in hist]
    assert len(sig) == 8
    assert all(b <= a + 1e-6 for a, b in zip(sig, sig[1:]))
    assert all(0 <= h.point[0] <= 1 for h in hist)


def test_replay_rebuilds_the_final_dataset():
    rng = np.random.default_rng(2)
    X1 = rng.uniform(size=(20, 1))
    X2 = X1[:5]
    ds = FidelityDataset.from_arrays([X1, X2], [low(X1), nonlinear_high(X2)])
    st = fit_stack(ds, "nargp", restarts=2, rng=rng)
    P = get_problem("nonlinear")
    cfg = AdaptConfig(BOX, steps=3, warm_restarts=1, full_restarts=1, mc_samples=100,
                      candidate_count=256)
    out, hist = adapt_loop(st, [P.oracle(1), P.oracle(2)], cfg, rng)
    assert len(hist) == 3
    final = model_dataset(out)
    assert len(final.levels[1]) == 8
    # nesting is kept by evaluating the level below at each new point
    assert final.is_nested(1)
    again = replay(ds, hist)
    for a, b in zip(again.levels, final.levels):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)
    assert history_csv(hist).splitlines()[0] == "step,level,x1,value,sigma_before,heldout_mse"


def test_oracle_failure_returns_partial_history():
    calls = []

    def flaky(P):
        calls.append(P)
        if len(calls) > 2:
            raise RuntimeError("solver crashed")
        return np.sin(P[:, 0])

    m = _gp([0.0, 1.0], [0.0, 0.8])
    with pytest.warns(RuntimeWarning, match="partial"):
        out, hist = adapt_loop(m, flaky, AdaptConfig(BOX, steps=5, refit=False),
                               np.random.default_rng(3))
    assert len(hist) == 2
    assert out.X.shape[0] == 4


def test_heldout_series_is_recorded():
    m = _gp([0.0, 1.0], [0.0, 0.0])
    f = lambda P: np.sin(6 * P[:, 0])
    G = np.linspace(0, 1, 50)[:, None]
    _, hist = adapt_loop(m, f, AdaptConfig(BOX, steps=4, heldout=(G, f(G)), warm_restarts=1,
                                           full_restarts=2), np.random.default_rng(4))
    assert all(np.isfinite(h.heldout_mse) for h in hist)


def test_configuration_errors():
    with pytest.raises(ConfigurationError):
        AdaptConfig([[1.0, 0.0]])
    with pytest.raises(ConfigurationError):
        AdaptConfig(BOX, steps=-1)
    m = _gp([0.0], [0.0])
    with pytest.raises(ConfigurationError):
        adapt_loop(m, np.sin, AdaptConfig(BOX, level_order=(2,)))
