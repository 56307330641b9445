import numpy as np
import pytest
import torch

from mufigp import gp
from mufigp.dataset_io import FidelityDataset
from mufigp.dgp import DeepGpStack, DgpConfig, SvgpLayer, _kl, fit_dgp
from mufigp.exceptions import ConfigurationError
from mufigp.kernels import gram, rbf
from mufigp.problems import linear_high, low


def _single(kernel, Z, q_mu, q_sqrt, noise, X, y):
    ds = FidelityDataset.from_arrays([X], [y])
    return DeepGpStack("nardgp", ds, [SvgpLayer(kernel, Z, q_mu, q_sqrt, noise)], DgpConfig())


def _optimal_q(kernel, X, y, noise):
    """Variational optimum at Z = X, using the same relative jitter as the layer."""
    K = gram(kernel, X)
    Kj = K + 1e-6 * np.mean(np.diag(K)) * np.eye(len(X))
    A = Kj + noise * np.eye(len(X))
    m = Kj @ np.linalg.solve(A, y)
    C = Kj - Kj @ np.linalg.solve(A, Kj)
    return m, np.linalg.cholesky(C + 1e-12 * np.eye(len(X)))


def test_prior_variational_posterior_recovers_the_prior():
    rng = np.random.default_rng(0)
    k = rbf([0], 1.3, 0.2)
    Z = rng.uniform(size=(6, 1))
    K = gram(k, Z)
    # S = K(Z, Z) with the layer's own relative jitter
    L = np.linalg.cholesky(K + 1e-6 * np.mean(np.diag(K)) * np.eye(6))
    st = _single(k, Z, np.zeros(6), L, 0.1, Z, np.zeros(6))
    A = rng.uniform(-0.5, 1.5, size=(20, 1))
    mean, var = st.layer_predictive(1, A)
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(var, 1.3, rtol=1e-5)


def test_full_inducing_set_matches_exact_gp():
    rng = np.random.default_rng(1)
    X = np.sort(rng.uniform(size=(10, 1)), axis=0)
    y = np.sin(6 * X[:, 0])
    k, noise = rbf([0], 1.0, 0.3), 1e-2
    m, L = _optimal_q(k, X, y, noise)
    st = _single(k, X, m, L, noise, X, y)
    exact = gp.GpModel(k, noise, X, y, normalize=False)
    A = np.linspace(-0.2, 1.2, 30)[:, None]
    mean, var = st.layer_predictive(1, A)
    em, ev = exact.latent(A)
    np.testing.assert_allclose(mean, em, atol=1e-4)
    np.testing.assert_allclose(var, ev, atol=1e-4)


def test_single_inducing_point():
    k = rbf([0], 1.0, 0.4)
    st = _single(k, [[0.3]], [0.7], [[0.2]], 0.1, [[0.3]], [0.0])
    mean, var = st.layer_predictive(1, [[0.3]])
    assert mean[0] == pytest.approx(0.7, rel=1e-5)
    assert var[0] == pytest.approx(0.04, rel=1e-4)


def test_kl_vanishes_at_the_prior():
    assert float(_kl(torch.zeros(4, dtype=torch.float64), torch.eye(4, dtype=torch.float64))) == 0.0
    rng = np.random.default_rng(2)
    k = rbf([0], 0.8, 0.3)
    Z = rng.uniform(size=(5, 1))
    L = np.linalg.cholesky(gram(k, Z) + 1e-6 * 0.8 * np.eye(5))
    # zero data term weight: with no data the bound is minus the KL
    st = _single(k, Z, np.zeros(5), L, 1.0, Z, np.zeros(5))
    ell = -0.5 * 5 * np.log(2 * np.pi) - 0.5 * np.sum(st.layer_predictive(1, Z)[1])
    assert st.elbo(1) == pytest.approx(ell, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_elbo_below_exact_lml(seed):
    rng = np.random.default_rng(100 + seed)
    n, M = 8, int(rng.integers(1, 9))
    X = rng.uniform(size=(n, 1))
    y = rng.normal(size=n)
    k = rbf([0], rng.uniform(0.3, 2.0), rng.uniform(0.05, 1.0))
    noise = rng.uniform(0.01, 0.5)
    Z = rng.uniform(size=(M, 1))
    L = np.tril(rng.normal(size=(M, M))) * 0.3
    L[np.diag_indices(M)] = np.abs(L[np.diag_indices(M)]) + 0.05
    st = _single(k, Z, rng.normal(size=M), L, noise, X, y)
    lml = gp.log_marginal_likelihood(k, noise, X, y, with_grad=False)
    assert st.elbo(1) <= lml + 1e-8 * abs(lml)


def test_bound_is_tight_at_the_variational_optimum():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(10, 1))
    y = np.sin(6 * X[:, 0]) + 0.05 * rng.normal(size=10)
    k, noise = rbf([0], 1.0, 0.3), 1e-2
    m, L = _optimal_q(k, X, y, noise)
    st = _single(k, X, m, L, noise, X, y)
    lml = gp.log_marginal_likelihood(k, noise, X, y, with_grad=False)
    assert abs(st.elbo(1) - lml) <= 1e-2


def _two_level(n=5, M=3, method="nardgp", seed=0):
    rng = np.random.default_rng(seed)
    X1 = rng.uniform(size=(n, 1))
    ds = FidelityDataset.from_arrays([X1, X1], [low(X1), linear_high(X1)], domain=[[0, 1]])
    cfg = DgpConfig(inducing=(M, M), steps=0, init_restarts=2, seed=seed)
    return fit_dgp(ds, method, cfg)


@pytest.mark.parametrize("method", ["nardgp", "dgpdfc"])
def test_elbo_gradient_matches_finite_differences(method):
    st = _two_level(method=method)
    v0 = st.param_vector()
    _, g = st.elbo(4, np.random.default_rng(7), with_grad=True)
    h = 1e-6
    fd = np.empty_like(v0)
    for i in range(v0.size):
        e = np.zeros_like(v0)
        e[i] = h
        up = st.with_param_vector(v0 + e).elbo(4, np.random.default_rng(7))
        dn = st.with_param_vector(v0 - e).elbo(4, np.random.default_rng(7))
        fd[i] = (up - dn) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-2)
    assert rel.max() <= 1e-3


def test_zero_step_prior_init_predicts_prior_variance():
    rng = np.random.default_rng(4)
    X1 = rng.uniform(size=(12, 1))
    ds = FidelityDataset.from_arrays([X1, X1[:6]], [low(X1), linear_high(X1[:6])])
    st = fit_dgp(ds, "nardgp", DgpConfig(steps=0, variational_init="prior", init_restarts=2,
                                         seed=1))
    assert st.trace.size == 0
    for level, layer in enumerate(st.layers, start=1):
        A = rng.uniform(size=(15, layer.width))
        mean, var = st.layer_predictive(level, A)
        np.testing.assert_allclose(mean, 0.0, atol=1e-10)
        np.testing.assert_allclose(var, np.diag(gram(layer.kernel, A)), rtol=1e-4)


def test_level_one_prediction_is_the_layer_marginal():
    st = _two_level(n=8)
    q = np.linspace(0, 1, 7)[:, None]
    p = st.predict(q, level=1, samples=5000, rng=np.random.default_rng(0))
    mean, var = st.layer_predictive(1, q)
    layer = st.layers[0]
    np.testing.assert_allclose(p.mean, mean * layer.y_scale + layer.y_shift, rtol=1e-10)
    np.testing.assert_allclose(p.variance, var * layer.y_scale ** 2, rtol=1e-10)


def test_prediction_standard_error_slope():
    st = _two_level(n=8)
    q = np.array([[0.41]])
    sizes = np.array([25, 100, 400, 1600])
    spread = [np.std([st.predict(q, samples=int(S), rng=np.random.default_rng(r)).mean[0]
                      for r in range(60)]) for S in sizes]
    slope = np.polyfit(np.log(sizes), np.log(spread), 1)[0]
    assert -0.6 <= slope <= -0.4


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(5)
    X1 = rng.uniform(size=(30, 1))
    X2 = X1[rng.choice(30, 8, replace=False)]
    ds = FidelityDataset.from_arrays([X1, X2], [low(X1), linear_high(X2)], domain=[[0, 1]])
    cfg = DgpConfig(inducing=(15, 8), steps=600, mc_samples=5, init_restarts=3, seed=3)
    return ds, cfg, fit_dgp(ds, "nardgp", cfg)


def test_training_is_deterministic(trained):
    ds, cfg, st = trained
    again = fit_dgp(ds, "nardgp", cfg)
    np.testing.assert_array_equal(st.trace, again.trace)
    q = np.linspace(0, 1, 5)[:, None]
    np.testing.assert_array_equal(st.predict(q, samples=50, rng=np.random.default_rng(1)).mean,
                                  again.predict(q, samples=50, rng=np.random.default_rng(1)).mean)


def test_smoothed_elbo_settles(trained):
    trace = trained[2].trace
    smooth = np.convolve(trace, np.ones(50) / 50, mode="valid")
    late = smooth[len(smooth) // 2:]
    span = smooth.max() - smooth.min()
    assert np.all(np.diff(late) >= -0.05 * span)


def test_round_trip_gives_identical_samples(trained):
    st = trained[2]
    again = DeepGpStack.from_dict(st.to_dict())
    q = np.linspace(0, 1, 5)[:, None]
    a = st.predict(q, samples=100, rng=np.random.default_rng(3))
    b = again.predict(q, samples=100, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variance, b.variance)


def test_configuration_errors():
    ds = FidelityDataset.from_arrays([[[0.0], [1.0]], [[0.0]]], [[0.0, 1.0], [0.0]])
    with pytest.raises(ConfigurationError):
        fit_dgp(ds, "deep", DgpConfig(steps=0))
    with pytest.raises(ConfigurationError):
        SvgpLayer(rbf([0]), [[0.0]], [0.0], [[-1.0]], 0.1)
