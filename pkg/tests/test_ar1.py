import numpy as np
import pytest
from hypothesis import given, strategies as st

from mufigp.ar1 import Ar1Chain, fit_ar1
from mufigp.dataset_io import FidelityDataset
from mufigp.exceptions import NestingError
from mufigp.gp import GpModel
from mufigp.kernels import gram, rbf


def _nested(rng, n1, n2, d=1):
    X1 = rng.uniform(size=(n1, d))
    X2 = X1[np.sort(rng.choice(n1, n2, replace=False))]
    return X1, X2


def joint_oracle(k1, kd, rho, X1, y1, X2, y2, Xq, j1, jd):
    """Condition the full two-level joint Gaussian directly.

    Level 1 carries an observation variance ``j1`` and the correction a
    variance ``jd``; the level-2 observations see ``rho * u1 + delta``.
    """
    K11 = gram(k1, X1) + j1 * np.eye(len(X1))
    K12 = rho * gram(k1, X1, X2)
    # y2 = rho * y1|X2 - rho * e1|X2 + delta + e_d; the e1 term makes the
    # joint exactly match the level-wise residual construction
    idx = [int(np.argmin(np.abs(X1[:, 0] - x))) for x in X2[:, 0]]
    K12 = K12 + rho * j1 * np.eye(len(X1))[:, idx]
    K22 = rho ** 2 * gram(k1, X2) + gram(kd, X2) + jd * np.eye(len(X2)) + rho ** 2 * j1 * np.eye(len(X2))
    C = np.block([[K11, K12], [K12.T, K22]])
    kq = np.vstack([rho * gram(k1, X1, Xq) + rho * 0.0, rho ** 2 * gram(k1, X2, Xq) + gram(kd, X2, Xq)])
    y = np.concatenate([y1, y2])
    mean = kq.T @ np.linalg.solve(C, y)
    prior = rho ** 2 * np.diag(gram(k1, Xq)) + np.diag(gram(kd, Xq))
    var = prior - np.einsum("ij,ij->j", kq, np.linalg.solve(C, kq))
    return mean, var


def _chain(rng, n1, n2):
    X1, X2 = _nested(rng, n1, n2)
    y1 = np.sin(6 * X1[:, 0]) + 0.3 * rng.normal(size=n1)
    y2 = 1.7 * y1[[int(np.argmin(np.abs(X1[:, 0] - x))) for x in X2[:, 0]]] + 0.5 * X2[:, 0]
    ds = FidelityDataset.from_arrays([X1, X2], [y1, y2])
    k1 = rbf([0], rng.uniform(0.5, 1.5), rng.uniform(0.1, 0.4))
    kd = rbf([0], rng.uniform(0.1, 1.0), rng.uniform(0.2, 0.6))
    rho = rng.uniform(-2, 2)
    chain = Ar1Chain.from_parts(ds, k1, 1e-4, [rho], [kd], [1e-4], normalize=False)
    return chain, ds, k1, kd, rho


@given(st.integers(0, 100_000), st.integers(2, 8), st.data())
def test_recursive_prediction_equals_joint_conditioning(seed, n1, data):
    n2 = data.draw(st.integers(1, min(4, n1)))
    rng = np.random.default_rng(seed)
    chain, ds, k1, kd, rho = _chain(rng, n1, n2)
    Xq = np.linspace(-0.2, 1.2, 17)[:, None]
    p = chain.predict(Xq)
    j1 = chain.base.noise_variance + chain.base.jitter
    jd = chain.deltas[0].noise_variance + chain.deltas[0].jitter
    (X1, X2), (y1, y2) = [l.X for l in ds.levels], [l.y for l in ds.levels]
    m, v = joint_oracle(k1, kd, rho, X1, y1, X2, y2, Xq, j1, jd)
    scale = max(1.0, np.max(np.abs(m)))
    assert np.max(np.abs(p.mean - m)) <= 1e-6 * scale
    assert np.max(np.abs(p.variance - np.maximum(v, 0))) <= 1e-6 * max(1.0, np.max(v))
    assert np.all(p.variance >= 0)


def test_joint_oracle_on_fixed_instance():
    rng = np.random.default_rng(11)
    chain, ds, k1, kd, rho = _chain(rng, 6, 3)
    Xq = rng.uniform(size=(9, 1))
    p = chain.predict(Xq)
    j1 = chain.base.noise_variance + chain.base.jitter
    jd = chain.deltas[0].noise_variance + chain.deltas[0].jitter
    m, v = joint_oracle(k1, kd, rho, ds.levels[0].X, ds.levels[0].y, ds.levels[1].X,
                        ds.levels[1].y, Xq, j1, jd)
    np.testing.assert_allclose(p.mean, m, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(p.variance, v, rtol=1e-6, atol=1e-9)


def test_level_one_is_the_base_gp():
    rng = np.random.default_rng(0)
    chain, *_ = _chain(rng, 8, 3)
    Xq = rng.uniform(size=(5, 1))
    b = chain.base.predict(Xq)
    p = chain.predict(Xq, level=1)
    np.testing.assert_allclose(p.mean, b.mean)
    np.testing.assert_allclose(p.variance, b.variance)


def test_zero_rho_gives_the_correction_alone():
    rng = np.random.default_rng(1)
    X1, X2 = _nested(rng, 8, 4)
    ds = FidelityDataset.from_arrays([X1, X2], [np.sin(5 * X1[:, 0]), np.cos(3 * X2[:, 0])])
    kd = rbf([0], 1.0, 0.3)
    chain = Ar1Chain.from_parts(ds, rbf([0]), 1e-6, [0.0], [kd], 1e-6 * np.ones(1), normalize=False)
    delta = GpModel(kd, 1e-6, X2, ds.levels[1].y, normalize=False)
    Xq = rng.uniform(size=(6, 1))
    np.testing.assert_allclose(chain.predict(Xq).mean, delta.predict(Xq).mean, atol=1e-12)
    np.testing.assert_allclose(chain.predict(Xq).variance, delta.predict(Xq).variance, atol=1e-12)


def test_exact_scaling_recovers_rho():
    rng = np.random.default_rng(2)
    X1, X2 = _nested(rng, 20, 8)
    y1 = np.sin(8 * np.pi * X1[:, 0])
    idx = [int(np.argmin(np.abs(X1[:, 0] - x))) for x in X2[:, 0]]
    ds = FidelityDataset.from_arrays([X1, X2], [y1, 2 * y1[idx]])
    chain = fit_ar1(ds, restarts=3, rng=rng)
    assert chain.rho[0] == pytest.approx(2.0, abs=1e-3)
    assert chain.deltas[0].kernel.signal_variance == pytest.approx(1e-6, rel=1e-2)


def test_identical_levels():
    rng = np.random.default_rng(3)
    X1, X2 = _nested(rng, 20, 6)
    f = lambda X: np.sin(6 * X[:, 0])
    ds = FidelityDataset.from_arrays([X1, X2], [f(X1), f(X2)])
    chain = fit_ar1(ds, restarts=3, rng=rng)
    assert chain.rho[0] == pytest.approx(1.0, abs=1e-2)
    np.testing.assert_allclose(chain.predict(X2).mean, f(X2), atol=1e-4)


def test_non_nested_designs_name_the_rows():
    rng = np.random.default_rng(4)
    X1 = rng.uniform(size=(6, 1))
    X2 = np.vstack([X1[:2], [[5.0]]])
    ds = FidelityDataset.from_arrays([X1, X2], [np.zeros(6), np.zeros(3)])
    with pytest.raises(NestingError) as err:
        fit_ar1(ds, restarts=1, rng=rng)
    assert 2 in err.value.rows


@given(st.integers(0, 10_000), st.sampled_from([0.5, 3.0, -2.0]))
def test_output_rescaling_with_fixed_hyperparameters(seed, a):
    rng = np.random.default_rng(seed)
    chain, ds, k1, kd, rho = _chain(rng, 7, 3)
    scaled = FidelityDataset.from_arrays([l.X for l in ds.levels], [a * l.y for l in ds.levels])
    # the same covariance structure on rescaled outputs: variances scale with a^2
    c2 = Ar1Chain.from_parts(scaled, k1.with_params(k1.params + [2 * np.log(abs(a)), 0.0]),
                             1e-4 * a * a, [rho],
                             [kd.with_params(kd.params + [2 * np.log(abs(a)), 0.0])], [1e-4 * a * a],
                             normalize=False)
    Xq = rng.uniform(size=(5, 1))
    p, q = chain.predict(Xq), c2.predict(Xq)
    np.testing.assert_allclose(q.mean, a * p.mean, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(q.variance, a * a * p.variance, rtol=1e-6, atol=1e-9)


def test_round_trip_and_with_data():
    rng = np.random.default_rng(5)
    X1, X2 = _nested(rng, 15, 5)
    ds = FidelityDataset.from_arrays([X1, X2], [np.sin(5 * X1[:, 0]), 2 * np.sin(5 * X2[:, 0]) + X2[:, 0]])
    chain = fit_ar1(ds, restarts=2, rng=rng)
    again = Ar1Chain.from_dict(chain.to_dict())
    Xq = rng.uniform(size=(4, 1))
    np.testing.assert_array_equal(chain.predict(Xq).mean, again.predict(Xq).mean)
    same = chain.with_data(ds)
    np.testing.assert_allclose(same.predict(Xq).mean, chain.predict(Xq).mean, atol=1e-10)
