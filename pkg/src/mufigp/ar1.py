"""Linear autoregressive co-kriging (Kennedy-O'Hagan) with level-wise fitting.

Outputs are divided by one scale shared by all levels, with no shift, so an
exact relation ``y_h = rho * y_l`` between raw levels stays exact (a shift
would leave a constant the zero-mean correction must absorb).  Only the base
GP is centered, and its center is added back.  In these units level ``l`` is
``u_l(x) = rho_l * u_{l-1}(x) + delta_l(x)`` with ``delta_l`` an independent
zero-mean GP.  With nested designs the joint posterior factorizes, so level
``l`` is fitted as a GP on the residuals ``y_l - rho_l * y_{l-1}(X_l)`` and the
cost is a sum of per-level cubic costs instead of one cubic in the total
number of points.

The correction carries a constant mean ``c_l``.  ``rho_l`` and ``c_l`` are
profiled out: for fixed correction hyperparameters the likelihood-maximizing
pair is the generalized least-squares estimate, and by
the envelope theorem the gradient with respect to the remaining
hyperparameters is the ordinary residual-likelihood gradient.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from . import gp
from .dataset_io import FidelityDataset, dataset_from_dict, dataset_to_dict
from .exceptions import ConfigurationError, FitError
from .gp import GaussianPrediction, GpModel, cholesky_jitter, normalization
from .kernels import Kernel, gram_and_grad, kernel_from_dict, rbf


class Ar1Chain:
    """Fitted AR1 hierarchy: base GP plus ``(rho, delta GP)`` per higher level."""

    kind = "ar1"

    def __init__(self, dataset: FidelityDataset, base: GpModel, rhos, deltas,
                 center, scale, *, learn_noise=True, normalize=True, offsets=None):
        if dataset.n_levels < 2:
            raise ConfigurationError("AR1 needs at least two fidelity levels")
        self.dataset = dataset
        self.base = base
        self.rhos = [float(r) for r in rhos]
        self.deltas = list(deltas)
        self.offsets = [0.0] * len(self.deltas) if offsets is None else [float(c) for c in offsets]
        self.center = float(center)
        self.scale = float(scale)
        self.learn_noise = learn_noise
        self.normalize = normalize
        self.nesting = [dataset.nesting_map(l) for l in range(1, dataset.n_levels)]

    @property
    def n_levels(self) -> int:
        return self.dataset.n_levels

    @property
    def rho(self) -> list[float]:
        """Scale factors, one per level >= 2 (unit-free)."""
        return list(self.rhos)

    def _standardized(self, Xq, level):
        mean, var = self.base.latent(Xq)
        mean = mean + self.center / self.scale
        for l in range(1, level):
            rho = self.rhos[l - 1]
            dm, dv = self.deltas[l - 1].latent(Xq)
            mean = rho * mean + dm + self.offsets[l - 1]
            var = rho * rho * var + dv
        return mean, var

    def predict(self, Xq, level: int | None = None, **_ignored) -> GaussianPrediction:
        """Predict level ``level`` (1-based; default: highest)."""
        level = self.n_levels if level is None else int(level)
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level must be in 1..{self.n_levels}")
        Xq = self.base._check(Xq)
        mean, var = self._standardized(Xq, level)
        s = self.scale
        return GaussianPrediction(mean * s, np.maximum(var, 0.0) * s * s)

    def params_for_warm_start(self):
        return [self.base.params] + [np.asarray(d.params) for d in self.deltas]

    def to_dict(self):
        return {
            "kind": self.kind,
            "dataset": dataset_to_dict(self.dataset),
            "base": self.base.to_dict(),
            "rhos": self.rhos,
            "offsets": self.offsets,
            "deltas": [d.to_dict() for d in self.deltas],
            "center": self.center,
            "scale": self.scale,
            "learn_noise": self.learn_noise,
            "normalize": self.normalize,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(dataset_from_dict(doc["dataset"]), GpModel.from_dict(doc["base"]),
                   doc["rhos"], [GpModel.from_dict(d) for d in doc["deltas"]],
                   doc["center"], doc["scale"], learn_noise=doc["learn_noise"],
                   normalize=doc["normalize"], offsets=doc["offsets"])

    def with_data(self, dataset: FidelityDataset) -> "Ar1Chain":
        """Condition on a new dataset keeping every hyperparameter and scaling."""
        return Ar1Chain.from_parts(
            dataset, self.base.kernel, self.base.noise_variance, self.rhos,
            [d.kernel for d in self.deltas], [d.noise_variance for d in self.deltas],
            normalize=self.normalize, center=self.center, scale=self.scale,
            learn_noise=self.learn_noise, offsets=self.offsets)

    @classmethod
    def from_parts(cls, dataset, base_kernel, base_noise, rhos, delta_kernels, delta_noises,
                   normalize=False, center=None, scale=None, learn_noise=True,
                   offsets=None):
        """Assemble a chain with fixed hyperparameters."""
        if center is None or scale is None:
            center, scale = _level_normalization(dataset, normalize)
        ys = [lev.y / scale for lev in dataset.levels]
        base = GpModel(base_kernel, base_noise, dataset.levels[0].X, dataset.levels[0].y,
                       normalize=False, learn_noise=learn_noise, y_shift=center, y_scale=scale)
        offsets = [0.0] * (dataset.n_levels - 1) if offsets is None else list(offsets)
        deltas = []
        for l in range(1, dataset.n_levels):
            idx = dataset.nesting_map(l)
            r = ys[l] - rhos[l - 1] * ys[l - 1][idx] - offsets[l - 1]
            deltas.append(GpModel(delta_kernels[l - 1], delta_noises[l - 1],
                                  dataset.levels[l].X, r, normalize=False, learn_noise=learn_noise))
        return cls(dataset, base, rhos, deltas, center, scale, learn_noise=learn_noise,
                   normalize=normalize, offsets=offsets)


def _level_normalization(dataset, normalize):
    if not normalize:
        return 0.0, 1.0
    return normalization(dataset.levels[0].y)


def profiled_residual_lml(kernel: Kernel, noise, X, target, prev, *, learn_noise=True):
    """Residual log-likelihood with ``rho`` and the offset at their conditional optimum.

    Returns ``(value, grad, (rho, offset))``; ``grad`` covers the kernel
    log-parameters and (if ``learn_noise``) the log noise.  With fewer than
    three points the offset is pinned to zero so the fit stays identifiable.
    """
    n = X.shape[0]
    K, dK = gram_and_grad(kernel, X)
    L, jitter = cholesky_jitter(K + noise * np.eye(n), scale=float(np.mean(np.diag(K))))
    H = np.column_stack([prev, np.ones(n)]) if n >= 3 else prev[:, None]
    KH = linalg.cho_solve((L, True), H)
    beta = np.linalg.lstsq(H.T @ KH, KH.T @ target, rcond=1e-12)[0]
    rho, offset = float(beta[0]), (float(beta[1]) if beta.size > 1 else 0.0)
    r = target - H @ beta
    alpha = linalg.cho_solve((L, True), r)
    value = -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * gp.LOG_2PI
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    rel = jitter / max(float(np.mean(np.diag(K))), 1e-300)
    trW = np.trace(W)
    grad = [0.5 * np.sum(W * g) + 0.5 * rel * float(np.mean(np.diag(g))) * trW for g in dK]
    if learn_noise:
        grad.append(0.5 * noise * trW)
    return float(value), np.asarray(grad), (rho, offset)


def fit_ar1(data: FidelityDataset, spec_per_level=None, restarts: int = 10,
            rng: np.random.Generator | None = None, *, learn_noise: bool = True,
            noise_variance: float = 0.0, normalize: bool = True, init=None) -> Ar1Chain:
    """Fit the AR1 hierarchy level by level.

    ``spec_per_level`` optionally gives one kernel per level (index 0 for the
    base GP, index ``l`` for the correction of level ``l+1``); the default is
    an ARD RBF on all inputs.  ``init`` is the output of
    :meth:`Ar1Chain.params_for_warm_start` of a previous fit.
    """
    rng = np.random.default_rng() if rng is None else rng
    if data.n_levels < 2:
        raise ConfigurationError("AR1 needs at least two fidelity levels")
    for i, lev in enumerate(data.levels):
        if len(lev) < 2:
            raise ConfigurationError(f"level {i + 1} has {len(lev)} point(s); AR1 needs >= 2")
    nesting = [data.nesting_map(l) for l in range(1, data.n_levels)]
    d = data.dim
    specs = list(spec_per_level) if spec_per_level is not None else [rbf(range(d))] * data.n_levels
    center, scale = _level_normalization(data, normalize)
    ys = [lev.y / scale for lev in data.levels]
    init = init or [None] * data.n_levels

    base = gp.fit(data.levels[0].X, ys[0] - center / scale, specs[0], restarts, rng, learn_noise=learn_noise,
                  noise_variance=noise_variance, normalize=False, init=init[0])
    base = GpModel(base.kernel, base.noise_variance, base.X, data.levels[0].y, normalize=False,
                   learn_noise=learn_noise, y_shift=center, y_scale=scale)
    rhos, offsets, deltas = [], [], []
    for l in range(1, data.n_levels):
        X = data.levels[l].X
        target, prev = ys[l], ys[l - 1][nesting[l - 1]]
        spec = specs[l]

        def objective(theta, spec=spec, X=X, target=target, prev=prev):
            k = spec.with_params(theta[:spec.n_params])
            nv = float(np.exp(theta[-1])) if learn_noise else noise_variance
            v, g, _ = profiled_residual_lml(k, nv, X, target, prev, learn_noise=learn_noise)
            return v, g

        bounds = gp.param_bounds(spec, learn_noise)
        inits = [gp.random_init(spec, learn_noise, rng) for _ in range(restarts)]
        if init[l] is not None:
            inits = [np.asarray(init[l], dtype=float)] + inits[:max(restarts - 1, 0)]
        theta, best, failures = gp.maximize(objective, inits, bounds)
        if theta is None:
            raise FitError(f"AR1 level {l + 1}: all restarts failed", {"failures": failures})
        k = spec.with_params(theta[:spec.n_params])
        nv = float(np.exp(theta[-1])) if learn_noise else noise_variance
        _, _, (rho, offset) = profiled_residual_lml(k, nv, X, target, prev,
                                                    learn_noise=learn_noise)
        rhos.append(rho)
        offsets.append(offset)
        deltas.append(GpModel(k, nv, X, target - rho * prev - offset, normalize=False,
                              learn_noise=learn_noise))
    return Ar1Chain(data, base, rhos, deltas, center, scale, learn_noise=learn_noise,
                    normalize=normalize, offsets=offsets)


def predict_ar1(chain: Ar1Chain, Xq, level: int | None = None) -> GaussianPrediction:
    return chain.predict(Xq, level)
