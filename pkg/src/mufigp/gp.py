"""Exact Gaussian-process regression.

Outputs are standardized before fitting (zero-mean prior) and the constants
are inverted at prediction time.  Hyperparameters are optimized in log space
with L-BFGS-B from several log-uniform random starts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .exceptions import ConditioningError, FitError, ShapeError
from .kernels import Kernel, gram, gram_and_grad, gram_diag, kernel_from_dict

log = logging.getLogger(__name__)

JITTER_LADDER = (1e-6, 1e-5, 1e-4)
NOISE_FLOOR = 1e-8

# log-space optimization box and restart-initialization box
VARIANCE_BOUNDS = (1e-6, 1e3)
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
NOISE_BOUNDS = (NOISE_FLOOR, 1e1)
INIT_BOX = (1e-2, 1e1)
NOISE_INIT_BOX = (1e-6, 1e-2)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianPrediction:
    """Pointwise Gaussian predictive distribution.

    ``approximate`` flags results computed under a violated precondition
    (e.g. mean propagation through layers with large variance).
    """

    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None
    approximate: bool = False

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def __len__(self):
        return len(self.mean)


def cholesky_jitter(K: np.ndarray, scale: float | None = None, ladder=JITTER_LADDER):
    """Cholesky factor of ``K + jitter*I`` with the jitter escalated on failure.

    The jitter is relative to ``scale`` (default: mean of the diagonal).
    Returns ``(L, absolute_jitter)``.
    """
    n = K.shape[0]
    if scale is None:
        scale = float(np.mean(np.diag(K))) if n else 1.0
    scale = max(scale, 1e-300)
    for rel in ladder:
        jitter = rel * scale
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        return L, jitter
    raise ConditioningError(
        f"Cholesky failed for {n}x{n} matrix after jitter {ladder[-1]:g} x {scale:.3g}"
    )


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ShapeError(f"expected a (n, d) matrix, got shape {X.shape}")
    return X


def log_marginal_likelihood(kernel: Kernel, noise_variance: float, X, y, *,
                            with_grad: bool = True, learn_noise: bool = True):
    """Log evidence ``log p(y | X, theta)`` and its gradient.

    The gradient is with respect to ``kernel.params`` followed (when
    ``learn_noise``) by the log noise variance.  A relative diagonal jitter is
    added to the signal matrix before factorization.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if n == 0 or y.size != n:
        raise ShapeError("X and y must be nonempty and the same length")
    if with_grad:
        K, dK = gram_and_grad(kernel, X)
    else:
        K, dK = gram(kernel, X), []
    L, jitter = cholesky_jitter(K + noise_variance * np.eye(n), scale=float(np.mean(np.diag(K))))
    alpha = linalg.cho_solve((L, True), y)
    value = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    if not with_grad:
        return float(value)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    # the jitter scales with mean(diag K), so it contributes to every derivative
    rel = jitter / max(float(np.mean(np.diag(K))), 1e-300)
    trW = np.trace(W)
    grad = [0.5 * np.sum(W * g) + 0.5 * rel * float(np.mean(np.diag(g))) * trW for g in dK]
    if learn_noise:
        grad.append(0.5 * noise_variance * np.trace(W))
    return float(value), np.asarray(grad)


class GpModel:
    """A fitted exact GP.

    Holds the kernel, noise variance, training data (outputs stored
    standardized) and cached Cholesky factor and weights.  Instances are
    treated as immutable; refitting returns a new model.
    """

    kind = "gp"

    def __init__(self, kernel: Kernel, noise_variance: float, X, y_raw, *,
                 normalize: bool = True, learn_noise: bool = True,
                 y_shift: float | None = None, y_scale: float | None = None):
        self.kernel = kernel
        self.noise_variance = float(noise_variance)
        self.learn_noise = learn_noise
        self.X = _as_2d(X)
        y_raw = np.asarray(y_raw, dtype=float).ravel()
        if y_raw.size != self.X.shape[0]:
            raise ShapeError("X and y lengths differ")
        if y_shift is None or y_scale is None:
            y_shift, y_scale = normalization(y_raw) if normalize else (0.0, 1.0)
        self.normalize = normalize
        self.y_shift = float(y_shift)
        self.y_scale = float(y_scale)
        self.y_raw = y_raw
        self.y = (y_raw - self.y_shift) / self.y_scale
        K = gram(kernel, self.X)
        n = self.X.shape[0]
        self.chol, self.jitter = cholesky_jitter(
            K + self.noise_variance * np.eye(n), scale=float(np.mean(np.diag(K))))
        self.alpha = linalg.cho_solve((self.chol, True), self.y)

    # -- bookkeeping -------------------------------------------------------
    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_train(self) -> int:
        return self.X.shape[0]

    @property
    def params(self) -> np.ndarray:
        p = self.kernel.params
        if self.learn_noise:
            p = np.append(p, np.log(self.noise_variance))
        return p

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self.kernel, self.noise_variance, self.X, self.y,
                                       with_grad=False)

    def _check(self, Xq):
        Xq = _as_2d(Xq)
        if Xq.shape[1] != self.input_dim:
            raise ShapeError(f"model trained on {self.input_dim} columns, query has {Xq.shape[1]}")
        return Xq

    # -- prediction in standardized units -----------------------------------
    def latent(self, Xq, full_cov=False):
        """Posterior of the standardized latent function at ``Xq``."""
        Kx = gram(self.kernel, self.X, Xq)
        mean = Kx.T @ self.alpha
        V = linalg.solve_triangular(self.chol, Kx, lower=True)
        if full_cov:
            cov = gram(self.kernel, Xq) - V.T @ V
            cov = 0.5 * (cov + cov.T)
            return mean, cov
        var = gram_diag(self.kernel, Xq) - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var, 0.0)

    def latent_blocks(self, A):
        """Joint posterior over small blocks of points.

        ``A`` has shape ``(..., b, d)``; returns means ``(..., b)`` and
        covariances ``(..., b, b)`` in standardized units.
        """
        A = np.asarray(A, dtype=float)
        if A.ndim < 2 or A.shape[-1] != self.input_dim:
            raise ShapeError(f"expected blocks of {self.input_dim}-column points, got shape {A.shape}")
        lead, b = A.shape[:-2], A.shape[-2]
        flat = A.reshape(-1, A.shape[-1])
        Kx = gram(self.kernel, self.X, flat)
        mean = (Kx.T @ self.alpha).reshape(lead + (b,))
        V = linalg.solve_triangular(self.chol, Kx, lower=True)
        V = V.T.reshape(lead + (b, self.n_train))
        prior = gram(self.kernel, A, A) if A.ndim > 2 else gram(self.kernel, A)
        cov = prior - V @ np.swapaxes(V, -1, -2)
        return mean, cov

    # -- public ---------------------------------------------------------------
    def predict(self, Xq, want_cov: bool = False, include_noise: bool = False,
                **_ignored) -> GaussianPrediction:
        Xq = self._check(Xq)
        if want_cov:
            mean, cov = self.latent(Xq, full_cov=True)
            if include_noise:
                cov = cov + self.noise_variance * np.eye(len(mean))
            cov = cov * self.y_scale ** 2
            var = np.maximum(np.diag(cov).copy(), 0.0)
        else:
            mean, var = self.latent(Xq)
            if include_noise:
                var = var + self.noise_variance
            var = var * self.y_scale ** 2
            cov = None
        return GaussianPrediction(mean * self.y_scale + self.y_shift, var, cov)

    def sample_posterior(self, Xq, count: int, rng: np.random.Generator) -> np.ndarray:
        """``count`` joint draws of the latent function at ``Xq`` (rows)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        Xq = self._check(Xq)
        mean, cov = self.latent(Xq, full_cov=True)
        L, _ = cholesky_jitter(cov, scale=float(np.mean(gram_diag(self.kernel, Xq))))
        z = rng.standard_normal((count, len(mean)))
        return (mean + z @ L.T) * self.y_scale + self.y_shift

    def with_data(self, X, y_raw, keep_scaling: bool = False) -> "GpModel":
        """Same hyperparameters, new training set.

        The output standardization is recomputed unless ``keep_scaling``.
        """
        shift, scale = (self.y_shift, self.y_scale) if keep_scaling else (None, None)
        return GpModel(self.kernel, self.noise_variance, X, y_raw, normalize=self.normalize,
                       learn_noise=self.learn_noise, y_shift=shift, y_scale=scale)

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "kernel": self.kernel.to_dict(),
            "log_noise_variance": float(np.log(self.noise_variance)) if self.noise_variance > 0 else None,
            "noise_variance": self.noise_variance,
            "learn_noise": self.learn_noise,
            "normalize": self.normalize,
            "y_shift": self.y_shift,
            "y_scale": self.y_scale,
            "X": self.X.tolist(),
            "y": self.y_raw.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GpModel":
        return cls(kernel_from_dict(doc["kernel"]), float(doc["noise_variance"]),
                   np.asarray(doc["X"], dtype=float), np.asarray(doc["y"], dtype=float),
                   normalize=bool(doc["normalize"]), learn_noise=bool(doc["learn_noise"]),
                   y_shift=float(doc["y_shift"]), y_scale=float(doc["y_scale"]))


def normalization(y) -> tuple[float, float]:
    y = np.asarray(y, dtype=float)
    shift = float(np.mean(y))
    scale = float(np.std(y))
    if not np.isfinite(scale) or scale < 1e-12 * max(1.0, abs(shift)):
        scale = 1.0
    return shift, scale


def param_bounds(kernel: Kernel, learn_noise: bool):
    bounds = []
    for name in kernel.param_names:
        lo, hi = VARIANCE_BOUNDS if name.endswith("log_variance") else LENGTHSCALE_BOUNDS
        bounds.append((np.log(lo), np.log(hi)))
    if learn_noise:
        bounds.append((np.log(NOISE_BOUNDS[0]), np.log(NOISE_BOUNDS[1])))
    return bounds


def random_init(kernel: Kernel, learn_noise: bool, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.log(INIT_BOX[0]), np.log(INIT_BOX[1])
    theta = rng.uniform(lo, hi, size=kernel.n_params)
    if learn_noise:
        theta = np.append(theta, rng.uniform(np.log(NOISE_INIT_BOX[0]), np.log(NOISE_INIT_BOX[1])))
    return theta


def maximize(objective, inits, bounds):
    """Run L-BFGS-B on ``-objective`` from each start; return the best point.

    ``objective(theta) -> (value, grad)`` may raise ConditioningError.  The
    starting values themselves are candidates, so the result is never worse
    than any start.
    """
    best_theta, best_val = None, -np.inf
    failures = []

    def neg(theta):
        try:
            v, g = objective(theta)
        except ConditioningError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(v):
            return 1e25, np.zeros_like(theta)
        return -v, -g

    for theta0 in inits:
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            v0, _ = objective(theta0)
            if np.isfinite(v0) and v0 > best_val:
                best_theta, best_val = theta0.copy(), v0
        except ConditioningError as exc:
            failures.append(str(exc))
        res = optimize.minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=bounds)
        val = -res.fun
        if res.fun >= 1e25 or not np.isfinite(val):
            failures.append(res.message if isinstance(res.message, str) else str(res.message))
            continue
        if val > best_val:
            best_theta, best_val = res.x.copy(), val
    return best_theta, best_val, failures


def fit(X, y, spec: Kernel, restarts: int = 10, rng: np.random.Generator | None = None, *,
        learn_noise: bool = True, noise_variance: float = 0.0, normalize: bool = True,
        init: np.ndarray | None = None) -> GpModel:
    """Type-II maximum likelihood fit from ``restarts`` random starts.

    ``init`` (log-parameters, noise last when learned) is used as an extra,
    first start for warm refits.  With ``learn_noise=False`` the noise is
    held at ``noise_variance`` (zero for interpolation of noise-free data).
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    X = _as_2d(X)
    y_raw = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y_raw.size or X.shape[0] == 0:
        raise ShapeError("X and y must be nonempty and the same length")
    shift, scale = normalization(y_raw) if normalize else (0.0, 1.0)
    yn = (y_raw - shift) / scale
    fixed_noise = float(noise_variance)

    def objective(theta):
        k = spec.with_params(theta[:spec.n_params])
        nv = float(np.exp(theta[-1])) if learn_noise else fixed_noise
        return log_marginal_likelihood(k, nv, X, yn, learn_noise=learn_noise)

    bounds = param_bounds(spec, learn_noise)
    inits = [random_init(spec, learn_noise, rng) for _ in range(restarts)]
    if init is not None:
        inits = [np.asarray(init, dtype=float)] + inits[:max(restarts - 1, 0)]
    theta, best, failures = maximize(objective, inits, bounds)
    if theta is None:
        raise FitError(f"all {len(inits)} restarts failed", {"failures": failures})
    log.debug("gp fit: lml=%.6g after %d starts (%d failures)", best, len(inits), len(failures))
    kernel = spec.with_params(theta[:spec.n_params])
    nv = float(np.exp(theta[-1])) if learn_noise else fixed_noise
    return GpModel(kernel, nv, X, y_raw, normalize=normalize, learn_noise=learn_noise,
                   y_shift=shift, y_scale=scale)


def predict(model: GpModel, Xq, want_cov: bool = False) -> GaussianPrediction:
    return model.predict(Xq, want_cov=want_cov)


def sample_posterior(model: GpModel, Xq, count: int, rng: np.random.Generator) -> np.ndarray:
    return model.sample_posterior(Xq, count, rng)
