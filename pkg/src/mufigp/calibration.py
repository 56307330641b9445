"""Post-hoc recalibration of Gaussian predictions and calibration metrics.

Three recalibration families are available.

* ``isotonic``: a monotone remap of probability levels fitted to the
  empirical distribution of PIT values (quantile calibration).
* ``normal``: a single multiplicative variance scale.
* ``beta``: the three-parameter beta-calibration warp of PIT values,
  ``logit w(p) = c + a log p - b log(1 - p)`` (distribution calibration).

Warped predictions are represented by their quantile function
``Q(q) = mu + sigma * Phi^-1(w^-1(q))``.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats
from sklearn.isotonic import IsotonicRegression

from .exceptions import DegeneratePredictionError, ShapeError
from .gp import GaussianPrediction

__all__ = [
    "CalibrationMap", "QuantilePrediction", "CalibratedModel", "pit_values",
    "fit_isotonic", "fit_variance_scale", "fit_beta", "fit_map", "apply",
    "metrics", "metrics_csv", "split_calibration", "calibrate_model",
    "PINBALL_LEVELS", "CALIBRATION_METHODS",
]

log = logging.getLogger(__name__)

PINBALL_LEVELS = np.round(np.arange(1, 20) * 0.05, 10)
CALIBRATION_METHODS = ("isotonic", "normal", "beta")
ENCE_BINS = 10
DENSITY_STEP = 1e-4
MIN_PAIRS = 10
_QUAD = 512  # midpoint nodes for moments of a quantile function
_BETA_RESTARTS = 10
_EPS = 1e-12


def _as_pair(preds, truths):
    mu = np.asarray(preds.mean, dtype=float).ravel()
    sd = np.sqrt(np.asarray(preds.variance, dtype=float).ravel())
    y = np.asarray(truths, dtype=float).ravel()
    if mu.shape != y.shape:
        raise ShapeError(f"{mu.size} predictions but {y.size} truths")
    return mu, sd, y


def _checked(preds, truths):
    mu, sd, y = _as_pair(preds, truths)
    if y.size < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} calibration pairs, got {y.size}")
    if np.any(~(sd > 0)):
        raise DegeneratePredictionError(
            f"{int(np.sum(~(sd > 0)))} predictions have zero standard deviation")
    return mu, sd, y


def pit_values(preds, truths) -> np.ndarray:
    """Probability integral transform ``Phi((y - mu) / sigma)``."""
    mu, sd, y = _as_pair(preds, truths)
    if np.any(~(sd > 0)):
        raise DegeneratePredictionError("zero standard deviation in predictions")
    return special.ndtr((y - mu) / sd)


# --------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class CalibrationMap:
    """Fitted recalibration map.

    ``kind`` is one of ``identity``, ``isotonic``, ``variance_scale`` or
    ``beta``.  Only the fields belonging to ``kind`` are meaningful.
    """

    kind: str = "identity"
    breakpoints: np.ndarray | None = None
    values: np.ndarray | None = None
    s: float = 1.0
    a: float = 1.0
    b: float = 1.0
    c: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("identity", "isotonic", "variance_scale", "beta"):
            raise ValueError(f"unknown calibration map kind {self.kind!r}")
        if self.kind == "variance_scale" and not self.s > 0:
            raise ValueError("variance scale must be positive")
        if self.kind == "beta" and not (self.a > 0 and self.b > 0):
            raise ValueError("beta warp needs a, b > 0")
        if self.kind == "isotonic":
            bp = np.asarray(self.breakpoints, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if bp.ndim != 1 or bp.shape != v.shape or bp.size < 2:
                raise ShapeError("isotonic breakpoints and values must be equal-length vectors")
            if np.any(np.diff(bp) < 0) or np.any(np.diff(v) < 0):
                raise ValueError("isotonic map must be nondecreasing")
            if bp[0] != 0 or bp[-1] != 1 or v[0] != 0 or v[-1] != 1:
                raise ValueError("isotonic map endpoints must be pinned at 0 and 1")
            object.__setattr__(self, "breakpoints", bp)
            object.__setattr__(self, "values", v)

    @property
    def is_warp(self) -> bool:
        """True when the map changes the shape of the distribution."""
        return self.kind in ("isotonic", "beta")

    def warp(self, p) -> np.ndarray:
        """Map nominal PIT levels to calibrated probabilities."""
        p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
        if self.kind == "isotonic":
            return np.interp(p, self.breakpoints, self.values)
        if self.kind == "beta":
            with np.errstate(divide="ignore"):
                z = self.c + self.a * np.log(p) - self.b * np.log1p(-p)
            return special.expit(z)
        return p

    def inverse(self, q) -> np.ndarray:
        """Generalized inverse ``inf {p : warp(p) >= q}``."""
        q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
        if self.kind == "isotonic":
            bp, v = self.breakpoints, self.values
            i = np.clip(np.searchsorted(v, q, side="left"), 1, v.size - 1)
            v0, v1 = v[i - 1], v[i]
            t = np.where(v1 > v0, (q - v0) / np.where(v1 > v0, v1 - v0, 1.0), 1.0)
            out = bp[i - 1] + np.clip(t, 0.0, 1.0) * (bp[i] - bp[i - 1])
            return np.where(q <= v[0], bp[0], out)
        if self.kind == "beta":
            return _beta_inverse(q, self.a, self.b, self.c)
        return q

    def derivative(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self.kind == "beta":
            w = self.warp(p)
            return w * (1 - w) * (self.a / p + self.b / (1 - p))
        if self.kind == "isotonic":
            bp, v = self.breakpoints, self.values
            i = np.clip(np.searchsorted(bp, p, side="right"), 1, bp.size - 1)
            return (v[i] - v[i - 1]) / np.maximum(bp[i] - bp[i - 1], _EPS)
        return np.ones_like(p)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind}
        if self.kind == "isotonic":
            doc["breakpoints"] = self.breakpoints.tolist()
            doc["values"] = self.values.tolist()
        elif self.kind == "variance_scale":
            doc["s"] = float(self.s)
        elif self.kind == "beta":
            doc.update(a=float(self.a), b=float(self.b), c=float(self.c))
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationMap":
        kind = doc["kind"]
        if kind == "isotonic":
            return cls(kind, np.asarray(doc["breakpoints"], float), np.asarray(doc["values"], float))
        if kind == "variance_scale":
            return cls(kind, s=float(doc["s"]))
        if kind == "beta":
            return cls(kind, a=float(doc["a"]), b=float(doc["b"]), c=float(doc["c"]))
        return cls(kind)


def _beta_inverse(q, a, b, c, iters=200):
    # bisection in p; the warp is strictly increasing on (0, 1)
    target = special.logit(np.clip(q, _EPS, 1 - _EPS))
    lo = np.zeros_like(q)
    hi = np.ones_like(q)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = c + a * np.log(mid) - b * np.log1p(-mid)
        up = val < target
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.max(hi - lo) < 1e-15:
            break
    out = 0.5 * (lo + hi)
    return np.where(q <= 0, 0.0, np.where(q >= 1, 1.0, out))


# --------------------------------------------------------------------------
# fitting


def fit_isotonic(preds, truths) -> CalibrationMap:
    """Isotonic map from nominal to empirical quantile levels.

    Parameters
    ----------
    preds : GaussianPrediction
        Predictions on the calibration set.
    truths : array_like
        Observed values, one per prediction.

    Returns
    -------
    CalibrationMap
        Kind ``isotonic``; nondecreasing with endpoints pinned at 0 and 1.
    """
    _checked(preds, truths)
    p = np.sort(pit_values(preds, truths))
    n = p.size
    emp = np.arange(1, n + 1) / n
    iso = IsotonicRegression(y_min=0.0, y_max=1.0, increasing=True, out_of_bounds="clip")
    fitted = iso.fit_transform(p, emp)
    bp = np.concatenate([[0.0], p, [1.0]])
    v = np.concatenate([[0.0], fitted, [1.0]])
    # ties in p produce duplicate breakpoints; keep the last value of each run
    keep = np.append(bp[1:] != bp[:-1], True)
    bp, v = bp[keep], np.maximum.accumulate(v[keep])
    if bp[0] != 0.0:
        bp, v = np.concatenate([[0.0], bp]), np.concatenate([[0.0], v])
    v[0], v[-1] = 0.0, 1.0
    return CalibrationMap("isotonic", bp, np.clip(v, 0.0, 1.0))


def fit_variance_scale(preds, truths) -> CalibrationMap:
    """Closed-form NLL-optimal variance scale ``s = mean((y - mu)^2 / sigma^2)``."""
    mu, sd, y = _checked(preds, truths)
    s = float(np.mean(((y - mu) / sd) ** 2))
    if not s > 0:
        # every residual is exactly zero; any shrinkage is optimal, keep it finite
        s = _EPS
    return CalibrationMap("variance_scale", s=s)


def _beta_nll(theta, lp, l1p):
    la, lb, c = theta
    a, b = np.exp(la), np.exp(lb)
    z = c + a * lp - b * l1p
    # log w' = log w + log(1 - w) + log(a / p + b / (1 - p))
    lw = -np.logaddexp(0.0, -z)
    l1w = -np.logaddexp(0.0, z)
    ra = a * np.exp(-lp)
    rb = b * np.exp(-l1p)
    nll = -np.mean(lw + l1w + np.log(ra + rb))
    w = np.exp(lw)
    dz = 1 - 2 * w
    tot = ra + rb
    g_la = -np.mean(dz * a * lp + ra / tot)
    g_lb = -np.mean(-dz * b * l1p + rb / tot)
    g_c = -np.mean(dz)
    return nll, np.array([g_la, g_lb, g_c])


def fit_beta(preds, truths, rng=None, restarts: int = _BETA_RESTARTS) -> CalibrationMap:
    """Maximum-likelihood beta-calibration warp of the PIT values.

    The density of the PIT values under the warp is ``w'(p)``; its
    log-likelihood is maximized over ``(log a, log b, c)`` with L-BFGS from
    the identity and ``restarts - 1`` random starts.  When every start fails
    the identity map is returned and a warning is issued.
    """
    _checked(preds, truths)
    rng = np.random.default_rng(0) if rng is None else rng
    p = np.clip(pit_values(preds, truths), 1e-10, 1 - 1e-10)
    lp, l1p = np.log(p), np.log1p(-p)
    starts = [np.zeros(3)] + [rng.normal(0.0, [0.5, 0.5, 1.0]) for _ in range(restarts - 1)]
    best = None
    for x0 in starts:
        try:
            res = optimize.minimize(_beta_nll, x0, args=(lp, l1p), jac=True, method="L-BFGS-B",
                                    bounds=[(-6, 6), (-6, 6), (-20, 20)])
        except (ValueError, FloatingPointError, ArithmeticError):
            continue
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        warnings.warn("beta calibration failed on every restart; using the identity map",
                      RuntimeWarning, stacklevel=2)
        return CalibrationMap("identity", diagnostics={"fallback": True})
    a, b = np.exp(best.x[:2])
    return CalibrationMap("beta", a=float(a), b=float(b), c=float(best.x[2]),
                          diagnostics={"nll": float(best.fun)})


def fit_map(method: str, preds, truths, rng=None) -> CalibrationMap:
    """Dispatch on ``isotonic``, ``normal`` or ``beta``."""
    if method == "isotonic":
        return fit_isotonic(preds, truths)
    if method == "normal":
        return fit_variance_scale(preds, truths)
    if method == "beta":
        return fit_beta(preds, truths, rng=rng)
    raise ValueError(f"unknown calibration method {method!r}; choose from {list(CALIBRATION_METHODS)}")


# --------------------------------------------------------------------------
# calibrated predictive distributions


@dataclass(frozen=True)
class QuantilePrediction:
    """Pointwise predictive distribution given by a warped Gaussian quantile function."""

    loc: np.ndarray
    scale: np.ndarray
    map: CalibrationMap

    def __len__(self):
        return len(self.loc)

    def quantile(self, q) -> np.ndarray:
        """Quantiles at level(s) ``q``; a vector of levels gives shape (len(q), n)."""
        q = np.asarray(q, dtype=float)
        u = self.map.inverse(q)
        z = special.ndtri(np.clip(u, 0.0, 1.0))
        if q.ndim == 0:
            return self.loc + self.scale * z
        return self.loc[None, :] + self.scale[None, :] * z[:, None]

    def interval(self, coverage: float = 0.95):
        lo = 0.5 * (1 - coverage)
        return self.quantile(lo), self.quantile(1 - lo)

    def cdf(self, y) -> np.ndarray:
        return self.map.warp(special.ndtr((np.asarray(y, float) - self.loc) / self.scale))

    def density(self, y, step: float = DENSITY_STEP) -> np.ndarray:
        """Density as the reciprocal of a central difference of the quantile function."""
        p = np.clip(self.cdf(y), step, 1 - step)
        u_hi = self.map.inverse(p + step)
        u_lo = self.map.inverse(p - step)
        dq = self.scale * (special.ndtri(np.clip(u_hi, _EPS, 1 - _EPS))
                           - special.ndtri(np.clip(u_lo, _EPS, 1 - _EPS)))
        return 2 * step / np.maximum(dq, _EPS)

    def _nodes(self):
        u = (np.arange(_QUAD) + 0.5) / _QUAD
        return self.quantile(u)

    @property
    def mean(self) -> np.ndarray:
        return self._nodes().mean(axis=0)

    @property
    def variance(self) -> np.ndarray:
        return self._nodes().var(axis=0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def apply(cmap: CalibrationMap, pred: GaussianPrediction):
    """Calibrated predictive distribution.

    Identity returns ``pred`` unchanged; a variance scale returns a Gaussian
    with variance ``s * sigma^2``; warps return a :class:`QuantilePrediction`.
    """
    if cmap.kind == "identity":
        return pred
    if cmap.kind == "variance_scale":
        return GaussianPrediction(np.asarray(pred.mean, float), cmap.s * np.asarray(pred.variance, float),
                                  approximate=getattr(pred, "approximate", False))
    return QuantilePrediction(np.asarray(pred.mean, float).ravel(),
                              np.sqrt(np.asarray(pred.variance, float).ravel()), cmap)


# --------------------------------------------------------------------------
# metrics


def _quantiles(pred, q):
    q = np.asarray(q, float)
    if isinstance(pred, QuantilePrediction):
        return pred.quantile(q)
    mu = np.asarray(pred.mean, float).ravel()
    sd = np.sqrt(np.asarray(pred.variance, float).ravel())
    z = special.ndtri(q)
    return mu[None, :] + sd[None, :] * z[:, None] if q.ndim else mu + sd * z


def pinball_loss(pred, truths, levels=PINBALL_LEVELS) -> float:
    y = np.asarray(truths, float).ravel()
    levels = np.atleast_1d(np.asarray(levels, float))
    Q = _quantiles(pred, levels)
    diff = y[None, :] - Q
    loss = np.maximum(levels[:, None] * diff, (levels[:, None] - 1) * diff)
    return float(loss.mean())


def nll(pred, truths) -> float:
    y = np.asarray(truths, float).ravel()
    if isinstance(pred, QuantilePrediction):
        dens = pred.density(y)
        return float(-np.mean(np.log(np.maximum(dens, 1e-300))))
    mu = np.asarray(pred.mean, float).ravel()
    var = np.asarray(pred.variance, float).ravel()
    return float(np.mean(0.5 * np.log(2 * np.pi * var) + 0.5 * (y - mu) ** 2 / var))


def ence(pred, truths, bins: int = ENCE_BINS) -> float:
    """Expected normalized calibration error over equal-count variance bins."""
    y = np.asarray(truths, float).ravel()
    mu = np.asarray(pred.mean, float).ravel()
    var = np.asarray(pred.variance, float).ravel()
    order = np.argsort(var, kind="stable")
    errs = []
    for idx in np.array_split(order, min(bins, y.size)):
        rmv = np.sqrt(np.mean(var[idx]))
        rmse = np.sqrt(np.mean((y[idx] - mu[idx]) ** 2))
        errs.append(abs(rmse - rmv) / rmv)
    return float(np.mean(errs))


def mpiw(pred, coverage: float = 0.95) -> float:
    lo = 0.5 * (1 - coverage)
    Q = _quantiles(pred, np.array([lo, 1 - lo]))
    return float(np.mean(Q[1] - Q[0]))


def coverage(pred, truths, level: float = 0.95) -> float:
    """Fraction of truths inside the central ``level`` interval."""
    y = np.asarray(truths, float).ravel()
    lo = 0.5 * (1 - level)
    Q = _quantiles(pred, np.array([lo, 1 - lo]))
    return float(np.mean((y >= Q[0]) & (y <= Q[1])))


def metrics(pred, truths) -> dict:
    """Pinball, NLL, ENCE and MPIW (95%) of a raw or calibrated prediction."""
    return {"pinball": pinball_loss(pred, truths), "nll": nll(pred, truths),
            "ence": ence(pred, truths), "mpiw": mpiw(pred)}


def metrics_csv(rows) -> str:
    """CSV text with one row per ``(method, calibration, metrics_dict)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "calibration", "pinball", "nll", "ence", "mpiw"])
    for method, calib, m in rows:
        w.writerow([method, calib] + [repr(float(m[k])) for k in ("pinball", "nll", "ence", "mpiw")])
    return buf.getvalue()


def split_calibration(n: int, fraction: float = 0.5, rng=None):
    """Random disjoint (calibration, evaluation) index split."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(0) if rng is None else rng
    perm = rng.permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


# --------------------------------------------------------------------------
# model wrapper


class CalibratedModel:
    """A fitted surrogate whose top-level predictions pass through a calibration map."""

    kind = "calibrated"

    def __init__(self, base, cmap: CalibrationMap):
        self.base = base
        self.map = cmap

    @property
    def n_levels(self):
        return getattr(self.base, "n_levels", 1)

    def predict(self, Xq, level=None, **kw):
        if level is not None and level != self.n_levels:
            return self.base.predict(Xq, level=level, **kw)
        return apply(self.map, self.base.predict(Xq, **kw))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base": self.base.to_dict(), "map": self.map.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibratedModel":
        from .dataset_io import FORMAT_VERSION, model_from_dict
        base = model_from_dict({"format_version": FORMAT_VERSION, "model": doc["base"]})
        return cls(base, CalibrationMap.from_dict(doc["map"]))


def calibrate_model(model, X, y, method: str, rng=None, predict_rng=None,
                    **predict_kw) -> CalibratedModel:
    """Fit a calibration map on ``(X, y)`` and wrap ``model`` with it.

    An already calibrated model is recalibrated from its base predictions.
    """
    base = model.base if isinstance(model, CalibratedModel) else model
    pred = base.predict(np.asarray(X, float), rng=predict_rng, **predict_kw)
    cmap = fit_map(method, pred, y, rng=rng)
    log.info("calibration %s fitted: %s", method, cmap.to_dict() if cmap.kind != "isotonic" else "isotonic")
    return CalibratedModel(base, cmap)
