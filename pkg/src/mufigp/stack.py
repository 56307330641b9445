"""Non-linear autoregressive GP stacks: NARGP, GPDF and GPDFC for L >= 2 levels.

Level 1 is an exact GP on the inputs.  Each higher level ``l`` is an exact GP
on augmented inputs ``[x, f_{l-1}(x), f_{l-1}(x + tau e_1), ..., f_{l-1}(x + tau e_d)]``
(the delay block only for GPDF/GPDFC), where ``f_{l-1}`` enters in the
standardized units of level ``l-1``.  Training uses the exact lower-level
values available on nested designs; delayed lower-level values come from the
dataset or from a lower-fidelity oracle.

Prediction never calls an oracle.  Every lower-level value, delayed or not, is
drawn from the previous layer's posterior.  Because delayed values at level
``l`` need level ``l-1`` at shifted points, which in turn need level ``l-2`` at
doubly shifted points, each query carries a small block of points per level;
points in one block are sampled jointly so differences such as
``f(x + tau) - f(x)`` keep their correlation.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import gp
from .dataset_io import FidelityDataset, dataset_from_dict, dataset_to_dict
from .exceptions import ConfigurationError, ShapeError, StateError
from .gp import GaussianPrediction, GpModel
from .kernels import Kernel, NargpComposite, rbf

log = logging.getLogger(__name__)

METHODS = ("nargp", "gpdf", "gpdfc")
SCHEME_KIND = {"nargp": "nargp", "gpdf": "delay", "gpdfc": "delay_composite"}
DEFAULT_TAU_FRACTION = 0.01
DEFAULT_SAMPLES = 1000
DEFAULT_CUTOFF = 0.02
_CHUNK = 4_000_000  # floats in the cross-covariance of one batched solve


@dataclass(frozen=True)
class AugmentScheme:
    """How a layer's inputs are built from the design and the level below."""

    kind: str  # "nargp" | "delay" | "delay_composite"
    input_dim: int
    tau: tuple[float, ...] = ()
    boundary: str = "clamp"  # or "reflect"
    domain: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("nargp", "delay", "delay_composite"):
            raise ConfigurationError(f"unknown augmentation kind {self.kind!r}")
        if self.boundary not in ("clamp", "reflect"):
            raise ConfigurationError("boundary must be 'clamp' or 'reflect'")
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))
        object.__setattr__(self, "domain", tuple(tuple(map(float, b)) for b in self.domain))
        if self.uses_delay:
            if len(self.tau) != self.input_dim or len(self.domain) != self.input_dim:
                raise ConfigurationError("delay schemes need one tau and one domain interval per dimension")
            for t, (lo, hi) in zip(self.tau, self.domain):
                if not 0 < t < hi - lo:
                    raise ConfigurationError(f"tau={t} must be positive and below the domain width {hi - lo}")

    @classmethod
    def for_method(cls, method, input_dim, domain, tau=None, boundary="clamp"):
        kind = SCHEME_KIND[method]
        domain = np.asarray(domain, dtype=float).reshape(-1, 2)
        if tau is None:
            tau = DEFAULT_TAU_FRACTION * (domain[:, 1] - domain[:, 0])
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (input_dim,))
        if kind == "nargp":
            return cls(kind, input_dim)
        return cls(kind, input_dim, tuple(tau), boundary, tuple(map(tuple, domain)))

    @property
    def uses_delay(self) -> bool:
        return self.kind != "nargp"

    @property
    def width(self) -> int:
        return 2 * self.input_dim + 1 if self.uses_delay else self.input_dim + 1

    @property
    def n_shifts(self) -> int:
        """Lower-level values needed per point (the point itself plus delays)."""
        return self.input_dim + 1 if self.uses_delay else 1

    def delay_points(self, P) -> np.ndarray:
        """``(..., d) -> (..., d, d)``: row ``i`` is ``P + tau e_i`` mapped into the domain."""
        P = np.asarray(P, dtype=float)
        d = self.input_dim
        out = np.repeat(P[..., None, :], d, axis=-2)
        for i in range(d):
            lo, hi = self.domain[i]
            v = out[..., i, i] + self.tau[i]
            if self.boundary == "clamp":
                v = np.clip(v, lo, hi)
            else:
                v = np.where(v > hi, 2 * hi - v, v)
                v = np.clip(v, lo, hi)
            out[..., i, i] = v
        return out

    def shift_points(self, P) -> np.ndarray:
        """``(..., d) -> (..., n_shifts, d)``: the point followed by its delays."""
        P = np.asarray(P, dtype=float)
        if not self.uses_delay:
            return P[..., None, :]
        return np.concatenate([P[..., None, :], self.delay_points(P)], axis=-2)

    def to_dict(self):
        return {"kind": self.kind, "input_dim": self.input_dim, "tau": list(self.tau),
                "boundary": self.boundary, "domain": [list(b) for b in self.domain]}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["kind"], int(doc["input_dim"]), tuple(doc["tau"]), doc["boundary"],
                   tuple(tuple(b) for b in doc["domain"]))


def augment_inputs(X, lf_values, lf_delay_values, scheme: AugmentScheme) -> np.ndarray:
    """Column layout ``[x_1..x_d, f(x), f(x + tau_1)..f(x + tau_d)]``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if d != scheme.input_dim:
        raise ShapeError(f"scheme built for {scheme.input_dim} inputs, got {d}")
    f = np.asarray(lf_values, dtype=float).reshape(-1)
    if f.size != n:
        raise ShapeError("one low-fidelity value per input row expected")
    cols = [X, f[:, None]]
    if scheme.uses_delay:
        if lf_delay_values is None:
            raise ShapeError("delay scheme needs delayed low-fidelity values")
        D = np.asarray(lf_delay_values, dtype=float).reshape(n, -1)
        if D.shape[1] != d:
            raise ShapeError(f"expected {d} delay columns, got {D.shape[1]}")
        cols.append(D)
    elif lf_delay_values is not None:
        raise ShapeError("NARGP scheme takes no delay values")
    return np.hstack(cols)


def method_kernel(method: str, input_dim: int) -> Kernel:
    d = input_dim
    xdims = range(d)
    if method == "nargp":
        return NargpComposite(rbf(xdims), rbf([d]), rbf(xdims))
    if method == "gpdf":
        return rbf(range(2 * d + 1))
    if method == "gpdfc":
        return NargpComposite(rbf(xdims), rbf(range(d, 2 * d + 1)), rbf(xdims))
    raise ConfigurationError(f"unknown stack method {method!r}; choose from {METHODS}")


@dataclass(frozen=True)
class StackLayer:
    scheme: AugmentScheme
    gp: GpModel
    in_shift: float  # standardization of the lower level's outputs
    in_scale: float

    def to_dict(self):
        return {"scheme": self.scheme.to_dict(), "gp": self.gp.to_dict(),
                "in_shift": self.in_shift, "in_scale": self.in_scale}

    @classmethod
    def from_dict(cls, doc):
        return cls(AugmentScheme.from_dict(doc["scheme"]), GpModel.from_dict(doc["gp"]),
                   float(doc["in_shift"]), float(doc["in_scale"]))


def _sqrtm_psd(C):
    """Batched symmetric square root factor ``A`` with ``A A^T = C`` (PSD part)."""
    if C.shape[-1] == 1:
        return np.sqrt(np.maximum(C, 0.0))
    w, U = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
    return U * np.sqrt(np.maximum(w, 0.0))[..., None, :]


class NonlinearStack:
    """Fitted NARGP/GPDF/GPDFC hierarchy."""

    kind = "stack"

    def __init__(self, method: str, dataset: FidelityDataset, base: GpModel, layers,
                 variance_cutoff: float = DEFAULT_CUTOFF):
        if method not in METHODS:
            raise ConfigurationError(f"unknown stack method {method!r}")
        self.method = method
        self.dataset = dataset
        self.base = base
        self.layers = list(layers)
        self.variance_cutoff = float(variance_cutoff)
        for l, layer in enumerate(self.layers, start=2):
            if layer.gp.input_dim != layer.scheme.width:
                raise ShapeError(f"level {l}: GP width {layer.gp.input_dim} != scheme width {layer.scheme.width}")

    @property
    def n_levels(self) -> int:
        return 1 + len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    def _gp(self, level):  # 0-based
        return self.base if level == 0 else self.layers[level - 1].gp

    # -- propagation -------------------------------------------------------
    def _blocks(self, Xq, top):
        blocks = [None] * (top + 1)
        blocks[top] = Xq[:, None, :]
        for l in range(top, 0, -1):
            P = blocks[l]
            Q = self.layers[l - 1].scheme.shift_points(P)
            blocks[l - 1] = Q.reshape(P.shape[0], -1, P.shape[-1])
        return blocks

    def _inputs(self, l, P, vals):
        """Augmented inputs for layer ``l`` (0-based, >= 1).

        ``P`` is (m, b, d); ``vals`` (S, m, b * t) raw lower-level values.
        """
        layer = self.layers[l - 1]
        S, m = vals.shape[:2]
        b, d = P.shape[1], P.shape[2]
        t = layer.scheme.n_shifts
        f = (vals.reshape(S, m, b, t) - layer.in_shift) / layer.in_scale
        Pb = np.broadcast_to(P, (S, m, b, d))
        return np.concatenate([Pb, f], axis=-1)

    def _propagate(self, Xq, top, noise=None):
        """Walk the levels up to ``top`` (0-based).

        With ``noise`` (list of standard-normal arrays, one per level) the
        lower levels are sampled; without it they are replaced by their
        posterior means.  Returns per-sample top-level mean and variance in
        raw units, each (S, m), plus the largest intermediate posterior std
        (standardized units).
        """
        m = Xq.shape[0]
        blocks = self._blocks(Xq, top)
        S = 1 if noise is None else noise[0].shape[0]
        max_std = 0.0
        vals = None
        for l in range(top + 1):
            model = self._gp(l)
            P = blocks[l]
            A = P[None] if l == 0 else self._inputs(l, P, vals)  # (S|1, m, b, w)
            b = P.shape[1]
            per = max(1, _CHUNK // (A.shape[0] * b * model.n_train))
            means, covs = [], []
            for j in range(0, m, per):
                mu, C = model.latent_blocks(A[:, j:j + per])
                means.append(mu)
                covs.append(C)
            mu = np.concatenate(means, axis=1)
            C = np.concatenate(covs, axis=1)
            if l == top:
                var = np.maximum(np.diagonal(C, axis1=-2, axis2=-1)[..., 0], 0.0)
                mean = mu[..., 0] * model.y_scale + model.y_shift
                if mean.shape[0] != S:
                    mean = np.broadcast_to(mean, (S, m))
                    var = np.broadcast_to(var, (S, m))
                return mean, var * model.y_scale ** 2, max_std
            if noise is None:
                std = np.sqrt(np.maximum(np.diagonal(C, axis1=-2, axis2=-1), 0.0))
                max_std = max(max_std, float(std.max()))
                draw = mu
            else:
                z = noise[l]
                draw = mu + np.einsum("...ij,...j->...i", _sqrtm_psd(C), z)
            if draw.shape[0] != S:
                draw = np.broadcast_to(draw, (S,) + draw.shape[1:])
            vals = draw * model.y_scale + model.y_shift

    def _level(self, level):
        level = self.n_levels if level is None else int(level)
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level must be in 1..{self.n_levels}")
        return level - 1

    def predict_mc(self, Xq, level=None, samples: int = DEFAULT_SAMPLES,
                   rng: np.random.Generator | None = None, common: bool = False) -> GaussianPrediction:
        """Monte Carlo marginalization over the lower levels.

        With ``common`` every query reuses the same standard-normal draws, so
        the estimate is a smooth function of the query location (useful when
        it is being maximized).
        """
        top = self._level(level)
        Xq = self.base._check(Xq)
        if top == 0:
            return self.base.predict(Xq)
        if samples < 2:
            raise ValueError("need at least 2 samples")
        rng = np.random.default_rng() if rng is None else rng
        blocks = self._blocks(Xq, top)
        if common:
            noise = [np.broadcast_to(rng.standard_normal((samples, 1, blocks[l].shape[1])),
                                     (samples,) + blocks[l].shape[:2]) for l in range(top)]
        else:
            noise = [rng.standard_normal((samples,) + blocks[l].shape[:2]) for l in range(top)]
        mean_s, var_s, _ = self._propagate(Xq, top, noise)
        mean = mean_s.mean(axis=0)
        var = var_s.mean(axis=0) + mean_s.var(axis=0)
        return GaussianPrediction(mean, var)

    def predict_mean(self, Xq, level=None) -> GaussianPrediction:
        """Feed every layer the posterior mean of the layer below.

        Valid when the intermediate posterior std stays below
        ``variance_cutoff``; otherwise a warning is issued and the result is
        flagged approximate.
        """
        top = self._level(level)
        Xq = self.base._check(Xq)
        if top == 0:
            return self.base.predict(Xq)
        mean, var, max_std = self._propagate(Xq, top)
        approximate = max_std > self.variance_cutoff
        if approximate:
            warnings.warn(
                f"intermediate posterior std {max_std:.3g} exceeds cutoff "
                f"{self.variance_cutoff:g}; mean propagation is approximate", RuntimeWarning,
                stacklevel=2)
        return GaussianPrediction(mean[0], var[0], approximate=approximate)

    def predict(self, Xq, level=None, samples: int | None = None, rng=None,
                mode: str = "mc", **_ignored) -> GaussianPrediction:
        if mode == "mean":
            return self.predict_mean(Xq, level)
        return self.predict_mc(Xq, level, samples or DEFAULT_SAMPLES, rng)

    def with_data(self, data: FidelityDataset, lf_oracle=None) -> "NonlinearStack":
        """Condition on a new dataset keeping hyperparameters and scalings."""
        nesting = [data.nesting_map(l) for l in range(1, data.n_levels)]
        base = self.base.with_data(data.levels[0].X, data.levels[0].y, keep_scaling=True)
        layers = []
        for l, layer in enumerate(self.layers, start=1):
            A = _layer_inputs(data, l, layer.scheme, layer.in_shift, layer.in_scale,
                              nesting[l - 1], lf_oracle)
            model = layer.gp.with_data(A, data.levels[l].y, keep_scaling=True)
            layers.append(StackLayer(layer.scheme, model, layer.in_shift, layer.in_scale))
        return NonlinearStack(self.method, data, base, layers, self.variance_cutoff)

    @property
    def tau(self):
        for layer in self.layers:
            if layer.scheme.uses_delay:
                return layer.scheme.tau
        return None

    @property
    def boundary(self) -> str:
        return self.layers[0].scheme.boundary if self.tau is not None else "clamp"

    # -- persistence / warm start -------------------------------------------
    def params_for_warm_start(self):
        return [self.base.params] + [layer.gp.params for layer in self.layers]

    def to_dict(self):
        return {
            "kind": self.kind,
            "method": self.method,
            "dataset": dataset_to_dict(self.dataset),
            "base": self.base.to_dict(),
            "layers": [layer.to_dict() for layer in self.layers],
            "variance_cutoff": self.variance_cutoff,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["method"], dataset_from_dict(doc["dataset"]), GpModel.from_dict(doc["base"]),
                   [StackLayer.from_dict(d) for d in doc["layers"]], doc["variance_cutoff"])


def _oracle_for(lf_oracle, lower, n_levels):
    if lf_oracle is None:
        return None
    if callable(lf_oracle):
        if n_levels != 2:
            raise ConfigurationError("pass one oracle per level for more than two levels")
        return lf_oracle
    try:
        return lf_oracle[lower]
    except (IndexError, KeyError, TypeError):
        return None


def delay_values(data: FidelityDataset, level: int, scheme: AugmentScheme, lf_oracle=None):
    """Raw lower-level values at the delay points of ``level`` (0-based)."""
    lev = data.levels[level]
    if lev.delay is not None:
        if data.tau is not None and not np.allclose(data.tau, scheme.tau):
            raise ConfigurationError(
                f"dataset delay values use tau={data.tau}, scheme uses {scheme.tau}")
        return lev.delay
    oracle = _oracle_for(lf_oracle, level - 1, data.n_levels)
    if oracle is None:
        raise ConfigurationError(
            f"level {level + 1} needs delayed level-{level} values: supply them in the "
            "dataset or pass a low-fidelity oracle")
    pts = scheme.delay_points(lev.X)  # (n, d, d)
    n, d = lev.X.shape
    vals = np.asarray(oracle(pts.reshape(n * d, d)), dtype=float).reshape(n, d)
    return vals


def _layer_inputs(data, l, scheme, shift, scale, rows, lf_oracle):
    """Training inputs of layer ``l`` from exact nested lower-level values."""
    f = (data.levels[l - 1].y[rows] - shift) / scale
    delayed = None
    if scheme.uses_delay:
        delayed = (delay_values(data, l, scheme, lf_oracle) - shift) / scale
    return augment_inputs(data.levels[l].X, f, delayed, scheme)


def fit_stack(data: FidelityDataset, method: str = "nargp", lf_oracle=None, restarts: int = 10,
              rng: np.random.Generator | None = None, *, tau=None, boundary: str = "clamp",
              learn_noise: bool = True, noise_variance: float = 0.0,
              variance_cutoff: float = DEFAULT_CUTOFF, kernels=None, init=None) -> NonlinearStack:
    """Fit the stacked surrogate level by level on nested designs.

    ``lf_oracle`` is a callable (two levels) or a sequence indexed by the
    0-based level it evaluates; it is only needed for GPDF/GPDFC when the
    dataset carries no delay values.  ``kernels`` optionally overrides the
    per-layer kernels (list for levels 2..L).
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown stack method {method!r}; choose from {METHODS}")
    if data.n_levels < 2:
        raise ConfigurationError("a stack needs at least two levels")
    rng = np.random.default_rng() if rng is None else rng
    nesting = [data.nesting_map(l) for l in range(1, data.n_levels)]
    d = data.dim
    if tau is None and data.tau is not None:
        tau = data.tau
    init = init or [None] * data.n_levels
    fit_kw = dict(learn_noise=learn_noise, noise_variance=noise_variance)

    base = gp.fit(data.levels[0].X, data.levels[0].y, rbf(range(d)), restarts, rng,
                  init=init[0], **fit_kw)
    layers = []
    prev = base
    for l in range(1, data.n_levels):
        scheme = AugmentScheme.for_method(method, d, data.box, tau, boundary)
        shift, scale = prev.y_shift, prev.y_scale
        A = _layer_inputs(data, l, scheme, shift, scale, nesting[l - 1], lf_oracle)
        spec = kernels[l - 1] if kernels is not None else method_kernel(method, d)
        model = gp.fit(A, data.levels[l].y, spec, restarts, rng, init=init[l], **fit_kw)
        layers.append(StackLayer(scheme, model, shift, scale))
        prev = model
    return NonlinearStack(method, data, base, layers, variance_cutoff)


def predict_stack_mc(stack: NonlinearStack, Xq, samples: int = DEFAULT_SAMPLES, rng=None, level=None):
    return stack.predict_mc(Xq, level, samples, rng)


def predict_stack_mean(stack: NonlinearStack, Xq, level=None):
    return stack.predict_mean(Xq, level)
