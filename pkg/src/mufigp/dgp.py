"""Multi-fidelity deep GPs built from sparse variational GP layers.

One SVGP layer per fidelity.  Layer 1 sees ``x``; layer ``l`` sees ``x``
augmented with samples of layer ``l-1`` (and, for the delay variants, with
samples at ``x + tau e_i``).  Every level's data enters the bound through the
chain of layers below it, so designs need not be nested.  Training maximizes

    sum_l E_q[log p(y_l | g_l(X_l))] - sum_l KL[q(u_l) || p(u_l | Z_l)]

with the expectation estimated by reparameterized samples through the lower
layers and evaluated in closed form at the last one.  Layers use the plain
(non-whitened) parameterization ``q(u) = N(m, L L^T)`` with ``L`` lower
triangular and a positive diagonal.  All tensor work is in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from scipy.cluster.vq import kmeans2

from . import gp
from .dataset_io import FidelityDataset, dataset_from_dict, dataset_to_dict
from .exceptions import ConditioningError, ConfigurationError, DivergenceError, ShapeError
from .gp import GaussianPrediction, GpModel, normalization
from .kernels import Kernel, gram, gram_diag_theta, gram_theta, kernel_from_dict, rbf
from .stack import AugmentScheme, method_kernel

log = logging.getLogger(__name__)

DT = torch.float64
METHODS = {"nardgp": "nargp", "dgpdf": "gpdf", "dgpdfc": "gpdfc"}
DEFAULT_INDUCING = (25, 8)
NOISE_FLOOR = 1e-8
_REL_JITTER = 1e-6
_CHUNK = 2_000_000


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DT)


@dataclass(frozen=True)
class DgpConfig:
    """Training settings; ``inducing`` gives M per level (the last entry repeats)."""

    inducing: tuple[int, ...] = DEFAULT_INDUCING
    adam_lr: float = 1e-2
    steps: int = 5000
    mc_samples: int = 10
    seed: int | None = None
    exact_base: bool = False
    tau: float | tuple[float, ...] | None = None
    boundary: str = "clamp"
    init_restarts: int = 10
    refit_steps: int = 1000
    max_halvings: int = 3
    train_inducing: bool = True
    variational_init: str = "exact"
    noise_floor: float = NOISE_FLOOR
    init_noise: float = 1e-3
    lr_decay: float = 0.1  # learning rate shrinks geometrically to adam_lr * lr_decay

    def m_for(self, level: int) -> int:
        return int(self.inducing[min(level, len(self.inducing) - 1)])

    def to_dict(self):
        d = asdict(self)
        d["inducing"] = list(self.inducing)
        if isinstance(self.tau, tuple):
            d["tau"] = list(self.tau)
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        doc["inducing"] = tuple(doc["inducing"])
        if isinstance(doc.get("tau"), list):
            doc["tau"] = tuple(doc["tau"])
        return cls(**doc)


@dataclass(frozen=True)
class SvgpLayer:
    """One sparse variational GP layer (standardized output units).

    ``scheme`` is None for the first layer; otherwise it describes how the
    layer's inputs are assembled from ``x`` and the layer below.
    """

    kernel: Kernel
    Z: np.ndarray
    q_mu: np.ndarray
    q_sqrt: np.ndarray
    noise_variance: float
    scheme: AugmentScheme | None = None
    y_shift: float = 0.0
    y_scale: float = 1.0

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        M = Z.shape[0]
        q_mu = np.asarray(self.q_mu, dtype=float).reshape(M)
        q_sqrt = np.tril(np.asarray(self.q_sqrt, dtype=float).reshape(M, M))
        if M < 1:
            raise ConfigurationError("a layer needs at least one inducing point")
        if np.any(np.diag(q_sqrt) <= 0):
            raise ConfigurationError("variational factor needs a positive diagonal")
        width = self.scheme.width if self.scheme is not None else Z.shape[1]
        if Z.shape[1] != width or self.kernel.input_dim > width:
            raise ShapeError(f"inducing inputs have {Z.shape[1]} columns, layer expects {width}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "q_mu", q_mu)
        object.__setattr__(self, "q_sqrt", q_sqrt)

    @property
    def n_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def width(self) -> int:
        return self.Z.shape[1]

    def to_dict(self):
        return {
            "kernel": self.kernel.to_dict(),
            "Z": self.Z.tolist(),
            "q_mu": self.q_mu.tolist(),
            "q_sqrt": self.q_sqrt.tolist(),
            "noise_variance": self.noise_variance,
            "scheme": None if self.scheme is None else self.scheme.to_dict(),
            "y_shift": self.y_shift,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, doc):
        scheme = None if doc["scheme"] is None else AugmentScheme.from_dict(doc["scheme"])
        return cls(kernel_from_dict(doc["kernel"]), np.array(doc["Z"]), np.array(doc["q_mu"]),
                   np.array(doc["q_sqrt"]), float(doc["noise_variance"]), scheme,
                   float(doc["y_shift"]), float(doc["y_scale"]))


# -- tensor view of the trainable parameters -------------------------------------

class _Params:
    """Leaf tensors for every trainable quantity of a stack.

    The variational parameters are held in whitened coordinates,
    ``m = Lz v`` and ``L = Lz Lv`` with ``Lz`` the Cholesky factor of
    ``K(Z, Z)``; the optimizer works on ``v`` and ``Lv`` (log diagonal), which
    keeps its steps well scaled however ill-conditioned ``K(Z, Z)`` is.
    Layers store the unwhitened ``m`` and ``L``.
    """

    def __init__(self, layers, start: int, grad: bool = True, floor: float = NOISE_FLOOR):
        self.start = start
        self.floor = floor
        self.theta, self.Z, self.v, self.v_raw, self.log_noise = [], [], [], [], []
        for layer in layers:
            with torch.no_grad():
                Lz = _chol(gram_theta(layer.kernel, _t(layer.kernel.params), _t(layer.Z), xp=torch))
                v = torch.linalg.solve_triangular(Lz, _t(layer.q_mu)[:, None], upper=False)[:, 0]
                Lv = torch.linalg.solve_triangular(Lz, _t(layer.q_sqrt), upper=False)
            diag = torch.clamp(torch.diagonal(Lv), min=1e-12)
            raw = torch.tril(Lv, -1) + torch.diag(torch.log(diag))
            log_noise = [math.log(max(layer.noise_variance - floor, 1e-12))]
            for store, value in ((self.theta, _t(layer.kernel.params)), (self.Z, _t(layer.Z)),
                                 (self.v, v), (self.v_raw, raw), (self.log_noise, _t(log_noise))):
                store.append(value.clone().requires_grad_(grad))

    def _groups(self):
        return (self.theta, self.Z, self.v, self.v_raw, self.log_noise)

    def tensors(self, trainable=False):
        out = []
        for l in range(self.start, len(self.theta)):
            out += [group[l] for group in self._groups()]
        return [t for t in out if t.requires_grad] if trainable else out

    def white_sqrt(self, l):
        raw = self.v_raw[l]
        return torch.tril(raw, -1) + torch.diag_embed(torch.exp(torch.diagonal(raw)))

    def noise(self, l):
        return self.floor + torch.exp(self.log_noise[l][0])

    def snapshot(self):
        return [[t.detach().clone() for t in group] for group in self._groups()]

    def restore(self, snap):
        with torch.no_grad():
            for group, saved in zip(self._groups(), snap):
                for t, s in zip(group, saved):
                    t.copy_(s)

    def to_layers(self, layers):
        out = []
        for l, layer in enumerate(layers):
            if l < self.start:
                out.append(layer)
                continue
            with torch.no_grad():
                kernel = layer.kernel.with_params(self.theta[l].numpy())
                Lz = _chol(gram_theta(kernel, self.theta[l], self.Z[l], xp=torch))
                q_mu = Lz @ self.v[l]
                q_sqrt = Lz @ self.white_sqrt(l)
            out.append(replace(layer, kernel=kernel, Z=self.Z[l].detach().numpy().copy(),
                               q_mu=q_mu.numpy().copy(), q_sqrt=q_sqrt.numpy().copy(),
                               noise_variance=float(self.noise(l).detach())))
        return out


def _chol(K, what="kernel matrix"):
    M = K.shape[-1]
    jitter = _REL_JITTER * torch.diagonal(K, dim1=-2, dim2=-1).mean().detach()
    eye = torch.eye(M, dtype=DT)
    for factor in (1.0, 10.0, 100.0):
        L, info = torch.linalg.cholesky_ex(K + factor * jitter * eye)
        if not torch.any(info):
            return L
    raise ConditioningError(f"{what} is not positive definite")


def _conditional(kernel, theta, Z, Lz, v, Lv, A):
    """Marginal of ``q(g)`` at blocks ``A`` (..., b, w): mean (..., b), cov (..., b, b).

    ``v`` and ``Lv`` are the whitened variational mean and factor.
    """
    lead, b, w = A.shape[:-2], A.shape[-2], A.shape[-1]
    flat = A.reshape(-1, w)
    Kza = gram_theta(kernel, theta, Z, flat, xp=torch)
    V = torch.linalg.solve_triangular(Lz, Kza, upper=False)
    mean = (v @ V).reshape(lead + (b,))
    W = Lv.T @ V
    if b == 1:
        kdiag = gram_diag_theta(kernel, theta, flat, xp=torch)
        var = kdiag - (V * V).sum(0) + (W * W).sum(0)
        return mean, var.reshape(lead + (1, 1))
    Vb = V.T.reshape(lead + (b, -1))
    Wb = W.T.reshape(lead + (b, -1))
    Kaa = gram_theta(kernel, theta, A, A, xp=torch)
    return mean, Kaa - Vb @ Vb.transpose(-1, -2) + Wb @ Wb.transpose(-1, -2)


def _kl(v, Lv):
    """KL[N(v, Lv Lv^T) || N(0, I)]; equals KL[q(u) || p(u | Z)] in unwhitened form."""
    M = v.shape[0]
    return 0.5 * ((Lv * Lv).sum() + (v * v).sum() - M - 2 * torch.log(torch.abs(torch.diagonal(Lv))).sum())


def _block_sample(mean, cov, z):
    b = cov.shape[-1]
    if b == 1:
        return mean + torch.sqrt(torch.clamp(cov[..., 0], min=1e-12)) * z
    scale = torch.diagonal(cov, dim1=-2, dim2=-1).mean().detach()
    L, _ = torch.linalg.cholesky_ex(cov + (_REL_JITTER * scale + 1e-12) * torch.eye(b, dtype=DT))
    return mean + (L @ z[..., None])[..., 0]


class DeepGpStack:
    """Fitted multi-fidelity deep GP."""

    kind = "dgp"

    def __init__(self, method: str, dataset: FidelityDataset, layers, config: DgpConfig,
                 trace=(), base: GpModel | None = None):
        if method not in METHODS:
            raise ConfigurationError(f"unknown DGP method {method!r}; choose from {sorted(METHODS)}")
        if len(layers) < 1:
            raise ConfigurationError("a deep GP needs at least one layer")
        self.method = method
        self.dataset = dataset
        self.layers = list(layers)
        self.config = config
        self.trace = np.asarray(trace, dtype=float)
        self.base = base  # frozen exact GP replacing layer 1, if configured
        self.diagnostics = {"variance_clamps": 0}
        if not np.all(np.isfinite(self.trace)):
            raise DivergenceError("ELBO trace contains non-finite values")

    @property
    def n_levels(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.dataset.dim

    @property
    def start(self) -> int:
        return 1 if self.base is not None else 0

    # -- forward pass -------------------------------------------------------
    def _blocks(self, X, top):
        blocks = [None] * (top + 1)
        blocks[top] = X[:, None, :]
        for l in range(top, 0, -1):
            P = blocks[l]
            blocks[l - 1] = self.layers[l].scheme.shift_points(P).reshape(P.shape[0], -1, P.shape[-1])
        return blocks

    def _base_blocks(self, P):
        mean, cov = self.base.latent_blocks(P)
        return _t(mean), _t(cov)

    def _forward(self, params: _Params, X, top, z, chols):
        """Per-sample mean and variance of layer ``top`` at ``X``, each (S, n)."""
        blocks = self._blocks(X, top)
        g = None
        for l in range(top + 1):
            P = _t(blocks[l])
            if l == 0:
                if self.base is not None:
                    mean, cov = self._base_blocks(blocks[0])
                else:
                    mean, cov = _conditional(self.layers[0].kernel, params.theta[0], params.Z[0],
                                             chols[0], params.v[0], params.white_sqrt(0), P)
            else:
                S, n = g.shape[:2]
                b, d = P.shape[1], P.shape[2]
                f = g.reshape(S, n, b, -1)
                A = torch.cat([P.expand(S, n, b, d), f], dim=-1)
                mean, cov = _conditional(self.layers[l].kernel, params.theta[l], params.Z[l],
                                         chols[l], params.v[l], params.white_sqrt(l), A)
            if l == top:
                var = cov[..., 0, 0]
                self.diagnostics["variance_clamps"] += int((var < 0).sum())
                S = z[0].shape[0] if z else 1
                n = mean.shape[-2]
                return mean[..., 0].expand(S, n), torch.clamp(var, min=0.0).expand(S, n)
            g = _block_sample(mean, cov, z[l])

    def _chols(self, params):
        chols = []
        for l, layer in enumerate(self.layers):
            if l < self.start:
                chols.append(None)
                continue
            K = gram_theta(layer.kernel, params.theta[l], params.Z[l], xp=torch)
            chols.append(_chol(K, f"layer {l + 1} inducing covariance"))
        return chols

    def _elbo(self, params: _Params, samples: int, rng: np.random.Generator):
        chols = self._chols(params)
        total = torch.zeros((), dtype=DT)
        for l in range(self.start, self.n_levels):
            lev = self.dataset.levels[l]
            layer = self.layers[l]
            y = _t((lev.y - layer.y_shift) / layer.y_scale)
            blocks = self._blocks(lev.X, l)
            z = [_t(rng.standard_normal((samples,) + blocks[k].shape[:2])) for k in range(l)]
            mean, var = self._forward(params, lev.X, l, z, chols)
            s2 = params.noise(l)
            ell = -0.5 * torch.log(2 * math.pi * s2) - 0.5 * ((y - mean) ** 2 + var) / s2
            total = total + ell.mean(0).sum()
        for l in range(self.start, self.n_levels):
            total = total - _kl(params.v[l], params.white_sqrt(l))
        return total

    # -- public -------------------------------------------------------------
    def elbo(self, mc_samples: int = 10, rng: np.random.Generator | None = None,
             with_grad: bool = False):
        """Monte Carlo ELBO; with ``with_grad`` also the gradient (flat, see ``param_vector``)."""
        if mc_samples < 1:
            raise ConfigurationError("mc_samples must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        params = _Params(self.layers, self.start, grad=with_grad, floor=self.config.noise_floor)
        value = self._elbo(params, mc_samples, rng)
        if not torch.isfinite(value):
            raise DivergenceError("non-finite ELBO", snapshot=self.to_dict())
        if not with_grad:
            return float(value)
        grads = torch.autograd.grad(value, params.tensors())
        return float(value.detach()), np.concatenate([g.detach().numpy().ravel() for g in grads])

    def param_vector(self) -> np.ndarray:
        """Trainable parameters in optimizer coordinates (log scales, log diagonal)."""
        p = _Params(self.layers, self.start, grad=False, floor=self.config.noise_floor)
        return np.concatenate([t.numpy().ravel() for t in p.tensors()])

    def with_param_vector(self, v) -> "DeepGpStack":
        p = _Params(self.layers, self.start, grad=False, floor=self.config.noise_floor)
        v = np.asarray(v, dtype=float)
        i = 0
        with torch.no_grad():
            for t in p.tensors():
                t.copy_(_t(v[i:i + t.numel()]).reshape(t.shape))
                i += t.numel()
        return DeepGpStack(self.method, self.dataset, p.to_layers(self.layers), self.config,
                           self.trace, self.base)

    def layer_predictive(self, level: int, A):
        """Mean and variance of layer ``level`` (1-based) at its own inputs ``A``."""
        layer = self.layers[level - 1]
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[-1] != layer.width:
            raise ShapeError(f"layer {level} takes {layer.width} columns, got {A.shape[-1]}")
        return layer_predictive(layer, A)

    def predict(self, Xq, level: int | None = None, samples: int = 1000,
                rng: np.random.Generator | None = None, **_ignored) -> GaussianPrediction:
        """Propagate ``samples`` draws through the layers; total-variance summary."""
        top = self.n_levels - 1 if level is None else int(level) - 1
        if not 0 <= top < self.n_levels:
            raise ValueError(f"level must be in 1..{self.n_levels}")
        if samples < 2:
            raise ValueError("need at least 2 samples")
        rng = np.random.default_rng() if rng is None else rng
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[1] != self.input_dim:
            raise ShapeError(f"model takes {self.input_dim} inputs, got {Xq.shape[1]}")
        blocks = self._blocks(Xq, top)
        z = [rng.standard_normal((samples,) + blocks[k].shape[:2]) for k in range(top)]
        params = _Params(self.layers, self.start, grad=False, floor=self.config.noise_floor)
        m = Xq.shape[0]
        width = max(b.shape[1] for b in blocks)
        per = max(1, _CHUNK // (samples * width * max(l.n_inducing for l in self.layers)))
        means, variances = [], []
        with torch.no_grad():
            chols = self._chols(params)
            for j in range(0, m, per):
                zj = [_t(zk[:, j:j + per]) for zk in z]
                mu, var = self._forward(params, Xq[j:j + per], top, zj, chols)
                if top == 0:
                    mu, var = mu[:1], var[:1]
                means.append(mu.numpy())
                variances.append(var.numpy())
        mu = np.concatenate(means, axis=1)
        var = np.concatenate(variances, axis=1)
        layer = self.layers[top] if not (top == 0 and self.base is not None) else None
        shift, scale = (layer.y_shift, layer.y_scale) if layer else (self.base.y_shift, self.base.y_scale)
        mean = mu.mean(0)
        total = var.mean(0) + mu.var(0)
        return GaussianPrediction(mean * scale + shift, total * scale ** 2)

    def refit(self, data: FidelityDataset, rng: np.random.Generator | None = None) -> "DeepGpStack":
        """Warm-started retraining on new data for ``config.refit_steps`` steps."""
        cfg = replace(self.config, steps=self.config.refit_steps)
        return fit_dgp(data, self.method, cfg, rng=rng, init=self)

    def with_data(self, data: FidelityDataset) -> "DeepGpStack":
        return DeepGpStack(self.method, data, self.layers, self.config, self.trace, self.base)

    def to_dict(self):
        return {
            "kind": self.kind,
            "method": self.method,
            "dataset": dataset_to_dict(self.dataset),
            "layers": [layer.to_dict() for layer in self.layers],
            "config": self.config.to_dict(),
            "trace": self.trace.tolist(),
            "base": None if self.base is None else self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        base = None if doc.get("base") is None else GpModel.from_dict(doc["base"])
        return cls(doc["method"], dataset_from_dict(doc["dataset"]),
                   [SvgpLayer.from_dict(d) for d in doc["layers"]],
                   DgpConfig.from_dict(doc["config"]), doc["trace"], base)


def layer_predictive(layer: SvgpLayer, A):
    """Per-point mean and variance of one layer at inputs ``A`` (n, w), standardized units."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != layer.width:
        raise ShapeError(f"layer takes {layer.width} columns, got {A.shape[1]}")
    with torch.no_grad():
        theta = _t(layer.kernel.params)
        Z = _t(layer.Z)
        Lz = _chol(gram_theta(layer.kernel, theta, Z, xp=torch))
        v = torch.linalg.solve_triangular(Lz, _t(layer.q_mu)[:, None], upper=False)[:, 0]
        Lv = torch.linalg.solve_triangular(Lz, _t(layer.q_sqrt), upper=False)
        mean, cov = _conditional(layer.kernel, theta, Z, Lz, v, Lv,
                                 _t(A)[:, None, :])
    var = cov[:, 0, 0].numpy()
    return mean[:, 0].numpy(), np.maximum(var, 0.0)


# -- fitting ----------------------------------------------------------------------

def _kmeans(P, M, rng):
    if M >= P.shape[0]:
        return P.copy()
    seed = int(rng.integers(2 ** 31))
    scale = P.std(axis=0)
    scale[scale == 0] = 1.0
    centers, _ = kmeans2(P / scale, M, minit="++", seed=seed)
    return centers * scale


def _init_layers(data, method, config, rng):
    """Hyperparameters from quick exact fits chained through posterior means."""
    kind = METHODS[method]
    d = data.dim
    tau = config.tau if config.tau is not None else data.tau
    layers, exact = [], []
    for l, lev in enumerate(data.levels):
        shift, scale = normalization(lev.y)
        if l == 0:
            scheme, A, spec = None, lev.X, rbf(range(d))
        else:
            scheme = AugmentScheme.for_method(kind, d, data.box, tau, config.boundary)
            pts = scheme.shift_points(lev.X)  # (n, t, d)
            n, t = pts.shape[:2]
            below = _chain(exact, layers, l - 1, pts.reshape(n * t, d))
            f = exact[l - 1].latent(below)[0].reshape(n, t)
            A = np.hstack([lev.X, f])
            spec = method_kernel(kind, d)
        model = gp.fit(A, lev.y, spec, config.init_restarts, rng)
        exact.append(model)
        M = min(config.m_for(l), lev.X.shape[0])
        Z = _kmeans(A, M, rng)
        if config.variational_init == "exact":
            q_mu, cov = model.latent(Z, full_cov=True)
            q_sqrt = np.linalg.cholesky(cov + 1e-6 * np.mean(np.diag(cov)) * np.eye(M) + 1e-10 * np.eye(M))
            noise = max(model.noise_variance, config.init_noise)
        elif config.variational_init == "prior":
            K = gram(model.kernel, Z)
            q_mu, noise = np.zeros(M), config.init_noise
            q_sqrt = np.linalg.cholesky(K + _REL_JITTER * np.mean(np.diag(K)) * np.eye(M))
        elif config.variational_init == "tight":
            q_mu, q_sqrt, noise = np.zeros(M), np.sqrt(1e-5) * np.eye(M), config.init_noise
        else:
            raise ConfigurationError(f"unknown variational_init {config.variational_init!r}")
        layers.append(SvgpLayer(model.kernel, Z, q_mu, q_sqrt, max(noise, 1e-6), scheme, shift, scale))
    return layers, exact


def _chain(exact, layers, l, X):
    """Inputs of exact model ``l`` at raw points ``X``, lower levels by posterior mean."""
    if l == 0:
        return X
    scheme = layers[l].scheme
    pts = scheme.shift_points(X)
    n, t, d = pts.shape
    f = exact[l - 1].latent(_chain(exact, layers, l - 1, pts.reshape(n * t, d)))[0]
    return np.hstack([X, f.reshape(n, t)])


def fit_dgp(data: FidelityDataset, method: str = "nardgp", config: DgpConfig | None = None,
            rng: np.random.Generator | None = None, init: DeepGpStack | None = None) -> DeepGpStack:
    """Train a multi-fidelity deep GP with Adam on the Monte Carlo ELBO.

    Parameters
    ----------
    data : FidelityDataset
        Two or more levels; designs may be non-nested.
    method : {"nardgp", "dgpdf", "dgpdfc"}
    config : DgpConfig, optional
    rng : numpy.random.Generator, optional
        Drives initialization and the Monte Carlo noise.  ``config.seed``
        takes precedence when set.
    init : DeepGpStack, optional
        Warm start: its layers (hyperparameters, inducing points, variational
        parameters) are the starting point.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown DGP method {method!r}; choose from {sorted(METHODS)}")
    config = config or DgpConfig()
    if config.seed is not None:
        rng = np.random.default_rng(config.seed)
    rng = np.random.default_rng() if rng is None else rng
    torch.manual_seed(int(rng.integers(2 ** 31)))

    base = None
    if init is not None:
        layers = list(init.layers)
        base = init.base
        if base is not None:
            base = gp.fit(data.levels[0].X, data.levels[0].y, base.kernel, config.init_restarts, rng,
                          init=base.params)
    else:
        layers, exact = _init_layers(data, method, config, rng)
        if config.exact_base:
            base = exact[0]
    # outputs are standardized per level on the current data
    layers = [replace(layer, y_shift=s, y_scale=c)
              for layer, (s, c) in zip(layers, (normalization(lev.y) for lev in data.levels))]

    stack = DeepGpStack(method, data, layers, config, (), base)
    if config.steps == 0:
        return stack

    params = _Params(layers, stack.start, floor=config.noise_floor)
    if not config.train_inducing:
        for Z in params.Z:
            Z.requires_grad_(False)
    lr = config.adam_lr
    opt = torch.optim.Adam(params.tensors(True), lr=lr)
    trace = []
    good = params.snapshot()
    halvings = 0
    step = 0
    while step < config.steps:
        opt.zero_grad()
        try:
            value = stack._elbo(params, config.mc_samples, rng)
            ok = bool(torch.isfinite(value))
            if ok:
                (-value).backward()
                ok = all(bool(torch.all(torch.isfinite(t.grad))) for t in params.tensors(True))
        except (ConditioningError, RuntimeError) as exc:
            log.debug("step %d failed: %s", step, exc)
            ok = False
        if not ok:
            halvings += 1
            if halvings > config.max_halvings:
                params.restore(good)
                snap = DeepGpStack(method, data, params.to_layers(layers), config, trace, base)
                raise DivergenceError(
                    f"ELBO diverged at step {step} after {config.max_halvings} learning-rate halvings",
                    snapshot=snap.to_dict())
            lr /= 2
            log.warning("non-finite ELBO at step %d; halving learning rate to %g", step, lr)
            params.restore(good)
            opt = torch.optim.Adam(params.tensors(True), lr=lr)
            continue
        for group in opt.param_groups:
            group["lr"] = lr * config.lr_decay ** (step / max(config.steps - 1, 1))
        opt.step()
        trace.append(float(value.detach()))
        if step % 50 == 0:
            good = params.snapshot()
        step += 1
    return DeepGpStack(method, data, params.to_layers(layers), config, trace, base)


def predict_dgp(stack: DeepGpStack, Xq, samples: int = 1000, rng=None, level=None):
    return stack.predict(Xq, level=level, samples=samples, rng=rng)
