"""Greedy acquisition of new training points where the posterior std is largest.

For a fitted surrogate the next point at a fidelity level is the argmax of its
predicted standard deviation over the box.  The maximization uses a scrambled
Sobol candidate set refined by a short compass pattern search.  The loop
evaluates the oracle there, appends the point, refits with warm-started
hyperparameters and repeats until the maximum std drops below a threshold or
the per-level budget is spent.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import gp
from .ar1 import Ar1Chain, fit_ar1
from .dataset_io import FidelityDataset, atomic_write_text, fmt
from .exceptions import ConfigurationError
from .gp import GpModel
from .stack import NonlinearStack, fit_stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    """Settings of the acquisition loop.

    Parameters
    ----------
    domain : array_like, shape (d, 2)
        Search box.
    candidate_count : int
        Size of the Sobol candidate set.
    steps : int
        Maximum acquisitions per scheduled level.
    std_threshold : float
        Stop a level once the maximum posterior std is at or below this.
    level_order : tuple of int, optional
        1-based levels to refine; processed lowest first.  Default: the
        highest level only.
    refit : bool
        Re-estimate hyperparameters after each acquisition.  When False the
        model is only conditioned on the new data.
    """

    domain: np.ndarray
    candidate_count: int = 4096
    steps: int = 10
    std_threshold: float = 0.0
    level_order: tuple[int, ...] | None = None
    refit: bool = True
    warm_restarts: int = 2
    full_restarts: int = 10
    full_refit_every: int = 5
    pattern_iters: int = 5
    mc_samples: int = 500
    heldout: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        box = np.asarray(self.domain, dtype=float).reshape(-1, 2)
        if np.any(box[:, 0] >= box[:, 1]):
            raise ConfigurationError("domain needs lo < hi in every dimension")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.std_threshold < 0:
            raise ConfigurationError("std_threshold must be >= 0")
        if self.candidate_count < 1:
            raise ConfigurationError("candidate_count must be positive")
        object.__setattr__(self, "domain", box)
        if self.level_order is not None:
            object.__setattr__(self, "level_order", tuple(sorted(int(l) for l in self.level_order)))

    @property
    def dim(self) -> int:
        return self.domain.shape[0]


@dataclass(frozen=True)
class AdaptRecord:
    step: int
    level: int  # 1-based
    point: np.ndarray
    value: float
    sigma_before: float
    heldout_mse: float
    lower_values: tuple[tuple[int, float], ...] = ()  # (0-based level, value) added below


# -- model plumbing -------------------------------------------------------------

def model_levels(model) -> int:
    return 1 if isinstance(model, GpModel) else model.n_levels


def model_dataset(model) -> FidelityDataset:
    if isinstance(model, GpModel):
        return FidelityDataset.from_arrays([model.X], [model.y_raw])
    return model.dataset


def predict_level(model, X, level, samples=500, seed=0, common=False):
    """Predictive mean and std at a 1-based level, deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    if isinstance(model, GpModel):
        p = model.predict(X)
    elif isinstance(model, NonlinearStack):
        p = model.predict_mc(X, level, samples, rng, common=common)
    elif getattr(model, "kind", None) == "dgp":
        p = model.predict(X, level=level, samples=samples, rng=rng)
    else:
        p = model.predict(X, level=level)
    return p.mean, p.std


def _condition(model, data, oracles):
    if isinstance(model, GpModel):
        lev = data.levels[0]
        return model.with_data(lev.X, lev.y, keep_scaling=True)
    if isinstance(model, NonlinearStack):
        return model.with_data(data, lf_oracle=oracles)
    return model.with_data(data)


def _refit(model, data, oracles, rng, restarts):
    if isinstance(model, GpModel):
        lev = data.levels[0]
        return gp.fit(lev.X, lev.y, model.kernel, restarts, rng, learn_noise=model.learn_noise,
                      noise_variance=model.noise_variance, normalize=model.normalize,
                      init=model.params)
    if isinstance(model, Ar1Chain):
        specs = [model.base.kernel] + [d.kernel for d in model.deltas]
        return fit_ar1(data, specs, restarts, rng, learn_noise=model.learn_noise,
                       noise_variance=model.base.noise_variance, normalize=model.normalize,
                       init=model.params_for_warm_start())
    if isinstance(model, NonlinearStack):
        return fit_stack(data, model.method, lf_oracle=oracles, restarts=restarts, rng=rng,
                         tau=model.tau, boundary=model.boundary,
                         learn_noise=model.base.learn_noise,
                         noise_variance=model.base.noise_variance,
                         variance_cutoff=model.variance_cutoff,
                         kernels=[layer.gp.kernel for layer in model.layers],
                         init=model.params_for_warm_start())
    return model.refit(data, rng)


def _nested(model) -> bool:
    return isinstance(model, (Ar1Chain, NonlinearStack))


def _delay_for(model, level0, x, oracles):
    """Delay values for a new row of a level that stores them."""
    scheme = model.layers[level0 - 1].scheme
    pts = scheme.delay_points(np.asarray(x, dtype=float).reshape(1, -1))[0]
    return np.asarray(_oracle(oracles, level0 - 1)(pts), dtype=float).ravel()


def _oracle(oracles, level0):
    if callable(oracles):
        return oracles
    return oracles[level0]


def _add_point(model, data, level0, x, y, oracles):
    """Append ``(x, y)`` at ``level0``; nested models get the lower levels too."""
    lower = []
    if _nested(model):
        for l in range(level0):
            lev = data.levels[l]
            if np.any(np.all(np.abs(lev.X - x) <= 1e-12, axis=1)):
                continue
            v = float(np.asarray(_oracle(oracles, l)(x[None, :])).ravel()[0])
            lower.append((l, v))
            delay = _delay_for(model, l, x, oracles) if lev.delay is not None else None
            data = data.append_point(l, x, v, delay)
    lev = data.levels[level0]
    delay = None
    if lev.delay is not None:
        delay = _delay_for(model, level0, x, oracles)
    return data.append_point(level0, x, y, delay), tuple(lower)


# -- acquisition ----------------------------------------------------------------

def sobol_candidates(box, count, rng) -> np.ndarray:
    d = box.shape[0]
    sampler = qmc.Sobol(d, scramble=True, seed=rng)
    m = int(np.log2(count))
    if 2 ** m == count:
        U = sampler.random_base2(m)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            U = sampler.random(count)
    return qmc.scale(U, box[:, 0], box[:, 1])


def max_posterior_std(model, level: int, config: AdaptConfig, rng: np.random.Generator):
    """Approximate argmax of the posterior std at ``level`` and its value."""
    box = config.domain
    seed = int(rng.integers(2 ** 63))

    def sigma(X):
        return predict_level(model, X, level, config.mc_samples, seed, common=True)[1]

    C = sobol_candidates(box, config.candidate_count, rng)
    s = sigma(C)
    i = int(np.argmax(s))  # first index among ties
    x, best = C[i].copy(), float(s[i])

    width = box[:, 1] - box[:, 0]
    h = 0.5 * width / config.candidate_count ** (1.0 / config.dim)
    d = config.dim
    for _ in range(config.pattern_iters):
        trial = np.repeat(x[None, :], 2 * d, axis=0)
        trial[np.arange(d), np.arange(d)] += h
        trial[d + np.arange(d), np.arange(d)] -= h
        trial = np.clip(trial, box[:, 0], box[:, 1])
        st = sigma(trial)
        j = int(np.argmax(st))
        if st[j] > best:
            x, best = trial[j].copy(), float(st[j])
        h = h / 2
    edge = (np.abs(x - box[:, 0]) <= 1e-9 * width) | (np.abs(x - box[:, 1]) <= 1e-9 * width)
    if np.any(edge):
        log.warning("acquired point %s lies on the domain boundary", np.array2string(x))
    return x, best


def acquire_next(model, level: int, config: AdaptConfig, rng: np.random.Generator) -> np.ndarray:
    """Input in the box where the posterior std at ``level`` (1-based) is largest."""
    return max_posterior_std(model, level, config, rng)[0]


def _heldout_mse(model, config, oracles, top):
    if config.heldout is None:
        return float("nan")
    Xh, yh = config.heldout
    mean = predict_level(model, Xh, top, samples=1000, seed=0)[0]
    return float(np.mean((mean - yh) ** 2))


def default_heldout(box, oracle, count=1000):
    """Uniform grid (1-D) or Sobol points with the oracle's values."""
    if box.shape[0] == 1:
        X = np.linspace(box[0, 0], box[0, 1], count)[:, None]
    else:
        X = sobol_candidates(box, count, np.random.default_rng(0))
    return X, np.asarray(oracle(X), dtype=float).ravel()


def adapt_loop(model, oracles, config: AdaptConfig, rng: np.random.Generator | None = None):
    """Run the acquisition loop.

    Parameters
    ----------
    model
        A fitted GpModel, Ar1Chain, NonlinearStack or DeepGpStack.
    oracles : callable or sequence of callables
        Evaluators indexed by 0-based level (a single callable is used for
        every level).
    config : AdaptConfig
    rng : numpy.random.Generator, optional

    Returns
    -------
    model, history
        The final model and one :class:`AdaptRecord` per acquisition.  An
        oracle failure stops the loop and returns what was done so far.
    """
    rng = np.random.default_rng() if rng is None else rng
    n_levels = model_levels(model)
    order = config.level_order or (n_levels,)
    if any(not 1 <= l <= n_levels for l in order):
        raise ConfigurationError(f"level_order {order} outside 1..{n_levels}")
    data = model_dataset(model)
    history: list[AdaptRecord] = []
    step = 0
    for level in order:
        for _ in range(config.steps):
            x, sigma = max_posterior_std(model, level, config, rng)
            if sigma <= config.std_threshold:
                log.info("level %d: max std %.3g below threshold, stopping", level, sigma)
                break
            try:
                y = float(np.asarray(_oracle(oracles, level - 1)(x[None, :])).ravel()[0])
                data, lower = _add_point(model, data, level - 1, x, y, oracles)
            except Exception as exc:  # noqa: BLE001 - any oracle failure ends the loop
                log.error("oracle failed at %s: %s", x, exc)
                warnings.warn(f"oracle failure, returning partial history: {exc}", RuntimeWarning,
                              stacklevel=2)
                return model, history
            step += 1
            if config.refit:
                full = config.full_refit_every > 0 and step % config.full_refit_every == 0
                restarts = config.full_restarts if full else config.warm_restarts
                model = _refit(model, data, oracles, rng, restarts)
            else:
                model = _condition(model, data, oracles)
            mse = _heldout_mse(model, config, oracles, n_levels)
            log.info("step %d level %d x=%s sigma=%.3g mse=%.3g", step, level, x, sigma, mse)
            history.append(AdaptRecord(step, level, x, y, sigma, mse, lower))
    return model, history


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = history[0].point.size if history else 1
    w.writerow(["step", "level"] + [f"x{i + 1}" for i in range(d)]
               + ["value", "sigma_before", "heldout_mse"])
    for r in history:
        w.writerow([r.step, r.level] + [fmt(v) for v in r.point]
                   + [fmt(r.value), fmt(r.sigma_before), fmt(r.heldout_mse)])
    return buf.getvalue()


def write_history(history, path) -> None:
    atomic_write_text(path, history_csv(history))


def replay(data: FidelityDataset, history) -> FidelityDataset:
    """Rebuild the final training set from a starting dataset and a history.

    Levels that store delay values cannot be replayed this way.
    """
    for r in history:
        for l, v in r.lower_values:
            data = data.append_point(l, r.point, v)
        data = data.append_point(r.level - 1, r.point, r.value)
    return data
