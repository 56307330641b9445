"""Experiment protocol over the closed-form benchmark problems.

One experiment is a sweep over problems, methods and seeds.  For each seed a
nested design is drawn (uniform low-fidelity points, each higher level a
random subset of the one below), every method is fitted, and the MSE on a
uniform grid is recorded.  Optionally the adaptive sampling loop runs and the
MSE after each acquisition forms an error-evolution series.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gp
from .adaptivity import AdaptConfig, adapt_loop, predict_level
from .ar1 import fit_ar1
from .dataset_io import FidelityDataset, atomic_write_text
from .dgp import METHODS as DGP_METHODS, DgpConfig, fit_dgp
from .exceptions import ConfigurationError, MufigpError
from .kernels import rbf
from .problems import PROBLEMS, get_problem
from .stack import METHODS as STACK_METHODS, fit_stack

__all__ = ["ALL_METHODS", "ExperimentConfig", "CellResult", "ExperimentReport", "run_experiment",
           "sample_design", "fit_method", "grid_mse", "write_report", "load_config"]

log = logging.getLogger(__name__)

ALL_METHODS = ("gp", "ar1") + tuple(STACK_METHODS) + tuple(DGP_METHODS)
MF_METHODS = ALL_METHODS[1:]


@dataclass(frozen=True)
class ExperimentConfig:
    """Sweep definition.

    Parameters
    ----------
    problems, methods : tuple of str
    seeds : tuple of int or int
        An int ``n`` means seeds ``0..n-1``.
    n_lf : int
        Low-fidelity design size.
    n_hf : int
        High-fidelity design size.
    n_mid : tuple of int
        Sizes of intermediate levels for problems with more than two levels.
    adapt_steps : int
        Acquisitions on the top level after the initial fit (0 disables).
    grid_size : int
        Uniform test grid used for the MSE.
    restarts : int
        Hyperparameter restarts for exact-GP based methods.
    samples : int
        Monte Carlo samples for stack and deep-GP predictions.
    nested_dgp : bool
        When False the deep-GP methods get independent per-level designs.
    base_seed : int
        Mixed into every per-cell random stream (the CLI ``--seed``).
    dgp, adapt : dict
        Overrides forwarded to :class:`DgpConfig` and :class:`AdaptConfig`.
    """

    problems: tuple[str, ...] = ("linear", "nonlinear", "phase_shift")
    methods: tuple[str, ...] = ALL_METHODS
    seeds: tuple[int, ...] = tuple(range(10))
    n_lf: int = 50
    n_hf: int = 8
    n_mid: tuple[int, ...] = (12,)
    adapt_steps: int = 0
    grid_size: int = 1000
    restarts: int = 10
    samples: int = 1000
    nested_dgp: bool = True
    base_seed: int = 0
    dgp: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.seeds, int):
            object.__setattr__(self, "seeds", tuple(range(self.seeds)))
        for name in ("problems", "methods", "seeds", "n_mid"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(v) if not isinstance(v, (str, int)) else (v,))
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigurationError(f"unknown method(s) {bad}; choose from {list(ALL_METHODS)}")
        bad = [p for p in self.problems if p not in PROBLEMS]
        if bad:
            raise ConfigurationError(f"unknown problem(s) {bad}; choose from {sorted(PROBLEMS)}")
        if self.n_hf < 1 or self.n_lf < self.n_hf:
            raise ConfigurationError("need 1 <= n_hf <= n_lf")
        if self.adapt_steps < 0 or self.grid_size < 2:
            raise ConfigurationError("adapt_steps must be >= 0 and grid_size >= 2")
        bad = set(self.dgp) - {f.name for f in fields(DgpConfig)}
        if bad:
            raise ConfigurationError(f"unknown dgp option(s) {sorted(bad)}")
        allowed = {f.name for f in fields(AdaptConfig)} - {"domain", "heldout", "steps"}
        bad = set(self.adapt) - allowed
        if bad:
            raise ConfigurationError(f"unsupported adapt option(s) {sorted(bad)}")

    def sizes(self, n_levels: int) -> tuple[int, ...]:
        mids = tuple(self.n_mid[: n_levels - 2])
        if len(mids) < n_levels - 2:
            raise ConfigurationError(f"n_mid needs {n_levels - 2} entries")
        sizes = (self.n_lf,) + mids + (self.n_hf,)
        if any(a < b for a, b in zip(sizes, sizes[1:])):
            raise ConfigurationError(f"nested design sizes must be nonincreasing, got {sizes}")
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("problems", "methods", "seeds", "n_mid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown config key(s) {sorted(extra)}")
        doc = dict(doc)
        if isinstance(doc.get("seeds"), int):
            doc["seeds"] = tuple(range(doc["seeds"]))
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            from .exceptions import ParseError
            raise ParseError(exc.msg, path=path, line=exc.lineno) from None
    return ExperimentConfig.from_dict(doc)


@dataclass
class CellResult:
    method: str
    problem: str
    n_hf: int
    seed: int
    mse: float
    seconds: float
    series: list[float] = field(default_factory=list)
    error: str = ""


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    cells: list[CellResult]

    def cell(self, method, problem, seed) -> CellResult:
        for c in self.cells:
            if (c.method, c.problem, c.seed) == (method, problem, seed):
                return c
        raise KeyError((method, problem, seed))

    def mses(self, method, problem) -> np.ndarray:
        return np.array([c.mse for c in self.cells if c.method == method and c.problem == problem])

    def mean_mse(self, method, problem) -> float:
        v = self.mses(method, problem)
        return float(np.mean(v)) if v.size else float("nan")

    def mean_series(self, method, problem) -> np.ndarray:
        S = [c.series for c in self.cells if c.method == method and c.problem == problem and c.series]
        if not S:
            return np.array([])
        n = min(len(s) for s in S)
        return np.mean([s[:n] for s in S], axis=0)

    def summary(self) -> dict:
        """Table-shaped summary: mean and median MSE per method and problem."""
        cfg = self.config
        table, median, failures = {}, {}, {}
        for m in cfg.methods:
            table[m], median[m], failures[m] = {}, {}, {}
            for p in cfg.problems:
                v = self.mses(m, p)
                table[m][p] = _num(np.mean(v))
                median[m][p] = _num(np.median(v))
                failures[m][p] = int(np.sum(~np.isfinite(v)))
        evo = {}
        if cfg.adapt_steps:
            for m in cfg.methods:
                evo[m] = {p: [_num(v) for v in self.mean_series(m, p)] for p in cfg.problems}
        return {"config": cfg.to_dict(), "config_hash": cfg.digest(), "n_hf": cfg.n_hf,
                "n_seeds": len(cfg.seeds), "mean_mse": table, "median_mse": median,
                "failures": failures, "evolution": evo}

    def results_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "problem", "n_hf", "seed", "mse"] + (["seconds"] if include_time else []))
        for c in self.cells:
            row = [c.method, c.problem, c.n_hf, c.seed, repr(float(c.mse))]
            w.writerow(row + ([f"{c.seconds:.3f}"] if include_time else []))
        return buf.getvalue()

    def evolution_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "problem", "seed", "step", "n_hf", "mse"])
        for c in self.cells:
            for k, v in enumerate(c.series):
                w.writerow([c.method, c.problem, c.seed, k, c.n_hf + k, repr(float(v))])
        return buf.getvalue()


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


# --------------------------------------------------------------------------
# protocol pieces


def _seed_rng(seed: int, problem: str, tag: str = "", base: int = 0) -> np.random.Generator:
    # stable per (seed, problem, tag) stream, independent of sweep order
    key = int.from_bytes(hashlib.sha256(f"{problem}|{tag}".encode()).digest()[:4], "little")
    return np.random.default_rng([int(base), int(seed), key])


def sample_design(problem, sizes, rng, nested: bool = True) -> FidelityDataset:
    """Uniform low-fidelity design with nested (or independent) higher levels."""
    P = get_problem(problem) if isinstance(problem, str) else problem
    lo, hi = P.domain
    Xs = [lo + (hi - lo) * rng.uniform(size=(sizes[0], P.dims))]
    for n in sizes[1:]:
        if nested:
            Xs.append(Xs[-1][np.sort(rng.choice(len(Xs[-1]), n, replace=False))])
        else:
            Xs.append(lo + (hi - lo) * rng.uniform(size=(n, P.dims)))
    ys = [P.oracle(l + 1)(X) for l, X in enumerate(Xs)]
    return FidelityDataset.from_arrays(Xs, ys, domain=[list(P.domain)] * P.dims)


def fit_method(method: str, data: FidelityDataset, oracles, config: ExperimentConfig, rng):
    """Fit one method on ``data``; ``gp`` uses the top level only."""
    d = data.dim
    if method == "gp":
        top = data.levels[-1]
        return gp.fit(top.X, top.y, rbf(range(d)), config.restarts, rng)
    if method == "ar1":
        return fit_ar1(data, None, config.restarts, rng)
    if method in STACK_METHODS:
        return fit_stack(data, method, lf_oracle=oracles, restarts=config.restarts, rng=rng)
    if method in DGP_METHODS:
        return fit_dgp(data, method, DgpConfig(**config.dgp), rng)
    raise ConfigurationError(f"unknown method {method!r}")


def grid_mse(model, grid, truth, level, samples=1000, seed=0) -> float:
    mean = predict_level(model, grid, level, samples=samples, seed=seed)[0]
    return float(np.mean((np.asarray(mean).ravel() - truth) ** 2))


def _run_cell(method, problem, seed, config):
    P = get_problem(problem)
    sizes = config.sizes(P.n_levels)
    nested = config.nested_dgp or method not in DGP_METHODS
    design_rng = _seed_rng(seed, problem, "design" if nested else "design-free", config.base_seed)
    data = sample_design(P, sizes, design_rng, nested=nested)
    oracles = [P.oracle(l + 1) for l in range(P.n_levels)]
    grid = np.linspace(P.domain[0], P.domain[1], config.grid_size)[:, None]
    truth = oracles[-1](grid)
    rng = _seed_rng(seed, problem, method, config.base_seed)
    t0 = time.perf_counter()
    model = fit_method(method, data, oracles, config, rng)
    level = P.n_levels
    mse = grid_mse(model, grid, truth, level, config.samples)
    series = [mse]
    if config.adapt_steps:
        # the single-fidelity GP only sees the top level
        adapt_oracles = [oracles[-1]] if method == "gp" else oracles
        acfg = AdaptConfig(domain=data.box, steps=config.adapt_steps, heldout=(grid, truth),
                           **config.adapt)
        model, history = adapt_loop(model, adapt_oracles, acfg, rng)
        series += [r.heldout_mse for r in history]
        mse = series[-1]
    return CellResult(method, problem, sizes[-1], seed, mse, time.perf_counter() - t0, series)


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run every (problem, method, seed) cell.

    A cell whose fit fails is recorded with NaN MSE and the error message;
    the sweep continues.  Randomness depends only on the configuration and
    the seed of each cell, so reruns give identical MSEs.
    """
    cells = []
    for problem in config.problems:
        for method in config.methods:
            for seed in config.seeds:
                t0 = time.perf_counter()
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        cell = _run_cell(method, problem, seed, config)
                except (MufigpError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                    log.warning("%s/%s seed %d failed: %s", method, problem, seed, exc)
                    n_hf = config.sizes(get_problem(problem).n_levels)[-1]
                    cell = CellResult(method, problem, n_hf, seed, float("nan"),
                                      time.perf_counter() - t0, [], f"{type(exc).__name__}: {exc}")
                log.info("%s %s seed %d mse %.3g (%.1fs)", problem, method, seed, cell.mse, cell.seconds)
                if progress is not None:
                    progress(cell)
                cells.append(cell)
    return ExperimentReport(config, cells)


def write_report(report: ExperimentReport, out_dir) -> dict:
    """Write ``results.csv``, ``summary.json`` and (with adaptivity) ``evolution.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"results": os.path.join(out_dir, "results.csv"),
             "summary": os.path.join(out_dir, "summary.json")}
    atomic_write_text(paths["results"], report.results_csv())
    atomic_write_text(paths["summary"], json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if report.config.adapt_steps:
        paths["evolution"] = os.path.join(out_dir, "evolution.csv")
        atomic_write_text(paths["evolution"], report.evolution_csv())
    return paths
