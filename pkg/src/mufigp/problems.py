"""Closed-form academic test problems on [0, 1].

The low-fidelity function is always ``sin(8 pi x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import DomainError

__all__ = ["BenchmarkProblem", "PROBLEMS", "get_problem", "eval_problem"]

PI = np.pi


def _x(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("benchmark problems are one-dimensional")
        x = x[:, 0]
    return x


def low(x):
    return np.sin(8 * PI * _x(x))


def linear_high(x):
    x = _x(x)
    return 0.8 * np.sin(8 * PI * x) + 0.3 * np.sin(2 * PI * x)


def nonlinear_high(x):
    return np.sin(8 * PI * _x(x)) ** 2


def phase_shift_high(x):
    x = _x(x)
    return np.sin(8 * PI * x + PI / 10) ** 2 + np.cos(4 * PI * x)


def three_f3(x):
    x = _x(x)
    return np.sin(8 * PI * x) ** 2 + x ** 2


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    fidelity_fns: tuple[Callable, ...]
    domain: tuple[float, float] = (0.0, 1.0)
    dims: int = 1

    @property
    def n_levels(self) -> int:
        return len(self.fidelity_fns)

    @property
    def box(self) -> np.ndarray:
        return np.array([self.domain])

    def oracle(self, level: int) -> Callable:
        """Vectorized evaluator for a 1-based fidelity level, with domain checks."""
        fn = self.fidelity_fns[level - 1]
        lo, hi = self.domain

        def call(X):
            x = _x(X)
            if np.any(x < lo) or np.any(x > hi):
                raise DomainError(f"{self.name}: input outside [{lo}, {hi}]")
            return fn(x)

        return call


PROBLEMS = {
    "linear": BenchmarkProblem("linear", (low, linear_high)),
    "nonlinear": BenchmarkProblem("nonlinear", (low, nonlinear_high)),
    "phase_shift": BenchmarkProblem("phase_shift", (low, phase_shift_high)),
    "three_fidelity": BenchmarkProblem("three_fidelity", (low, nonlinear_high, three_f3)),
}


def get_problem(name: str) -> BenchmarkProblem:
    try:
        return PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


def eval_problem(problem, level, x) -> float | np.ndarray:
    """Evaluate ``problem`` at fidelity ``level``.

    ``level`` is 1-based or one of ``"low"``/``"high"``.  Scalars in, scalar out.
    """
    if isinstance(problem, str):
        problem = get_problem(problem)
    if level == "low":
        level = 1
    elif level == "high":
        level = problem.n_levels
    scalar = np.ndim(x) == 0
    out = problem.oracle(int(level))(np.atleast_1d(x))
    return float(out[0]) if scalar else out
