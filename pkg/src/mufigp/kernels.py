"""Covariance functions built as small immutable trees.

A kernel is a tree of nodes:

* :class:`Rbf` -- ARD squared exponential acting on a subset of input columns
  (an empty column set gives a constant kernel equal to the signal variance),
* :class:`Sum` and :class:`Product` of two sub-kernels,
* :class:`NargpComposite` -- ``k_scale(x) * k_transform(f) + k_bias(x)``, the
  structured kernel used by the non-linear autoregressive methods.

Every hyperparameter is positive and stored as its logarithm.  The tree
flattens its log-hyperparameters to a vector in a fixed depth-first order
(see :attr:`Kernel.param_names`), which is the vector optimizers work on.

Evaluation is written once against an array namespace so the same code serves
NumPy (with analytic gradients, :func:`gram_grad`) and torch (autograd, used by
the variational deep GP).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .exceptions import ShapeError, SchemaError

__all__ = [
    "Kernel",
    "Rbf",
    "Sum",
    "Product",
    "NargpComposite",
    "rbf",
    "eval_kernel",
    "gram",
    "gram_diag",
    "gram_grad",
    "gram_theta",
    "gram_diag_theta",
    "kernel_from_dict",
]


class Kernel:
    """Base class for kernel tree nodes."""

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    @property
    def params(self) -> np.ndarray:
        """Flat vector of log-hyperparameters."""
        raise NotImplementedError

    def with_params(self, theta) -> "Kernel":
        """Return a copy of this tree carrying the log-hyperparameters ``theta``."""
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} parameters, got {theta.size}")
        node, used = self._rebuild(theta, 0)
        assert used == theta.size
        return node

    def _rebuild(self, theta, offset):
        raise NotImplementedError

    @property
    def param_names(self) -> list[str]:
        return self._names("")

    def _names(self, prefix):
        raise NotImplementedError

    @property
    def input_dim(self) -> int:
        """Minimum number of input columns this kernel reads."""
        dims = self.dims_used()
        return max(dims) + 1 if dims else 0

    def dims_used(self) -> set[int]:
        raise NotImplementedError

    @property
    def signal_variance(self) -> float:
        """Prior variance ``k(x, x)`` (identical for every ``x``)."""
        return float(gram_diag_theta(self, self.params, np.zeros((1, self.input_dim)))[0])

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __add__(self, other):
        return Sum(self, other)

    def __mul__(self, other):
        return Product(self, other)


@dataclass(frozen=True, eq=True)
class Rbf(Kernel):
    """``sigma^2 exp(-0.5 sum_i (x_i - x'_i)^2 / l_i^2)`` over the columns ``dims``."""

    dims: tuple[int, ...]
    log_variance: float = 0.0
    log_lengthscales: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        ls = tuple(float(v) for v in self.log_lengthscales)
        if not ls:
            ls = (0.0,) * len(self.dims)
        if len(ls) != len(self.dims):
            raise ShapeError(
                f"Rbf over {len(self.dims)} dims needs {len(self.dims)} lengthscales, got {len(ls)}"
            )
        if any(d < 0 for d in self.dims):
            raise ShapeError("negative input dimension index")
        if not np.all(np.isfinite(ls)) or not np.isfinite(self.log_variance):
            raise ValueError("kernel hyperparameters must be finite")
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_variance", float(self.log_variance))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_lengthscales))

    @property
    def n_params(self):
        return 1 + len(self.dims)

    @property
    def params(self):
        return np.array((self.log_variance,) + self.log_lengthscales)

    def _rebuild(self, theta, offset):
        n = self.n_params
        chunk = theta[offset:offset + n]
        node = replace(self, log_variance=float(chunk[0]),
                       log_lengthscales=tuple(float(v) for v in chunk[1:]))
        return node, offset + n

    def _names(self, prefix):
        return [prefix + "log_variance"] + [prefix + f"log_lengthscale[{d}]" for d in self.dims]

    def dims_used(self):
        return set(self.dims)

    def to_dict(self):
        return {
            "type": "rbf",
            "dims": list(self.dims),
            "log_variance": self.log_variance,
            "log_lengthscales": list(self.log_lengthscales),
        }


@dataclass(frozen=True, eq=True)
class Sum(Kernel):
    left: Kernel
    right: Kernel

    @property
    def n_params(self):
        return self.left.n_params + self.right.n_params

    @property
    def params(self):
        return np.concatenate([self.left.params, self.right.params])

    def _rebuild(self, theta, offset):
        left, offset = self.left._rebuild(theta, offset)
        right, offset = self.right._rebuild(theta, offset)
        return Sum(left, right), offset

    def _names(self, prefix):
        return self.left._names(prefix + "left.") + self.right._names(prefix + "right.")

    def dims_used(self):
        return self.left.dims_used() | self.right.dims_used()

    def to_dict(self):
        return {"type": "sum", "left": self.left.to_dict(), "right": self.right.to_dict()}


@dataclass(frozen=True, eq=True)
class Product(Kernel):
    left: Kernel
    right: Kernel

    @property
    def n_params(self):
        return self.left.n_params + self.right.n_params

    @property
    def params(self):
        return np.concatenate([self.left.params, self.right.params])

    def _rebuild(self, theta, offset):
        left, offset = self.left._rebuild(theta, offset)
        right, offset = self.right._rebuild(theta, offset)
        return Product(left, right), offset

    def _names(self, prefix):
        return self.left._names(prefix + "left.") + self.right._names(prefix + "right.")

    def dims_used(self):
        return self.left.dims_used() | self.right.dims_used()

    def to_dict(self):
        return {"type": "product", "left": self.left.to_dict(), "right": self.right.to_dict()}


@dataclass(frozen=True, eq=True)
class NargpComposite(Kernel):
    """``scale(x, x') * transform(f, f') + bias(x, x')``.

    ``scale`` and ``bias`` normally read the design columns and ``transform``
    the columns holding lower-fidelity outputs (one column for NARGP, the
    value plus its delayed copies for GPDFC).  The three blocks keep their
    own hyperparameters so they can be reported separately.
    """

    scale: Kernel
    transform: Kernel
    bias: Kernel

    @property
    def n_params(self):
        return self.scale.n_params + self.transform.n_params + self.bias.n_params

    @property
    def params(self):
        return np.concatenate([self.scale.params, self.transform.params, self.bias.params])

    def _rebuild(self, theta, offset):
        scale, offset = self.scale._rebuild(theta, offset)
        transform, offset = self.transform._rebuild(theta, offset)
        bias, offset = self.bias._rebuild(theta, offset)
        return NargpComposite(scale, transform, bias), offset

    def _names(self, prefix):
        return (self.scale._names(prefix + "scale.")
                + self.transform._names(prefix + "transform.")
                + self.bias._names(prefix + "bias."))

    def dims_used(self):
        return self.scale.dims_used() | self.transform.dims_used() | self.bias.dims_used()

    def to_dict(self):
        return {
            "type": "nargp",
            "scale": self.scale.to_dict(),
            "transform": self.transform.to_dict(),
            "bias": self.bias.to_dict(),
        }


def rbf(dims, variance=1.0, lengthscales=1.0) -> Rbf:
    """Convenience constructor taking natural (not log) hyperparameters."""
    dims = tuple(dims)
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (len(dims),))
    if variance <= 0 or np.any(ls <= 0):
        raise ValueError("variance and lengthscales must be positive")
    return Rbf(dims, float(np.log(variance)), tuple(np.log(ls)))


def kernel_from_dict(doc: dict) -> Kernel:
    try:
        kind = doc["type"]
        if kind == "rbf":
            return Rbf(tuple(doc["dims"]), float(doc["log_variance"]),
                       tuple(float(v) for v in doc["log_lengthscales"]))
        if kind == "sum":
            return Sum(kernel_from_dict(doc["left"]), kernel_from_dict(doc["right"]))
        if kind == "product":
            return Product(kernel_from_dict(doc["left"]), kernel_from_dict(doc["right"]))
        if kind == "nargp":
            return NargpComposite(kernel_from_dict(doc["scale"]),
                                  kernel_from_dict(doc["transform"]),
                                  kernel_from_dict(doc["bias"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed kernel document: {exc!r}") from exc
    raise SchemaError(f"unknown kernel node type {kind!r}")


# --------------------------------------------------------------------------
# evaluation


def _check_inputs(spec, X, X2):
    if X.shape[-1] < spec.input_dim:
        raise ShapeError(
            f"kernel reads {spec.input_dim} input columns, got array with {X.shape[-1]}"
        )
    if X2 is not None and X2.shape[-1] != X.shape[-1]:
        raise ShapeError(f"column mismatch: {X.shape[-1]} vs {X2.shape[-1]}")


def _gram(node, theta, offset, X, X2, xp):
    """Return (K, new_offset); X is (..., n, D), X2 is (..., m, D)."""
    if isinstance(node, Rbf):
        var = xp.exp(theta[offset])
        nd = len(node.dims)
        if nd == 0:
            lead = np.broadcast_shapes(tuple(X.shape[:-2]), tuple(X2.shape[:-2]))
            K = var * xp.ones(lead + (X.shape[-2], X2.shape[-2]), dtype=X.dtype)
            return K, offset + 1
        ls = xp.exp(theta[offset + 1:offset + 1 + nd])
        dims = list(node.dims)
        A = X[..., dims] / ls
        B = X2[..., dims] / ls
        diff = A[..., :, None, :] - B[..., None, :, :]
        K = var * xp.exp(-0.5 * (diff * diff).sum(-1))
        return K, offset + 1 + nd
    if isinstance(node, (Sum, Product)):
        K1, offset = _gram(node.left, theta, offset, X, X2, xp)
        K2, offset = _gram(node.right, theta, offset, X, X2, xp)
        return (K1 + K2 if isinstance(node, Sum) else K1 * K2), offset
    if isinstance(node, NargpComposite):
        Ks, offset = _gram(node.scale, theta, offset, X, X2, xp)
        Kt, offset = _gram(node.transform, theta, offset, X, X2, xp)
        Kb, offset = _gram(node.bias, theta, offset, X, X2, xp)
        return Ks * Kt + Kb, offset
    raise TypeError(f"not a kernel node: {node!r}")


def _diag(node, theta, offset, shape, xp):
    if isinstance(node, Rbf):
        return xp.exp(theta[offset]) * xp.ones(shape, dtype=theta.dtype), offset + node.n_params
    if isinstance(node, (Sum, Product)):
        d1, offset = _diag(node.left, theta, offset, shape, xp)
        d2, offset = _diag(node.right, theta, offset, shape, xp)
        return (d1 + d2 if isinstance(node, Sum) else d1 * d2), offset
    if isinstance(node, NargpComposite):
        ds, offset = _diag(node.scale, theta, offset, shape, xp)
        dt, offset = _diag(node.transform, theta, offset, shape, xp)
        db, offset = _diag(node.bias, theta, offset, shape, xp)
        return ds * dt + db, offset
    raise TypeError(f"not a kernel node: {node!r}")


def gram_theta(spec: Kernel, theta, X, X2=None, xp=np):
    """Gram matrix with the log-hyperparameters supplied explicitly.

    ``xp`` is the array namespace (``numpy`` or ``torch``); leading batch
    dimensions of ``X`` and ``X2`` broadcast.
    """
    if X2 is None:
        X2 = X
    K, used = _gram(spec, theta, 0, X, X2, xp)
    if used != spec.n_params:
        raise ShapeError("parameter vector does not match kernel")
    return K


def gram_diag_theta(spec: Kernel, theta, X, xp=np):
    """``k(x_i, x_i)`` for every row of ``X`` (all kernels here are stationary)."""
    d, _ = _diag(spec, theta, 0, X.shape[:-1], xp)
    return d


def gram(spec: Kernel, X, X2=None) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(X[i], X2[j])``."""
    X = np.asarray(X, dtype=float)
    X2 = X if X2 is None else np.asarray(X2, dtype=float)
    if X.ndim < 2 or X2.ndim < 2:
        raise ShapeError("gram expects matrices of shape (n, d)")
    _check_inputs(spec, X, X2)
    return gram_theta(spec, spec.params, X, X2)


def gram_diag(spec: Kernel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    _check_inputs(spec, X, None)
    return gram_diag_theta(spec, spec.params, X)


def eval_kernel(spec: Kernel, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.ndim != 1 or x2.ndim != 1:
        raise ShapeError("eval_kernel expects two input vectors")
    if x.shape != x2.shape:
        raise ShapeError(f"input vectors differ in length: {x.size} vs {x2.size}")
    return float(gram(spec, x[None, :], x2[None, :])[0, 0])


def _gram_and_grad(node, theta, offset, X):
    if isinstance(node, Rbf):
        var = np.exp(theta[offset])
        nd = len(node.dims)
        if nd == 0:
            K = np.full((X.shape[0], X.shape[0]), var)
            return K, [K.copy()], offset + 1
        ls = np.exp(theta[offset + 1:offset + 1 + nd])
        A = X[:, list(node.dims)] / ls
        sq = (A[:, None, :] - A[None, :, :]) ** 2
        K = var * np.exp(-0.5 * sq.sum(-1))
        grads = [K] + [K * sq[:, :, i] for i in range(nd)]
        return K, grads, offset + 1 + nd
    if isinstance(node, (Sum, Product)):
        K1, g1, offset = _gram_and_grad(node.left, theta, offset, X)
        K2, g2, offset = _gram_and_grad(node.right, theta, offset, X)
        if isinstance(node, Sum):
            return K1 + K2, g1 + g2, offset
        return K1 * K2, [g * K2 for g in g1] + [K1 * g for g in g2], offset
    if isinstance(node, NargpComposite):
        Ks, gs, offset = _gram_and_grad(node.scale, theta, offset, X)
        Kt, gt, offset = _gram_and_grad(node.transform, theta, offset, X)
        Kb, gb, offset = _gram_and_grad(node.bias, theta, offset, X)
        grads = [g * Kt for g in gs] + [Ks * g for g in gt] + gb
        return Ks * Kt + Kb, grads, offset
    raise TypeError(f"not a kernel node: {node!r}")


def gram_and_grad(spec: Kernel, X, theta=None):
    """Return ``K(X, X)`` and the list of ``dK / d(log theta_k)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError("gram_grad expects a nonempty (n, d) matrix")
    _check_inputs(spec, X, None)
    theta = spec.params if theta is None else np.asarray(theta, dtype=float)
    K, grads, _ = _gram_and_grad(spec, theta, 0, X)
    return K, grads


def gram_grad(spec: Kernel, X) -> list[np.ndarray]:
    """Derivatives of ``gram(spec, X)`` with respect to each log-hyperparameter."""
    return gram_and_grad(spec, X)[1]


def describe(spec: Kernel) -> dict[str, Any]:
    """Named natural-scale hyperparameters, for reports."""
    return {name.replace("log_", ""): float(np.exp(v))
            for name, v in zip(spec.param_names, spec.params)}
