"""Multi-input models built from one-dimensional Fourier bases.

`AdditiveModel` sums independent one-dimensional processes, so its features
are block-independent and its Gram matrix is block diagonal.
`ProductModel` uses a separable product kernel; its features are Kronecker
products of the per-dimension features and its Gram matrix is the Kronecker
product of the per-dimension Gram matrices, with dimension 0 varying slowest.

Both classes expose the same small interface used by the inference code:
``feature_matrix``, ``kuu``, ``kdiag``, ``residual_diag``, ``log_params`` and
``with_log_params``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .features import FourierBasis, auto_bounds, build_kuu, feature_matrix
from .kernels import MaternKernel, Order
from .lowrank import KroneckerMatrix, LowRankPlusDiag, block_diag, kron_assemble


def _as_2d(X, dim: int):
    X = jnp.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if dim == 1 else X[None, :]
    if X.shape[1] != dim:
        raise ValueError(f"expected {dim} input columns, got {X.shape[1]}")
    return X


def _bases_from_data(X, num_frequencies, margin):
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    D = X.shape[1]
    Ms = [num_frequencies] * D if np.ndim(num_frequencies) == 0 else list(num_frequencies)
    return tuple(FourierBasis(*auto_bounds(X[:, d], margin), Ms[d]) for d in range(D))


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class AdditiveModel:
    """Sum of independent one-dimensional Matern processes, one per input."""

    kernels: tuple
    bases: tuple = field(metadata=dict(static=True))

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "bases", tuple(self.bases))
        if len(self.kernels) != len(self.bases):
            raise ValueError("need one kernel per basis")

    @classmethod
    def single(cls, basis: FourierBasis, kernel: MaternKernel) -> "AdditiveModel":
        return cls((kernel,), (basis,))

    @classmethod
    def from_data(cls, X, order, num_frequencies, variance=1.0, lengthscale=1.0,
                  margin=0.75) -> "AdditiveModel":
        bases = _bases_from_data(X, num_frequencies, margin)
        kernels = tuple(MaternKernel(Order.parse(order), variance, lengthscale) for _ in bases)
        return cls(kernels, bases)

    @property
    def dim(self) -> int:
        return len(self.bases)

    @property
    def num_features(self) -> int:
        return sum(b.num_features for b in self.bases)

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for b in self.bases:
            out.append(slice(start, start + b.num_features))
            start += b.num_features
        return out

    def contains(self, X) -> bool:
        X = np.asarray(_as_2d(X, self.dim))
        return all(b.contains(X[:, d]) for d, b in enumerate(self.bases))

    def feature_factors(self, X):
        X = _as_2d(X, self.dim)
        return [feature_matrix(b, k, X[:, d]) for d, (b, k) in enumerate(zip(self.bases, self.kernels))]

    def feature_matrix(self, X):
        return jnp.concatenate(self.feature_factors(X), axis=1)

    def kuu(self) -> LowRankPlusDiag:
        blocks = [build_kuu(b, k) for b, k in zip(self.bases, self.kernels)]
        return blocks[0] if len(blocks) == 1 else block_diag(blocks)

    def kdiag(self, X):
        X = _as_2d(X, self.dim)
        return sum(k.variance for k in self.kernels) * jnp.ones(X.shape[0])

    def residual_diag(self, X, kuu=None):
        """``k(x, x) - k_u(x)^T Kuu^{-1} k_u(x)`` at every row of ``X``."""
        kuu = self.kuu() if kuu is None else kuu
        return self.kdiag(X) - kuu.inv_quad_diag(self.feature_matrix(X))

    def component_mean(self, Kinv_m, X, d: int):
        """Contribution of dimension ``d`` to ``k_u(x)^T Kuu^{-1} m``."""
        sl = self.block_slices()[d]
        X = _as_2d(X, self.dim)
        Phi = feature_matrix(self.bases[d], self.kernels[d], X[:, d])
        return Phi @ Kinv_m[sl]

    def log_params(self):
        return jnp.concatenate([
            jnp.stack([jnp.log(k.variance) for k in self.kernels]),
            jnp.stack([jnp.log(k.lengthscale) for k in self.kernels]),
        ])

    def with_log_params(self, theta) -> "AdditiveModel":
        D = self.dim
        kernels = tuple(
            k.replace(variance=jnp.exp(theta[d]), lengthscale=jnp.exp(theta[D + d]))
            for d, k in enumerate(self.kernels)
        )
        return AdditiveModel(kernels, self.bases)

    def param_names(self) -> list[str]:
        D = self.dim
        return [f"variance_{d}" for d in range(D)] + [f"lengthscale_{d}" for d in range(D)]


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class ProductModel:
    """Separable product of one-dimensional Matern kernels.

    Only the overall variance is identifiable, so it is carried by the first
    kernel; the variances of the other kernels are fixed at construction.
    """

    kernels: tuple
    bases: tuple = field(metadata=dict(static=True))

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "bases", tuple(self.bases))
        if len(self.kernels) != len(self.bases):
            raise ValueError("need one kernel per basis")

    @classmethod
    def from_data(cls, X, order, num_frequencies, variance=1.0, lengthscale=1.0,
                  margin=0.75) -> "ProductModel":
        bases = _bases_from_data(X, num_frequencies, margin)
        kernels = tuple(
            MaternKernel(Order.parse(order), variance if d == 0 else 1.0, lengthscale)
            for d in range(len(bases))
        )
        return cls(kernels, bases)

    @property
    def dim(self) -> int:
        return len(self.bases)

    @property
    def factor_sizes(self) -> tuple[int, ...]:
        return tuple(b.num_features for b in self.bases)

    @property
    def num_features(self) -> int:
        return int(np.prod(self.factor_sizes))

    @property
    def variance(self):
        out = 1.0
        for k in self.kernels:
            out = out * k.variance
        return out

    def contains(self, X) -> bool:
        X = np.asarray(_as_2d(X, self.dim))
        return all(b.contains(X[:, d]) for d, b in enumerate(self.bases))

    def feature_factors(self, X):
        X = _as_2d(X, self.dim)
        return [feature_matrix(b, k, X[:, d]) for d, (b, k) in enumerate(zip(self.bases, self.kernels))]

    def feature_matrix(self, X):
        """Row-wise Kronecker product of the per-dimension feature matrices."""
        factors = self.feature_factors(X)
        out = factors[0]
        for Phi in factors[1:]:
            out = (out[:, :, None] * Phi[:, None, :]).reshape(out.shape[0], -1)
        return out

    def kuu_factors(self) -> list[LowRankPlusDiag]:
        return [build_kuu(b, k) for b, k in zip(self.bases, self.kernels)]

    def kuu(self) -> KroneckerMatrix:
        return kron_assemble(self.kuu_factors())

    def kdiag(self, X):
        X = _as_2d(X, self.dim)
        return self.variance * jnp.ones(X.shape[0])

    def residual_diag(self, X, kuu=None):
        kuu = self.kuu() if kuu is None else kuu
        return self.kdiag(X) - kuu.inv_quad_diag_factors(self.feature_factors(X))

    def log_params(self):
        return jnp.concatenate([
            jnp.log(jnp.atleast_1d(self.kernels[0].variance)),
            jnp.stack([jnp.log(k.lengthscale) for k in self.kernels]),
        ])

    def with_log_params(self, theta) -> "ProductModel":
        kernels = []
        for d, k in enumerate(self.kernels):
            changes = dict(lengthscale=jnp.exp(theta[1 + d]))
            if d == 0:
                changes["variance"] = jnp.exp(theta[0])
            kernels.append(k.replace(**changes))
        return ProductModel(tuple(kernels), self.bases)

    def param_names(self) -> list[str]:
        return ["variance"] + [f"lengthscale_{d}" for d in range(self.dim)]


def additive_feature_vector(model: AdditiveModel, x):
    """Block-concatenated features of a single D-dimensional input."""
    return model.feature_matrix(jnp.reshape(jnp.asarray(x, dtype=float), (1, model.dim)))[0]


def product_feature_vector(model: ProductModel, x):
    """Kronecker-ordered features of a single input, dimension 0 slowest."""
    return model.feature_matrix(jnp.reshape(jnp.asarray(x, dtype=float), (1, model.dim)))[0]


def as_model(obj):
    """Accept a model, or a ``(basis, kernel)`` pair for the 1D case."""
    if isinstance(obj, (AdditiveModel, ProductModel)):
        return obj
    if isinstance(obj, Sequence) and len(obj) == 2:
        basis, kernel = obj
        if isinstance(basis, MaternKernel):
            basis, kernel = kernel, basis
        return AdditiveModel.single(basis, kernel)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a model")
