"""Diagonal-plus-low-rank matrices and lazy Kronecker products.

A `LowRankPlusDiag` stores ``diag(alpha) + B B^T`` with a thin ``B`` (a
handful of columns). Solves and log-determinants go through the Woodbury
identity and the matrix determinant lemma, so they cost ``O(K R^2 + R^3)``
per right-hand side instead of ``O(K^3)``.

No jitter is ever added here: a capacitance matrix that fails to factor is
reported as a `NumericalError`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve, solve_triangular

from .exceptions import NumericalError


def _is_concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


def _is_arraylike(x) -> bool:
    return isinstance(x, (np.ndarray, jax.Array, list, tuple, float, int))


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class LowRankPlusDiag:
    """The symmetric matrix ``diag(alpha) + B @ B.T``.

    Parameters
    ----------
    alpha : array, shape (K,)
        Strictly positive diagonal.
    B : array, shape (K, R)
        Columns are the rank-one vectors. ``R`` may be zero.
    """

    alpha: jax.Array
    B: jax.Array

    def __post_init__(self):
        # jax rebuilds pytrees with placeholder leaves; only coerce real arrays
        if not (_is_arraylike(self.alpha) and _is_arraylike(self.B)):
            return
        alpha = jnp.asarray(self.alpha, dtype=float)
        B = jnp.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != alpha.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows but alpha has {alpha.shape[0]}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "B", B)

    @property
    def size(self) -> int:
        return self.alpha.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.size, self.size)

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    def dense(self):
        return jnp.diag(self.alpha) + self.B @ self.B.T

    def diag(self):
        return self.alpha + jnp.sum(self.B**2, axis=1)

    def matvec(self, x):
        x = jnp.asarray(x)
        if x.ndim == 1:
            return self.alpha * x + self.B @ (self.B.T @ x)
        return self.alpha[:, None] * x + self.B @ (self.B.T @ x)

    def _capacitance_cholesky(self):
        # C = I + B^T diag(alpha)^-1 B, an R x R SPD matrix
        DB = self.B / self.alpha[:, None]
        C = jnp.eye(self.rank) + self.B.T @ DB
        return DB, jnp.linalg.cholesky(C)

    def solve(self, Y):
        """``A^{-1} Y`` for a vector or a (K, C) matrix."""
        Y = jnp.asarray(Y, dtype=float)
        vec = Y.ndim == 1
        if vec:
            Y = Y[:, None]
        DY = Y / self.alpha[:, None]
        if self.rank:
            DB, LC = self._capacitance_cholesky()
            DY = DY - DB @ cho_solve((LC, True), self.B.T @ DY)
        return DY[:, 0] if vec else DY

    def logdet(self):
        out = jnp.sum(jnp.log(self.alpha))
        if self.rank:
            _, LC = self._capacitance_cholesky()
            out = out + 2.0 * jnp.sum(jnp.log(jnp.diag(LC)))
        return out

    def inv_quad_diag(self, Phi, Phi_sq=None):
        """Row-wise ``phi_n^T A^{-1} phi_n`` for ``Phi`` of shape (N, K).

        ``Phi_sq`` may hold a precomputed ``Phi**2``; the diagonal part is then
        a matrix-vector product and no (N, K) temporary is built.
        """
        if Phi_sq is None:
            out = jnp.sum(Phi**2 / self.alpha, axis=1)
        else:
            out = Phi_sq @ (1.0 / self.alpha)
        if self.rank:
            DB, LC = self._capacitance_cholesky()
            # one matrix-vector product per rank column; XLA's CPU matmul for a
            # tall (N, K) x (K, R) product with tiny R scales worse in N
            PDB = jnp.stack([Phi @ DB[:, r] for r in range(self.rank)])
            W = solve_triangular(LC, PDB, lower=True)
            out = out - jnp.sum(W**2, axis=0)
        return out

    def sqrt(self) -> "StructuredSqrt":
        return StructuredSqrt(jnp.sqrt(self.alpha), self.B)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class StructuredSqrt:
    """The K x (K + R) factor ``[diag(alpha)^{1/2}, B]``.

    Multiplying a standard-normal vector of length ``K + R`` by this factor
    gives a draw with covariance ``diag(alpha) + B B^T``.
    """

    alpha_sqrt: jax.Array
    B: jax.Array

    @property
    def size(self) -> int:
        return self.alpha_sqrt.shape[0]

    @property
    def extra(self) -> int:
        return self.B.shape[1]

    @property
    def num_inputs(self) -> int:
        return self.size + self.extra

    def dense(self):
        return jnp.concatenate([jnp.diag(self.alpha_sqrt), self.B], axis=1)

    def matvec(self, v):
        v = jnp.asarray(v)
        head, tail = v[: self.size], v[self.size :]
        if v.ndim == 1:
            return self.alpha_sqrt * head + self.B @ tail
        return self.alpha_sqrt[:, None] * head + self.B @ tail


def _check_capacitance(A: LowRankPlusDiag):
    if not _is_concrete(A.alpha) or not A.rank:
        return
    if not bool(jnp.all(A.alpha > 0)):
        raise NumericalError("diagonal of a LowRankPlusDiag must be positive")
    _, LC = A._capacitance_cholesky()
    if not bool(jnp.all(jnp.isfinite(LC))):
        raise NumericalError(
            "capacitance matrix I + B^T diag(alpha)^-1 B is numerically singular; "
            "check alpha and B"
        )


def solve(A, Y):
    """Solve ``A X = Y`` for a structured ``A``."""
    if isinstance(A, LowRankPlusDiag):
        _check_capacitance(A)
    out = A.solve(Y)
    if _is_concrete(out) and not bool(jnp.all(jnp.isfinite(out))):
        raise NumericalError("structured solve produced non-finite values")
    return out


def logdet(A):
    """Log-determinant of a structured SPD matrix."""
    if isinstance(A, LowRankPlusDiag):
        _check_capacitance(A)
    return A.logdet()


def structured_sqrt(A):
    """Rectangular square root ``R`` with ``R R^T = A``."""
    return A.sqrt()


def block_diag(blocks: Sequence[LowRankPlusDiag]) -> LowRankPlusDiag:
    """Block-diagonal stack of diagonal-plus-low-rank blocks.

    The result is again diagonal plus low rank, with the rank-one columns of
    each block padded by zeros outside that block.
    """
    alpha = jnp.concatenate([b.alpha for b in blocks])
    total_rank = sum(b.rank for b in blocks)
    B = jnp.zeros((alpha.shape[0], total_rank))
    row = col = 0
    for b in blocks:
        B = B.at[row : row + b.size, col : col + b.rank].set(b.B)
        row += b.size
        col += b.rank
    return LowRankPlusDiag(alpha, B)


def _apply_along(x, axis: int, op):
    """Apply a (K_d -> K_d') linear map along one axis of a tensor."""
    x = jnp.moveaxis(x, axis, 0)
    shape = x.shape
    y = op(x.reshape(shape[0], -1))
    return jnp.moveaxis(y.reshape((y.shape[0],) + shape[1:]), 0, axis)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class KroneckerMatrix:
    """Lazy ``A_0 kron A_1 kron ... kron A_{D-1}``.

    Index ordering follows `numpy.kron`: dimension 0 varies slowest. The
    dense product is never formed except by `dense`, which exists for tests.
    """

    factors: tuple

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.size for f in self.factors)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.size, self.size)

    def _map(self, x, method):
        x = jnp.asarray(x, dtype=float)
        vec = x.ndim == 1
        cols = 1 if vec else x.shape[1]
        t = x.reshape(self.dims + (cols,))
        for d, f in enumerate(self.factors):
            t = _apply_along(t, d, getattr(f, method))
        t = t.reshape(-1, cols)
        return t[:, 0] if vec else t

    def matvec(self, x):
        return self._map(x, "matvec")

    def solve(self, Y):
        return self._map(Y, "solve")

    def logdet(self):
        n = self.size
        return sum(n // f.size * f.logdet() for f in self.factors)

    def diag(self):
        return reduce(jnp.kron, [f.diag() for f in self.factors])

    def dense(self):
        return reduce(jnp.kron, [f.dense() for f in self.factors])

    def inv_quad_diag(self, Phi):
        """Row-wise ``phi_n^T A^{-1} phi_n`` for a dense (N, K) ``Phi``."""
        return jnp.sum(Phi * self.solve(Phi.T).T, axis=1)

    def inv_quad_diag_factors(self, Phis):
        """Row-wise ``phi_n^T A^{-1} phi_n`` where ``phi_n`` is the Kronecker
        product of the rows of the per-dimension feature matrices."""
        out = 1.0
        for f, Phi in zip(self.factors, Phis):
            out = out * f.inv_quad_diag(Phi)
        return out

    def sqrt(self) -> "KroneckerSqrt":
        return KroneckerSqrt(tuple(f.sqrt() for f in self.factors))


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class KroneckerSqrt:
    """Kronecker product of rectangular square roots."""

    factors: tuple

    @property
    def size(self) -> int:
        return int(np.prod([f.size for f in self.factors]))

    @property
    def num_inputs(self) -> int:
        return int(np.prod([f.num_inputs for f in self.factors]))

    def matvec(self, v):
        v = jnp.asarray(v)
        vec = v.ndim == 1
        cols = 1 if vec else v.shape[1]
        t = v.reshape(tuple(f.num_inputs for f in self.factors) + (cols,))
        for d, f in enumerate(self.factors):
            t = _apply_along(t, d, f.matvec)
        t = t.reshape(-1, cols)
        return t[:, 0] if vec else t

    def dense(self):
        return reduce(jnp.kron, [f.dense() for f in self.factors])


def kron_assemble(blocks: Sequence) -> KroneckerMatrix:
    """Wrap per-dimension matrices as a lazy Kronecker product."""
    blocks = tuple(blocks)
    if not blocks:
        raise ValueError("need at least one block")
    return KroneckerMatrix(blocks)


def dense_cholesky(A, jitter: float = 0.0):
    """Lower Cholesky factor of the dense form of a structured matrix.

    For a Kronecker product the factor is the Kronecker product of the
    per-factor Cholesky factors, which is again lower triangular.
    """
    if isinstance(A, KroneckerMatrix):
        chols = [dense_cholesky(f, jitter) for f in A.factors]
        return reduce(jnp.kron, chols)
    dense = A.dense() if hasattr(A, "dense") else jnp.asarray(A)
    if jitter:
        dense = dense + jitter * jnp.eye(dense.shape[0])
    L = jnp.linalg.cholesky(dense)
    if _is_concrete(L) and not bool(jnp.all(jnp.isfinite(L))):
        raise NumericalError(
            "Cholesky factorization failed; the matrix is not numerically positive "
            "definite (a small jitter of at most 1e-8 * mean(diag) may help)"
        )
    return L
