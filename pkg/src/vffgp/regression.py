"""Conjugate regression with Fourier features.

With a Gaussian likelihood the optimal ``q(u)`` is Gaussian and available in
closed form. Everything needed from the data is a handful of products
(``Kuf Kfu``, ``Kuf y``, ``y^T y``) that are accumulated in one pass; inside
``[a, b]`` they do not depend on the kernel hyperparameters, so the
hyperparameter search never touches the data again.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .exceptions import DataError, NumericalError
from .likelihoods import GaussianLikelihood
from .lowrank import dense_cholesky
from .multidim import as_model

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class GaussianState:
    """Gaussian over inducing variables, ``N(mean, cov_factor cov_factor^T)``."""

    mean: jax.Array
    cov_factor: jax.Array

    @property
    def cov(self):
        return self.cov_factor @ self.cov_factor.T


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class SufficientStats:
    KufKfu: jax.Array
    Kufy: jax.Array
    yy: float
    trace_kff: float
    N: int = field(metadata=dict(static=True))

    def with_trace(self, trace_kff) -> "SufficientStats":
        return SufficientStats(self.KufKfu, self.Kufy, self.yy, trace_kff, self.N)


def _check_data(X, y, dim):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None] if dim == 1 else X.reshape(-1, dim)
    if X.shape[0] != y.shape[0]:
        raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        bad = np.flatnonzero(~(np.all(np.isfinite(X), axis=1) & np.isfinite(y)))
        raise DataError(f"non-finite values in data rows {bad[:10].tolist()}")
    return X, y


def accumulate_stats(model, X, y, chunk_size: int = 20000,
                     allow_outside: bool = False) -> SufficientStats:
    """One streaming pass over the rows of ``(X, y)``.

    Chunks are reduced in a fixed order so the result is deterministic.
    Inputs outside the model's boundary are rejected unless
    ``allow_outside`` is set, in which case the stats depend on the
    lengthscales and must be recomputed when they change.
    """
    model = as_model(model)
    X, y = _check_data(X, y, model.dim)
    if X.shape[0] and not allow_outside and not model.contains(X):
        raise DataError("inputs lie outside the feature interval; widen the bounds "
                        "or pass allow_outside=True")
    K = model.num_features
    Psi = np.zeros((K, K))
    c = np.zeros(K)
    for start in range(0, X.shape[0], chunk_size):
        Phi = np.asarray(model.feature_matrix(X[start:start + chunk_size]))
        yc = y[start:start + chunk_size]
        Psi += Phi.T @ Phi
        c += Phi.T @ yc
    N = int(X.shape[0])
    trace = float(np.sum(np.asarray(model.kdiag(X)))) if N else 0.0
    return SufficientStats(jnp.asarray(Psi), jnp.asarray(c), float(y @ y), trace, N)


def _stats_traced(model, X, y) -> SufficientStats:
    Phi = model.feature_matrix(X)
    return SufficientStats(Phi.T @ Phi, Phi.T @ y, jnp.dot(y, y),
                           jnp.sum(model.kdiag(X)), int(X.shape[0]))


def _check_jitter(kuu, jitter):
    if not jitter:
        return 0.0
    cap = 1e-8 * float(jnp.mean(kuu.diag()))
    if jitter > cap:
        raise ValueError(f"jitter {jitter:g} exceeds the cap 1e-8 * mean(diag) = {cap:g}")
    logger.warning("adding jitter %g to the Kuu diagonal", jitter)
    return jitter


def _factors(stats, kuu, lik, jitter=0.0):
    # Work in the basis whitened by L = chol(Kuu): P = L^-1 Kuf Kfu L^-T.
    L = dense_cholesky(kuu, jitter)
    s2 = lik.noise_variance
    LiPsi = solve_triangular(L, stats.KufKfu, lower=True)
    P = solve_triangular(L, LiPsi.T, lower=True)
    P = 0.5 * (P + P.T)
    Bm = jnp.eye(P.shape[0]) + P / s2
    LB = jnp.linalg.cholesky(Bm)
    c_tilde = solve_triangular(LB, solve_triangular(L, stats.Kufy, lower=True), lower=True)
    return L, P, LB, c_tilde


def collapsed_elbo(stats: SufficientStats, kuu, lik: GaussianLikelihood, jitter: float = 0.0):
    """ELBO with the optimal Gaussian ``q(u)`` substituted.

    Equals ``log N(y | 0, Q + s2 I) - tr(Kff - Q) / (2 s2)`` with
    ``Q = Kfu Kuu^{-1} Kuf``, evaluated in the K-dimensional feature space
    through the Woodbury identity and the determinant lemma.
    """
    if stats.N == 0:
        return jnp.asarray(0.0)
    L, P, LB, c_tilde = _factors(stats, kuu, lik, jitter)
    s2 = lik.noise_variance
    N = stats.N
    logdet = N * jnp.log(s2) + 2.0 * jnp.sum(jnp.log(jnp.diag(LB)))
    quad = stats.yy / s2 - jnp.sum(c_tilde**2) / s2**2
    trace = (stats.trace_kff - jnp.trace(P)) / s2
    return -0.5 * (N * LOG_2PI + logdet + quad + trace)


def optimal_posterior(stats: SufficientStats, kuu, lik: GaussianLikelihood,
                      jitter: float = 0.0) -> GaussianState:
    """Optimal ``q(u) = N(m, S)`` for a Gaussian likelihood.

    Computed as ``S = L (I + P/s2)^{-1} L^T`` and ``m = L LB^{-T} c~ / s2``,
    algebraically equal to ``S = (Kuu^-1 + Kuu^-1 Kuf Kfu Kuu^-1 / s2)^-1``
    and ``m = S Kuu^-1 Kuf y / s2``.
    """
    L, P, LB, c_tilde = _factors(stats, kuu, lik, jitter)
    s2 = lik.noise_variance
    LLB = solve_triangular(LB, L.T, lower=True).T  # L LB^{-T}
    mean = LLB @ c_tilde / s2
    S = LLB @ LLB.T
    S = 0.5 * (S + S.T)
    factor = jnp.linalg.cholesky(S)
    if not bool(jnp.all(jnp.isfinite(factor))):
        raise NumericalError("posterior covariance is not numerically positive definite; "
                             "consider a small jitter")
    return GaussianState(mean, factor)


def prior_state(kuu) -> GaussianState:
    L = dense_cholesky(kuu)
    return GaussianState(jnp.zeros(L.shape[0]), L)


def predict(state: GaussianState, kuu, model, Xstar):
    """Predictive mean and variance of ``f`` at ``Xstar``.

    ``mean = k_u^T Kuu^{-1} m`` and
    ``var = k(x,x) - k_u^T Kuu^{-1} k_u + |L^T Kuu^{-1} k_u|^2``; the first
    two terms are the residual variance, which is non-negative.
    """
    model = as_model(model)
    Xstar = jnp.asarray(Xstar, dtype=float)
    if Xstar.ndim == 1:
        Xstar = Xstar.reshape(-1, model.dim)
    if Xstar.shape[0] == 0:
        return jnp.zeros(0), jnp.zeros(0)
    Phi = model.feature_matrix(Xstar)
    W = kuu.solve(Phi.T)
    mean = W.T @ state.mean
    resid = jnp.maximum(model.residual_diag(Xstar, kuu), 0.0)
    var = resid + jnp.sum((state.cov_factor.T @ W) ** 2, axis=0)
    return mean, var


def _total_variance(model):
    return model.kdiag(jnp.zeros((1, model.dim)))[0]


def _neg_elbo(theta, model, stats, X, y, jitter):
    m = model.with_log_params(theta[:-1])
    lik = GaussianLikelihood(jnp.exp(theta[-1]))
    if X is None:
        st = stats.with_trace(stats.N * _total_variance(m))
    else:
        st = _stats_traced(m, X, y)
    return -collapsed_elbo(st, m.kuu(), lik, jitter)


_neg_elbo_and_grad = jax.jit(jax.value_and_grad(_neg_elbo), static_argnums=(5,))


def hyperparameter_objective_and_gradient(params, model, stats=None, X=None, y=None,
                                          jitter: float = 0.0):
    """Negative collapsed ELBO and its gradient in log-parameter space.

    ``params`` is ``model.log_params()`` followed by the log noise variance.
    Pass ``stats`` when all inputs lie inside the boundary, otherwise the
    raw data, from which the stats are rebuilt at every call.
    """
    model = as_model(model)
    params = jnp.asarray(params, dtype=float)
    if not bool(jnp.all(jnp.isfinite(params))):
        raise NumericalError("non-finite hyperparameters")
    if stats is not None and stats.N == 0:
        return 0.0, np.zeros(params.shape[0])
    if X is not None:
        X = jnp.asarray(X, dtype=float).reshape(-1, model.dim)
        y = jnp.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] == 0:
            return 0.0, np.zeros(params.shape[0])
    value, grad = _neg_elbo_and_grad(params, model, stats, X, y, float(jitter))
    value = float(value)
    grad = np.asarray(grad)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise NumericalError(f"non-finite objective at log-parameters {np.asarray(params)}")
    return value, grad


@dataclass
class RegressionFit:
    model: object
    likelihood: GaussianLikelihood
    state: GaussianState
    kuu: object
    elbo: float
    converged: bool
    iterations: int
    message: str
    wall_time: float

    def predict(self, Xstar):
        return predict(self.state, self.kuu, self.model, Xstar)

    def hyperparameters(self) -> dict:
        theta = np.exp(np.asarray(self.model.log_params()))
        out = dict(zip(self.model.param_names(), theta.tolist()))
        out["noise_variance"] = float(self.likelihood.noise_variance)
        return out


def fit(model, X, y, noise_variance: float = 0.1, optimize: bool = True,
        maxiter: int = 1000, gtol: float = 1e-6, allow_outside: bool = False,
        jitter: float = 0.0) -> RegressionFit:
    """Fit hyperparameters by maximizing the collapsed ELBO with L-BFGS-B."""
    t0 = time.perf_counter()
    model = as_model(model)
    X, y = _check_data(X, y, model.dim)
    outside = X.shape[0] > 0 and not model.contains(X)
    if outside and not allow_outside:
        raise DataError("inputs lie outside the feature interval; widen the bounds "
                        "or pass allow_outside=True")
    stats = None if outside else accumulate_stats(model, X, y)
    jitter = _check_jitter(model.kuu(), jitter)
    theta0 = np.concatenate([np.asarray(model.log_params()), [math.log(noise_variance)]])
    converged, iterations, message = True, 0, "hyperparameters fixed"
    theta = theta0
    if optimize and X.shape[0]:
        Xj = jnp.asarray(X) if outside else None
        yj = jnp.asarray(y) if outside else None
        res = minimize(hyperparameter_objective_and_gradient, theta0,
                       args=(model, stats, Xj, yj, jitter), jac=True, method="L-BFGS-B",
                       options=dict(maxiter=maxiter, gtol=gtol))
        theta, converged, iterations, message = res.x, bool(res.success), int(res.nit), str(res.message)
    model = model.with_log_params(jnp.asarray(theta[:-1]))
    lik = GaussianLikelihood(float(np.exp(theta[-1])))
    if outside:
        stats = accumulate_stats(model, X, y, allow_outside=True)
    else:
        stats = stats.with_trace(float(np.sum(np.asarray(model.kdiag(X)))) if X.shape[0] else 0.0)
    kuu = model.kuu()
    state = optimal_posterior(stats, kuu, lik, jitter)
    elbo = float(collapsed_elbo(stats, kuu, lik, jitter))
    return RegressionFit(model, lik, state, kuu, elbo, converged, iterations, message,
                         time.perf_counter() - t0)
