"""Gaussian variational inference for non-conjugate likelihoods.

``q(u) = N(m, S)`` is optimized against the ELBO

    sum_n E_{q(f_n)}[log p(y_n | f_n)] - KL[q(u) || p(u)],

where ``q(f_n)`` is the Gaussian marginal of the approximate process at
``x_n``. Three parameterizations of ``S`` are supported:

* `FreeFormCovariance`: ``S = L L^T`` with a dense lower-triangular ``L``;
* `KronCovariance`: ``S = kron_d L_d L_d^T`` (product models only);
* `KronSumCovariance`: ``S = kron_d L_d L_d^T + kron_d J_d J_d^T``.

Triangular factors are stored with their diagonal on the log scale.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import reduce, partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree
from scipy.optimize import minimize

from .exceptions import NumericalError
from .likelihoods import DEFAULT_NODES, expected_log_likelihood
from .lowrank import KroneckerMatrix, dense_cholesky
from .multidim import ProductModel, as_model

KRONSUM_INIT_SCALE = 0.5


def tril_from_raw(raw):
    return jnp.tril(raw, -1) + jnp.diag(jnp.exp(jnp.diag(raw)))


def raw_from_tril(L):
    L = jnp.asarray(L, dtype=float)
    return jnp.tril(L, -1) + jnp.diag(jnp.log(jnp.diag(L)))


def _row_kron(mats):
    """Row-wise Kronecker product of (N, K_d) matrices, dimension 0 slowest."""
    out = mats[0]
    for A in mats[1:]:
        out = (out[:, :, None] * A[:, None, :]).reshape(out.shape[0], -1)
    return out


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class FreeFormCovariance:
    raw: jax.Array

    def factor(self):
        return tril_from_raw(self.raw)

    def dense(self):
        L = self.factor()
        return L @ L.T

    def logdet(self):
        return 2.0 * jnp.sum(jnp.diag(self.raw))

    def trace_inv(self, kuu):
        L = self.factor()
        return jnp.sum(L * kuu.solve(L))


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class KronCovariance:
    raws: tuple

    def factors(self):
        return [tril_from_raw(r) for r in self.raws]

    def dense(self):
        return reduce(jnp.kron, [L @ L.T for L in self.factors()])

    def logdet(self):
        sizes = [r.shape[0] for r in self.raws]
        K = int(np.prod(sizes))
        return sum(K // k * 2.0 * jnp.sum(jnp.diag(r)) for k, r in zip(sizes, self.raws))

    def trace_inv(self, kuu: KroneckerMatrix):
        out = 1.0
        for A, L in zip(kuu.factors, self.factors()):
            out = out * jnp.sum(L * A.solve(L))
        return out


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class KronSumCovariance:
    """``S = kron_d L_d L_d^T + kron_d J_d J_d^T``."""

    L_raws: tuple
    J_raws: tuple

    def factors(self):
        return [tril_from_raw(r) for r in self.L_raws], [tril_from_raw(r) for r in self.J_raws]

    def dense(self):
        Ls, Js = self.factors()
        return reduce(jnp.kron, [L @ L.T for L in Ls]) + reduce(jnp.kron, [J @ J.T for J in Js])

    def logdet(self):
        # S = Lk (I + kron_d G_d) Lk^T with G_d = L_d^-1 J_d J_d^T L_d^-T; the
        # eigenvalues of kron_d G_d are products of per-dimension eigenvalues.
        Ls, Js = self.factors()
        sizes = [L.shape[0] for L in Ls]
        K = int(np.prod(sizes))
        out = sum(K // k * 2.0 * jnp.sum(jnp.diag(r)) for k, r in zip(sizes, self.L_raws))
        eigs = []
        for L, J in zip(Ls, Js):
            H = jax.scipy.linalg.solve_triangular(L, J, lower=True)
            eigs.append(jnp.linalg.eigvalsh(H @ H.T))
        return out + jnp.sum(jnp.log1p(reduce(jnp.kron, eigs)))

    def trace_inv(self, kuu: KroneckerMatrix):
        Ls, Js = self.factors()
        tL = tJ = 1.0
        for A, L, J in zip(kuu.factors, Ls, Js):
            tL = tL * jnp.sum(L * A.solve(L))
            tJ = tJ * jnp.sum(J * A.solve(J))
        return tL + tJ


def as_covariance(cov):
    """Wrap a plain lower-triangular factor as a `FreeFormCovariance`."""
    if isinstance(cov, (FreeFormCovariance, KronCovariance, KronSumCovariance)):
        return cov
    return FreeFormCovariance(raw_from_tril(cov))


def marginal_q_f(mean, cov, model, X, kuu=None):
    """Mean and variance of ``q(f(x_n))`` at every row of ``X``.

    ``mu = k_u^T Kuu^{-1} m`` and
    ``v = k(x,x) - k_u^T Kuu^{-1} k_u + k_u^T Kuu^{-1} S Kuu^{-1} k_u``.
    """
    model = as_model(model)
    cov = as_covariance(cov)
    kuu = model.kuu() if kuu is None else kuu
    X = jnp.asarray(X, dtype=float).reshape(-1, model.dim)
    if isinstance(model, ProductModel):
        Phis = model.feature_factors(X)
        Ws = [A.solve(P.T) for A, P in zip(kuu.factors, Phis)]
        mu = _row_kron(Phis) @ kuu.solve(mean)
        resid = model.kdiag(X) - reduce(jnp.multiply, [jnp.sum(P.T * W, 0) for P, W in zip(Phis, Ws)])
        if isinstance(cov, FreeFormCovariance):
            W = _row_kron([W.T for W in Ws]).T
            quad = jnp.sum((cov.factor().T @ W) ** 2, axis=0)
        elif isinstance(cov, KronCovariance):
            quad = reduce(jnp.multiply, [jnp.sum((L.T @ W) ** 2, 0) for L, W in zip(cov.factors(), Ws)])
        else:
            Ls, Js = cov.factors()
            quad = (reduce(jnp.multiply, [jnp.sum((L.T @ W) ** 2, 0) for L, W in zip(Ls, Ws)])
                    + reduce(jnp.multiply, [jnp.sum((J.T @ W) ** 2, 0) for J, W in zip(Js, Ws)]))
        return mu, resid + quad
    if not isinstance(cov, FreeFormCovariance):
        raise TypeError("Kronecker covariances require a ProductModel")
    Phi = model.feature_matrix(X)
    W = kuu.solve(Phi.T)
    mu = W.T @ mean
    resid = model.kdiag(X) - kuu.inv_quad_diag(Phi)
    quad = jnp.sum((cov.factor().T @ W) ** 2, axis=0)
    return mu, resid + quad


def kl_q_p(mean, cov, kuu):
    """``KL[N(m, S) || N(0, Kuu)]`` using structured traces and determinants."""
    cov = as_covariance(cov)
    K = mean.shape[0]
    maha = jnp.dot(mean, kuu.solve(mean))
    return 0.5 * (cov.trace_inv(kuu) + maha - K + kuu.logdet() - cov.logdet())


def init_params(model, lik, covariance: str = "full"):
    """Prior-like initialization: ``m = 0`` and ``S = Kuu`` (the Kronecker
    sum starts at ``(1 + KRONSUM_INIT_SCALE^(2D)) Kuu``)."""
    model = as_model(model)
    kuu = model.kuu()
    K = model.num_features
    if covariance == "full":
        cov = FreeFormCovariance(raw_from_tril(dense_cholesky(kuu)))
    elif covariance in ("kron", "kronsum"):
        if not isinstance(model, ProductModel):
            raise TypeError("Kronecker covariances require a ProductModel")
        L_raws = tuple(raw_from_tril(dense_cholesky(A)) for A in kuu.factors)
        if covariance == "kron":
            cov = KronCovariance(L_raws)
        else:
            # J must start away from zero: the gradient with respect to J is
            # proportional to J, so J = 0 is a stationary point.
            J_raws = tuple(raw_from_tril(KRONSUM_INIT_SCALE * dense_cholesky(A))
                           for A in kuu.factors)
            cov = KronSumCovariance(L_raws, J_raws)
    else:
        raise ValueError(f"unknown covariance {covariance!r}")
    return dict(mean=jnp.zeros(K), cov=cov, hyper=model.log_params(), lik=lik.log_params())


def elbo(params, model, lik, X, y, num_nodes: int = DEFAULT_NODES, scale: float = 1.0):
    """ELBO at ``params``; the data term is multiplied by ``scale``.

    For a minibatch of size ``b`` out of ``N`` rows, ``scale = N / b``
    gives an unbiased estimate of the full-data ELBO.
    """
    model = as_model(model).with_log_params(params["hyper"])
    lik = lik.with_log_params(params["lik"])
    kuu = model.kuu()
    mu, var = marginal_q_f(params["mean"], params["cov"], model, X, kuu)
    ell = jnp.sum(expected_log_likelihood(lik, y, mu, var, num_nodes))
    return scale * ell - kl_q_p(params["mean"], params["cov"], kuu)


@partial(jax.jit, static_argnames=("num_nodes",))
def _elbo_and_grad(params, model, lik, X, y, num_nodes, scale):
    return jax.value_and_grad(elbo)(params, model, lik, X, y, num_nodes, scale)


def elbo_and_gradients(params, model, lik, X, y, num_nodes: int = DEFAULT_NODES,
                       scale: float = 1.0):
    """ELBO and its gradient with respect to every entry of ``params``."""
    model = as_model(model)
    X = jnp.asarray(X, dtype=float).reshape(-1, model.dim)
    y = jnp.asarray(y, dtype=float).reshape(-1)
    value, grads = _elbo_and_grad(params, model, lik, X, y, num_nodes, scale)
    if not bool(jnp.isfinite(value)):
        raise NumericalError("non-finite ELBO; check hyperparameters and data")
    return value, grads


def minibatch_elbo(params, model, lik, X, y, batch_index, num_nodes: int = DEFAULT_NODES):
    """Unbiased ELBO estimate from the rows in ``batch_index``."""
    batch_index = np.asarray(batch_index)
    N = np.asarray(y).shape[0]
    X = jnp.asarray(X, dtype=float).reshape(N, -1)[batch_index]
    y = jnp.asarray(y, dtype=float)[batch_index]
    return elbo(params, model, lik, X, y, num_nodes, N / batch_index.shape[0])


@dataclass
class VariationalFit:
    params: dict
    model: object
    likelihood: object
    elbo: float
    converged: bool
    iterations: int
    message: str
    wall_time: float

    def predict(self, Xstar):
        mean = self.params["mean"]
        return marginal_q_f(mean, self.params["cov"], self.model, Xstar)

    def hyperparameters(self) -> dict:
        names = self.model.param_names() + self.likelihood.param_names()
        theta = np.concatenate([np.exp(np.asarray(self.model.log_params())),
                                np.asarray(self.likelihood.log_params())])
        if self.likelihood.param_names() == ["noise_variance"]:
            theta[-1] = np.exp(theta[-1])
        return dict(zip(names, theta.tolist()))


def fit(model, lik, X, y, covariance: str = "full", optimize_hyper: bool = False,
        maxiter: int = 5000, gtol: float = 1e-6, num_nodes: int = DEFAULT_NODES,
        params=None) -> VariationalFit:
    """Maximize the ELBO with L-BFGS-B over the variational parameters and,
    optionally, the kernel and likelihood hyperparameters."""
    t0 = time.perf_counter()
    model = as_model(model)
    X = jnp.asarray(X, dtype=float).reshape(-1, model.dim)
    y = jnp.asarray(y, dtype=float).reshape(-1)
    params = init_params(model, lik, covariance) if params is None else params
    fixed = {k: params[k] for k in ("hyper", "lik")} if not optimize_hyper else {}
    free = {k: v for k, v in params.items() if k not in fixed}
    flat0, unravel = ravel_pytree(free)

    def objective(z):
        p = dict(unravel(jnp.asarray(z)), **fixed)
        value, grads = _elbo_and_grad(p, model, lik, X, y, num_nodes, 1.0)
        g, _ = ravel_pytree({k: grads[k] for k in free})
        value = float(value)
        if not math.isfinite(value):
            return np.inf, np.zeros_like(z)
        return -value, -np.asarray(g)

    res = minimize(objective, np.asarray(flat0), jac=True, method="L-BFGS-B",
                   options=dict(maxiter=maxiter, maxfun=2 * maxiter, gtol=gtol, ftol=1e-15))
    params = dict(unravel(jnp.asarray(res.x)), **fixed)
    fitted_model = model.with_log_params(params["hyper"])
    fitted_lik = lik.with_log_params(params["lik"])
    value = float(elbo(params, model, lik, X, y, num_nodes))
    return VariationalFit(params, fitted_model, fitted_lik, value, bool(res.success),
                          int(res.nit), str(res.message), time.perf_counter() - t0)


def fit_stochastic(model, lik, X, y, batch_size: int, num_epochs: int = 50,
                   learning_rate: float = 1e-2, seed: int = 0, covariance: str = "full",
                   optimize_hyper: bool = False, num_nodes: int = DEFAULT_NODES,
                   params=None) -> VariationalFit:
    """Adam on minibatch ELBO estimates, shuffling rows with a fixed seed."""
    t0 = time.perf_counter()
    model = as_model(model)
    X = jnp.asarray(X, dtype=float).reshape(-1, model.dim)
    y = jnp.asarray(y, dtype=float).reshape(-1)
    N = y.shape[0]
    params = init_params(model, lik, covariance) if params is None else params
    fixed = {k: params[k] for k in ("hyper", "lik")} if not optimize_hyper else {}
    free = {k: v for k, v in params.items() if k not in fixed}
    z, unravel = ravel_pytree(free)
    m1 = jnp.zeros_like(z)
    m2 = jnp.zeros_like(z)
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed)
    step = 0
    for _ in range(num_epochs):
        order = rng.permutation(N)
        for start in range(0, N, batch_size):
            idx = order[start:start + batch_size]
            p = dict(unravel(z), **fixed)
            _, grads = _elbo_and_grad(p, model, lik, X[idx], y[idx], num_nodes, N / idx.shape[0])
            g, _ = ravel_pytree({k: grads[k] for k in free})
            step += 1
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g**2
            z = z + learning_rate * (m1 / (1 - b1**step)) / (jnp.sqrt(m2 / (1 - b2**step)) + eps)
    params = dict(unravel(z), **fixed)
    value = float(elbo(params, model, lik, X, y, num_nodes))
    return VariationalFit(params, model.with_log_params(params["hyper"]),
                          lik.with_log_params(params["lik"]), value, True, step,
                          "completed all epochs", time.perf_counter() - t0)
