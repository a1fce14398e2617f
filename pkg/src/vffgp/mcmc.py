"""Hamiltonian Monte Carlo for the optimal non-Gaussian ``q(u)``.

The inducing variables are whitened as ``u = R v`` with ``R R^T = Kuu``,
where ``R = [diag(alpha)^{1/2}, B]`` is the rectangular square root of the
diagonal-plus-low-rank Gram matrix (or a Kronecker product of such roots).
``v`` has a standard-normal prior and is sampled jointly with the
log-hyperparameters. The target is

    log q(v, theta) = sum_n E_{p(f_n | u)}[log p(y_n | f_n)] + log N(v; 0, I)
                      + log p(theta),

and one evaluation costs O(N M) because ``p(f_n | u)`` only needs
``k_u^T Kuu^{-1} u`` and the residual variance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import partial, reduce

import jax
import jax.numpy as jnp
import numpy as np

from .exceptions import DataError
from .features import FourierBasis, feature_matrix
from .kernels import MaternKernel, Order
from .likelihoods import DEFAULT_NODES, Poisson, expected_log_likelihood
from .lowrank import LowRankPlusDiag, _apply_along
from .multidim import ProductModel, as_model

HYPERPRIOR_SD = 3.0
LOG_2PI = math.log(2 * math.pi)


@dataclass
class WhitenedState:
    """Whitened inducing variables ``v``, log-hyperparameters and HMC settings."""

    v: np.ndarray
    hyper: np.ndarray
    step_size: float = 0.05
    num_leapfrog: int = 20


class WhitenedModel:
    """Posterior over ``(theta, v)`` for a model, likelihood and data.

    Pass ``grid`` (a tuple of per-dimension coordinate vectors) instead of
    ``X`` when the inputs form a full grid; ``y`` is then flattened with
    dimension 0 varying slowest, and the predictive mean is computed by
    tensor contractions instead of a dense feature matrix.
    """

    def __init__(self, model, lik, y, X=None, grid=None, sample_hyper: bool = True,
                 hyperprior_sd: float = HYPERPRIOR_SD, num_nodes: int = DEFAULT_NODES):
        self.model = as_model(model)
        self.lik = lik
        self.y = jnp.asarray(y, dtype=float).reshape(-1)
        self.sample_hyper = sample_hyper
        self.hyperprior_sd = hyperprior_sd
        self.num_nodes = num_nodes
        self.grid = None if grid is None else tuple(jnp.asarray(g, dtype=float) for g in grid)
        self.X = None if X is None else jnp.asarray(X, dtype=float).reshape(-1, self.model.dim)
        if (self.X is None) == (self.grid is None):
            raise ValueError("pass exactly one of X or grid")
        if self.grid is not None:
            if not isinstance(self.model, ProductModel) or len(self.grid) != self.model.dim:
                raise ValueError("grid inputs need a ProductModel of matching dimension")
            n = int(np.prod([g.shape[0] for g in self.grid]))
            inside = all(b.contains(g) for b, g in zip(self.model.bases, self.grid))
            # inside the boundary the features do not depend on the hyperparameters
            self._fixed = ([jnp.asarray(P) for P in self._grid_factors(self.model)]
                           if inside else None)
        else:
            n = self.X.shape[0]
            self._fixed = self.model.feature_matrix(self.X) if self.model.contains(self.X) else None
            # squared features are reused by every evaluation of the residual variance
            self._fixed_sq = (self._fixed**2 if self._fixed is not None
                              and isinstance(self.model.kuu(), LowRankPlusDiag) else None)
        if n != self.y.shape[0]:
            raise ValueError(f"{n} inputs but {self.y.shape[0]} targets")
        self.theta0 = jnp.concatenate([self.model.log_params(), lik.log_params()])
        self.num_model_params = int(self.model.log_params().shape[0])
        self.num_hyper = int(self.theta0.shape[0]) if sample_hyper else 0
        self.num_v = int(self.model.kuu().sqrt().num_inputs)
        self.dim = self.num_hyper + self.num_v
        self._value_and_grad = jax.jit(jax.value_and_grad(self.log_density))

    def param_names(self) -> list[str]:
        names = self.model.param_names() + self.lik.param_names()
        return ["log_" + n if n != "offset" else n for n in names]

    def _grid_factors(self, model):
        return [feature_matrix(b, k, g) for b, k, g in zip(model.bases, model.kernels, self.grid)]

    def unpack(self, z):
        theta = z[: self.num_hyper] if self.sample_hyper else self.theta0
        return theta, z[self.num_hyper:]

    def pack(self, state: WhitenedState):
        parts = [jnp.asarray(state.v, dtype=float)]
        if self.sample_hyper:
            parts.insert(0, jnp.asarray(state.hyper, dtype=float))
        return jnp.concatenate(parts)

    def initial_state(self, step_size: float = 0.05, num_leapfrog: int = 20) -> WhitenedState:
        return WhitenedState(np.zeros(self.num_v), np.asarray(self.theta0), step_size, num_leapfrog)

    def _parts(self, theta):
        model = self.model.with_log_params(theta[: self.num_model_params])
        lik = self.lik.with_log_params(theta[self.num_model_params:])
        return model, lik

    def inducing(self, z):
        """``u = R v`` and ``Kuu^{-1} u`` for a packed parameter vector."""
        theta, v = self.unpack(z)
        model, _ = self._parts(theta)
        kuu = model.kuu()
        u = kuu.sqrt().matvec(v)
        return u, kuu.solve(u)

    def f_moments(self, z):
        """Mean and variance of ``p(f_n | u)`` at every input."""
        theta, v = self.unpack(z)
        model, _ = self._parts(theta)
        kuu = model.kuu()
        a = kuu.solve(kuu.sqrt().matvec(v))
        if self.grid is not None:
            Phis = self._fixed if self._fixed is not None else self._grid_factors(model)
            t = a.reshape(model.factor_sizes)
            for d, P in enumerate(Phis):
                t = _apply_along(t, d, lambda x, P=P: P @ x)
            mean = t.reshape(-1)
            quad = reduce(jnp.kron, [A.inv_quad_diag(P) for A, P in zip(kuu.factors, Phis)])
            var = model.variance - quad
        else:
            Phi = self._fixed if self._fixed is not None else model.feature_matrix(self.X)
            mean = Phi @ a
            if self._fixed_sq is not None:
                var = model.kdiag(self.X) - kuu.inv_quad_diag(Phi, self._fixed_sq)
            else:
                var = model.kdiag(self.X) - kuu.inv_quad_diag(Phi)
        return mean, jnp.maximum(var, 0.0)

    def log_density(self, z):
        theta, v = self.unpack(z)
        _, lik = self._parts(theta)
        mean, var = self.f_moments(z)
        ell = jnp.sum(expected_log_likelihood(lik, self.y, mean, var, self.num_nodes))
        log_prior_v = -0.5 * jnp.dot(v, v) - 0.5 * v.shape[0] * LOG_2PI
        out = ell + log_prior_v
        if self.sample_hyper:
            sd = self.hyperprior_sd
            out = out + jnp.sum(-0.5 * (theta / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI)
        return out

    def value_and_grad(self, z):
        return self._value_and_grad(jnp.asarray(z, dtype=float))


def log_target(state: WhitenedState, model: WhitenedModel):
    """Log density and gradient at ``state``; the gradient is ordered
    ``[hyperparameters (if sampled), v]``."""
    value, grad = model.value_and_grad(model.pack(state))
    return float(value), np.asarray(grad)


@dataclass
class Chain:
    """HMC output. Row 0 of ``samples`` is the initial state."""

    samples: np.ndarray
    accept_prob: np.ndarray
    divergent: np.ndarray
    step_size: float
    num_warmup: int
    num_hyper: int
    names: list = field(default_factory=list)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def retained(self) -> np.ndarray:
        """Post-warm-up draws."""
        return self.samples[1 + self.num_warmup:]

    @property
    def acceptance_rate(self) -> float:
        post = self.accept_prob[self.num_warmup:]
        return float(np.mean(post)) if post.size else float("nan")

    @property
    def num_divergent(self) -> int:
        return int(np.sum(self.divergent))

    def hyper(self) -> np.ndarray:
        return self.retained[:, : self.num_hyper]

    def v(self) -> np.ndarray:
        return self.retained[:, self.num_hyper:]


@partial(jax.jit, static_argnums=(0, 3, 4, 5))
def _run_hmc(value_and_grad, z0, key, iterations, num_warmup, num_leapfrog,
             step_size0, target_accept):
    gamma, t0, kappa = 0.05, 10.0, 0.75
    mu = jnp.log(10.0 * step_size0)
    logp0, grad0 = value_and_grad(z0)

    def leapfrog(z, p, grad, eps):
        p = p + 0.5 * eps * grad

        def body(_, carry):
            z, p, _, _ = carry
            z = z + eps * p
            logp, grad = value_and_grad(z)
            return z, p + eps * grad, logp, grad

        z, p, logp, grad = jax.lax.fori_loop(0, num_leapfrog, body, (z, p, 0.0 * logp0, grad))
        return z, p - 0.5 * eps * grad, logp, grad

    def step(carry, inputs):
        z, logp, grad, log_eps, h_bar, log_eps_bar = carry
        i, key = inputs
        k_mom, k_acc = jax.random.split(key)
        warm = i < num_warmup
        eps = jnp.where(warm, jnp.exp(log_eps), jnp.exp(log_eps_bar))
        p0 = jax.random.normal(k_mom, z.shape)
        z1, p1, logp1, grad1 = leapfrog(z, p0, grad, eps)
        h0 = -logp + 0.5 * jnp.dot(p0, p0)
        h1 = -logp1 + 0.5 * jnp.dot(p1, p1)
        log_ratio = h0 - h1
        finite = jnp.isfinite(log_ratio) & jnp.all(jnp.isfinite(z1)) & jnp.all(jnp.isfinite(grad1))
        accept_prob = jnp.where(finite, jnp.exp(jnp.minimum(log_ratio, 0.0)), 0.0)
        accept = jnp.log(jax.random.uniform(k_acc)) < jnp.where(finite, log_ratio, -jnp.inf)
        z = jnp.where(accept, z1, z)
        logp = jnp.where(accept, logp1, logp)
        grad = jnp.where(accept, grad1, grad)
        # dual averaging of the log step size during warm-up
        t = i + 1.0
        h_new = (1 - 1 / (t + t0)) * h_bar + (target_accept - accept_prob) / (t + t0)
        log_eps_new = mu - jnp.sqrt(t) / gamma * h_new
        w = t ** (-kappa)
        log_eps_bar_new = w * log_eps_new + (1 - w) * log_eps_bar
        h_bar = jnp.where(warm, h_new, h_bar)
        log_eps = jnp.where(warm, log_eps_new, log_eps)
        log_eps_bar = jnp.where(warm, log_eps_bar_new, log_eps_bar)
        return (z, logp, grad, log_eps, h_bar, log_eps_bar), (z, accept_prob, ~finite)

    log_eps0 = jnp.log(step_size0)
    init = (z0, logp0, grad0, log_eps0, 0.0, log_eps0)
    keys = jax.random.split(key, iterations)
    carry, (zs, probs, divergent) = jax.lax.scan(step, init, (jnp.arange(iterations), keys))
    final_eps = jnp.where(num_warmup > 0, jnp.exp(carry[5]), step_size0)
    return zs, probs, divergent, final_eps


def hmc_sample(initial: WhitenedState, model: WhitenedModel, iterations: int, seed: int,
               warmup_fraction: float = 0.2, target_accept: float = 0.8) -> Chain:
    """Leapfrog HMC with a Metropolis correction.

    The first ``warmup_fraction`` of iterations adapt the step size by dual
    averaging and are flagged as warm-up; the adapted step size is then
    frozen. Trajectories with non-finite energy are rejected and counted as
    divergent. Deterministic given ``seed``.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    z0 = model.pack(initial)
    names = (model.param_names() if model.sample_hyper else []) + [f"v{i}" for i in range(model.num_v)]
    if iterations == 0:
        return Chain(np.asarray(z0)[None, :], np.zeros(0), np.zeros(0, bool),
                     float(initial.step_size), 0, model.num_hyper, names)
    num_warmup = int(round(warmup_fraction * iterations))
    zs, probs, divergent, eps = _run_hmc(
        model._value_and_grad, z0, jax.random.PRNGKey(seed), int(iterations), num_warmup,
        int(initial.num_leapfrog), float(initial.step_size), float(target_accept))
    samples = np.concatenate([np.asarray(z0)[None, :], np.asarray(zs)], axis=0)
    return Chain(samples, np.asarray(probs), np.asarray(divergent), float(eps), num_warmup,
                 model.num_hyper, names)


def write_trace(chain: Chain, path, include_warmup: bool = False) -> None:
    """CSV with one row per retained sample: hyperparameters then ``v``."""
    rows = chain.samples[1:] if include_warmup else chain.retained
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(chain.names)
        for row in rows:
            writer.writerow([repr(float(x)) for x in row])


@dataclass
class BinnedEvents:
    counts: np.ndarray
    centres: tuple
    bin_area: float
    grid: tuple


def bin_events(events, grid, domain=None) -> BinnedEvents:
    """Count events on a regular grid over the unit cube.

    ``domain`` (a sequence of ``(lo, hi)`` per dimension) maps the events to
    ``[0, 1]^d`` first. Bins are ``(i/G, (i+1)/G]`` except the first, which
    also includes 0, so an event on a boundary goes to the lower bin.
    Counts are flattened with dimension 0 varying slowest.
    """
    events = np.asarray(events, dtype=float)
    grid = tuple(int(g) for g in np.atleast_1d(grid))
    if events.ndim == 1:
        events = events.reshape(-1, len(grid)) if events.size else np.zeros((0, len(grid)))
    D = len(grid)
    if events.shape[1] != D:
        raise DataError(f"events have {events.shape[1]} columns, grid has {D}")
    if any(g < 1 for g in grid):
        raise DataError("grid counts must be at least 1")
    if domain is not None:
        lo = np.array([d[0] for d in domain], dtype=float)
        hi = np.array([d[1] for d in domain], dtype=float)
        events = (events - lo) / (hi - lo)
    if not np.all(np.isfinite(events)) or np.any(events < 0) or np.any(events > 1):
        raise DataError("events lie outside the domain")
    G = np.array(grid)
    idx = np.maximum(np.ceil(events * G).astype(int) - 1, 0)
    flat = np.ravel_multi_index(idx.T, grid) if events.shape[0] else np.zeros(0, int)
    counts = np.bincount(flat, minlength=int(np.prod(grid))).astype(float)
    centres = tuple((np.arange(g) + 0.5) / g for g in grid)
    return BinnedEvents(counts, centres, float(np.prod(1.0 / G)), grid)


def lgcp_model(events, grid, num_frequencies: int = 20, order="3/2", boundary=(-1.0, 2.0),
               domain=None, variance: float = 1.0, lengthscale: float = 0.2,
               sample_hyper: bool = True, num_nodes: int = DEFAULT_NODES) -> WhitenedModel:
    """Log Gaussian Cox process on a grid of bins over the unit cube.

    Counts are Poisson with mean ``exp(f(s_i) + c) * bin_area``; ``f`` has a
    product Matern kernel with one Fourier basis per dimension on
    ``boundary`` and ``c`` is a free offset, initialized at the log of the
    average intensity.
    """
    binned = bin_events(events, grid, domain)
    D = len(binned.grid)
    bases = tuple(FourierBasis(boundary[0], boundary[1], num_frequencies) for _ in range(D))
    kernels = tuple(MaternKernel(Order.parse(order), variance if d == 0 else 1.0, lengthscale)
                    for d in range(D))
    total = max(float(binned.counts.sum()), 1.0)
    lik = Poisson(binned.bin_area, math.log(total))
    model = WhitenedModel(ProductModel(kernels, bases), lik, binned.counts, grid=binned.centres,
                          sample_hyper=sample_hyper, num_nodes=num_nodes)
    model.binned = binned
    return model


def lgcp_log_likelihood(counts, f, lik: Poisson):
    """Poisson log-likelihood of bin counts given log-intensity values ``f``."""
    return float(jnp.sum(lik.log_prob(jnp.asarray(counts, dtype=float), jnp.asarray(f, dtype=float))))
