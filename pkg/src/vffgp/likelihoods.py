"""Factorizing likelihoods and their expectations under Gaussian marginals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln
from jax.scipy.stats import norm

DEFAULT_NODES = 20


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class GaussianLikelihood:
    """Additive Gaussian noise with variance ``noise_variance``."""

    noise_variance: float = 1.0

    def __post_init__(self):
        v = self.noise_variance
        if isinstance(v, (int, float)) and not v > 0:
            raise ValueError("noise_variance must be positive")

    def log_prob(self, y, f):
        return -0.5 * (math.log(2 * math.pi) + jnp.log(self.noise_variance)
                       + (y - f) ** 2 / self.noise_variance)

    def expected_log_prob(self, y, mean, var):
        return -0.5 * (math.log(2 * math.pi) + jnp.log(self.noise_variance)
                       + ((y - mean) ** 2 + var) / self.noise_variance)

    def log_params(self):
        return jnp.log(jnp.atleast_1d(self.noise_variance))

    def with_log_params(self, theta):
        return GaussianLikelihood(jnp.exp(theta[0]))

    def param_names(self):
        return ["noise_variance"]


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Bernoulli:
    """Binary labels in {0, 1} with a logit or probit link."""

    link: str = field(default="logit", metadata=dict(static=True))

    def __post_init__(self):
        if self.link not in ("logit", "probit"):
            raise ValueError(f"unknown link {self.link!r}")

    def log_prob(self, y, f):
        signed = (2.0 * y - 1.0) * f
        if self.link == "logit":
            return -jnp.logaddexp(0.0, -signed)
        return norm.logcdf(signed)

    def expected_log_prob(self, y, mean, var, num_nodes: int = DEFAULT_NODES):
        return gauss_hermite(lambda f: self.log_prob(y[..., None], f), mean, var, num_nodes)

    def log_params(self):
        return jnp.zeros(0)

    def with_log_params(self, theta):
        return self

    def param_names(self):
        return []


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Poisson:
    """Counts with rate ``exp(f + offset) * bin_area`` per bin."""

    bin_area: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if isinstance(self.bin_area, (int, float)) and not self.bin_area > 0:
            raise ValueError("bin_area must be positive")

    def log_prob(self, y, f):
        log_rate = f + self.offset + jnp.log(self.bin_area)
        return y * log_rate - jnp.exp(log_rate) - gammaln(y + 1.0)

    def expected_log_prob(self, y, mean, var):
        # E[exp(f)] = exp(mean + var/2) under N(mean, var)
        log_scale = self.offset + jnp.log(self.bin_area)
        return (y * (mean + log_scale) - jnp.exp(mean + 0.5 * var + log_scale)
                - gammaln(y + 1.0))

    def log_params(self):
        return jnp.atleast_1d(jnp.asarray(self.offset, dtype=float))

    def with_log_params(self, theta):
        return Poisson(self.bin_area, theta[0])

    def param_names(self):
        return ["offset"]


def gauss_hermite(fn, mean, var, num_nodes: int = DEFAULT_NODES):
    """``E[fn(f)]`` for ``f ~ N(mean, var)`` by Gauss-Hermite quadrature.

    ``fn`` maps an array of shape ``mean.shape + (num_nodes,)`` elementwise.
    Exact for polynomials of degree up to ``2 * num_nodes - 1``.
    """
    x, w = np.polynomial.hermite.hermgauss(num_nodes)
    mean = jnp.asarray(mean, dtype=float)
    sd = jnp.sqrt(2.0 * jnp.asarray(var, dtype=float))
    f = mean[..., None] + sd[..., None] * x
    return jnp.sum(fn(f) * w, axis=-1) / math.sqrt(math.pi)


def expected_log_likelihood(lik, y, mean, var, num_nodes: int = DEFAULT_NODES):
    """``E_{N(f; mean, var)}[log p(y | f)]`` elementwise.

    Bernoulli likelihoods use Gauss-Hermite quadrature; the Gaussian and
    Poisson cases have closed forms, which are used instead.
    """
    y = jnp.asarray(y, dtype=float)
    mean = jnp.asarray(mean, dtype=float)
    var = jnp.asarray(var, dtype=float)
    if isinstance(lik, Bernoulli):
        return lik.expected_log_prob(y, mean, var, num_nodes)
    return lik.expected_log_prob(y, mean, var)
