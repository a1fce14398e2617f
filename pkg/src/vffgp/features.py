"""Variational Fourier features on an interval ``[a, b]``.

Inducing variables are RKHS projections of the process onto the harmonic
basis ``[1, cos(w_m (x - a)), sin(w_m (x - a))]`` with ``w_m = 2 pi m / (b - a)``.
Their covariance with ``f(x)`` is the basis itself inside the interval and
decays to zero outside it; their Gram matrix is diagonal plus at most three
rank-one terms.

Feature ordering is a stability contract relied upon everywhere else:
``[constant, cos_1 .. cos_M, sin_1 .. sin_M]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from .kernels import MaternKernel, Order, spectral_density
from .lowrank import LowRankPlusDiag

DEFAULT_MARGIN = 0.75


@dataclass(frozen=True)
class FourierBasis:
    """Harmonic Fourier basis with ``num_frequencies`` frequencies on ``[a, b]``."""

    a: float
    b: float
    num_frequencies: int

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        if not self.b > self.a:
            raise ValueError(f"need b > a, got a={self.a}, b={self.b}")
        if int(self.num_frequencies) != self.num_frequencies or self.num_frequencies < 0:
            raise ValueError("num_frequencies must be a non-negative integer")
        object.__setattr__(self, "num_frequencies", int(self.num_frequencies))

    @property
    def frequencies(self) -> np.ndarray:
        m = np.arange(1, self.num_frequencies + 1)
        return 2.0 * np.pi * m / (self.b - self.a)

    @property
    def num_features(self) -> int:
        return 2 * self.num_frequencies + 1

    @property
    def width(self) -> float:
        return self.b - self.a

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all((x >= self.a) & (x <= self.b)))


def auto_bounds(x, margin: float = DEFAULT_MARGIN) -> tuple[float, float]:
    """Interval extending the data range by ``margin * range`` on each side."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("cannot choose bounds without data")
    lo, hi = float(np.min(x)), float(np.max(x))
    span = hi - lo
    if span == 0.0:
        span = 1.0
    return lo - margin * span, hi + margin * span


def feature_matrix(basis: FourierBasis, kernel: MaternKernel, x):
    """Cross-covariances ``cov(u, f(x_n))`` as an (N, 2M+1) matrix (``Kfu``).

    Inside ``[a, b]`` the rows are the plain sinusoids. Outside, the
    covariance decays with the distance ``r`` to the nearest edge, at a rate
    set by the kernel; values and (for orders 3/2 and 5/2) first derivatives
    are continuous across the edges.
    """
    x = jnp.reshape(jnp.asarray(x, dtype=float), (-1,))
    w = jnp.asarray(basis.frequencies)
    a, b = basis.a, basis.b
    r = jnp.maximum(jnp.maximum(a - x, x - b), 0.0)
    inside = (r == 0.0)[:, None]
    theta = (x - a)[:, None] * w[None, :]
    cos_in, sin_in = jnp.cos(theta), jnp.sin(theta)

    lam = kernel.decay
    rr = r[:, None]
    decay = jnp.exp(-lam * rr)
    # sin(w (x - a)) is negative just below a and positive just above b
    sign = jnp.where(x < a, -1.0, 1.0)[:, None]
    w0 = jnp.concatenate([jnp.zeros(1), w])[None, :]
    order = kernel.order
    if order is Order.HALF:
        cos_out = jnp.broadcast_to(decay, (x.shape[0], w0.shape[1]))
        sin_out = jnp.zeros_like(theta)
    elif order is Order.THREE_HALVES:
        cos_out = jnp.broadcast_to((1.0 + lam * rr) * decay, (x.shape[0], w0.shape[1]))
        sin_out = sign * rr * w[None, :] * decay
    else:
        cos_out = (1.0 + lam * rr + 0.5 * (lam**2 - w0**2) * rr**2) * decay
        sin_out = sign * rr * w[None, :] * (1.0 + lam * rr) * decay

    const_in = jnp.ones((x.shape[0], 1))
    cos_part = jnp.where(inside, jnp.concatenate([const_in, cos_in], axis=1), cos_out)
    sin_part = jnp.where(inside, sin_in, sin_out)
    return jnp.concatenate([cos_part, sin_part], axis=1)


def feature_vector(basis: FourierBasis, kernel: MaternKernel, x):
    """Feature vector ``k_u(x)`` of length 2M+1 at a scalar input."""
    return feature_matrix(basis, kernel, jnp.reshape(jnp.asarray(x, dtype=float), (1,)))[0]


def cross_covariance(basis: FourierBasis, kernel: MaternKernel, X):
    """``Kuf``: the (2M+1, N) matrix whose column n is ``k_u(X[n])``."""
    return feature_matrix(basis, kernel, X).T


def build_kuu(basis: FourierBasis, kernel: MaternKernel) -> LowRankPlusDiag:
    """Gram matrix of the basis in the kernel's RKHS on ``[a, b]``.

    The diagonal part is ``(b - a)/2 * [2/s(0), 1/s(w_m), 1/s(w_m)]`` for all
    three orders. The low-rank part comes from the boundary terms of the
    inner product at ``a``:

    * order 1/2: one column, ``1/sigma`` on constant and cosine entries;
    * order 3/2: the same column plus ``w_m/(lambda sigma)`` on sines;
    * order 5/2: ``1/sigma`` and ``(3 w^2/lambda^2 - 1)/(sqrt(8) sigma)`` on
      constant and cosines, plus ``sqrt(3) w_m/(lambda sigma)`` on sines.

    Cosine-sine cross terms vanish identically.
    """
    w = jnp.asarray(basis.frequencies)
    M = basis.num_frequencies
    half_width = 0.5 * basis.width
    s0 = spectral_density(kernel, 0.0)
    sw = spectral_density(kernel, w)
    alpha = half_width * jnp.concatenate([jnp.atleast_1d(2.0 / s0), 1.0 / sw, 1.0 / sw])

    sigma = jnp.sqrt(kernel.variance)
    lam = kernel.decay
    ones_cos = jnp.ones(M + 1)
    zeros_cos = jnp.zeros(M + 1)
    zeros_sin = jnp.zeros(M)
    w_cos = jnp.concatenate([jnp.zeros(1), w])

    columns = [jnp.concatenate([ones_cos, zeros_sin]) / sigma]
    order = kernel.order
    if order is Order.THREE_HALVES:
        columns.append(jnp.concatenate([zeros_cos, w / (lam * sigma)]))
    elif order is Order.FIVE_HALVES:
        curvature = (3.0 * w_cos**2 / lam**2 - 1.0) / (math.sqrt(8.0) * sigma)
        columns.append(jnp.concatenate([curvature, zeros_sin]))
        columns.append(jnp.concatenate([zeros_cos, math.sqrt(3.0) * w / (lam * sigma)]))
    return LowRankPlusDiag(alpha, jnp.stack(columns, axis=1))


def residual_variance(basis: FourierBasis, kernel: MaternKernel, x):
    """Prior variance of ``f(x)`` left unexplained by the features.

    This is ``k(x, x) - k_u(x)^T Kuu^{-1} k_u(x)``, the variance of the
    orthogonal complement of the projection onto the inducing variables.
    """
    x = jnp.asarray(x, dtype=float)
    scalar = x.ndim == 0
    Phi = feature_matrix(basis, kernel, jnp.reshape(x, (-1,)))
    out = kernel.variance - build_kuu(basis, kernel).inv_quad_diag(Phi)
    return out[0] if scalar else out
