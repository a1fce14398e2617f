"""Reference models: exact dense GP, random and regular Fourier features,
L2-projected Fourier features, and a quadrature RKHS inner product.

These are deliberately simple and dense. They serve as oracles for the
structured code paths and as baselines in the experiments, never as the
fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.integrate import quad_vec
from scipy.special import comb

from .exceptions import NumericalError, QuadratureError
from .features import FourierBasis
from .kernels import MaternKernel, Order, spectral_density
from .multidim import AdditiveModel, ProductModel

MAX_DENSE_N = 5000


def gram(kernel_or_model, X1, X2=None) -> np.ndarray:
    """Dense covariance matrix between two sets of inputs."""
    X1 = np.asarray(X1, dtype=float)
    X2 = X1 if X2 is None else np.asarray(X2, dtype=float)
    if isinstance(kernel_or_model, MaternKernel):
        x1, x2 = X1.reshape(-1), X2.reshape(-1)
        return np.asarray(kernel_or_model(np.abs(x1[:, None] - x2[None, :])))
    model = kernel_or_model
    X1 = X1.reshape(-1, model.dim)
    X2 = X2.reshape(-1, model.dim)
    parts = [np.asarray(k(np.abs(X1[:, d, None] - X2[None, :, d])))
             for d, k in enumerate(model.kernels)]
    if isinstance(model, AdditiveModel):
        return sum(parts)
    if isinstance(model, ProductModel):
        return np.prod(parts, axis=0)
    raise TypeError(f"unsupported model {type(model).__name__}")


def full_gp_fit_predict(kernel, lik, X, y, Xstar=None, method: str = "cholesky"):
    """Exact GP log marginal likelihood and predictive ``(mean, var)`` of f.

    ``method`` selects the factorization: ``"cholesky"`` or ``"eigh"``. The
    two routes are independent and are used to cross-check each other.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    N = y.shape[0]
    if N > MAX_DENSE_N:
        raise ValueError(f"dense GP limited to N <= {MAX_DENSE_N}, got {N}")
    s2 = float(lik.noise_variance)
    Kxx = gram(kernel, X)
    C = Kxx + s2 * np.eye(N)
    if method == "cholesky":
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance plus noise is not positive definite") from exc
        alpha = scipy.linalg.cho_solve((L, True), y)
        lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * math.log(2 * math.pi)

        def apply_inv(B):
            return scipy.linalg.cho_solve((L, True), B)
    elif method == "eigh":
        w, Q = np.linalg.eigh(C)
        if np.any(w <= 0):
            raise NumericalError("covariance plus noise is not positive definite")
        Qty = Q.T @ y
        alpha = Q @ (Qty / w)
        lml = -0.5 * np.sum(Qty**2 / w) - 0.5 * np.sum(np.log(w)) - 0.5 * N * math.log(2 * math.pi)

        def apply_inv(B):
            return Q @ ((Q.T @ B) / w[:, None])
    else:
        raise ValueError(f"unknown method {method!r}")
    if Xstar is None:
        return float(lml), None, None
    Ksx = gram(kernel, Xstar, X)
    kss = np.diag(gram(kernel, Xstar))
    mean = Ksx @ alpha
    var = kss - np.sum(Ksx * apply_inv(Ksx.T).T, axis=1)
    return float(lml), mean, var


def full_gp_optimize(kernel: MaternKernel, lik, X, y):
    """Maximise the exact log marginal likelihood over ``(variance,
    lengthscale, noise)`` in log space. Returns ``(kernel, lik, lml)``."""
    from scipy.optimize import minimize

    def neg(t):
        try:
            k = kernel.replace(variance=math.exp(t[0]), lengthscale=math.exp(t[1]))
            return -full_gp_fit_predict(k, type(lik)(math.exp(t[2])), X, y)[0]
        except NumericalError:
            return np.inf

    t0 = np.log([float(kernel.variance), float(kernel.lengthscale), float(lik.noise_variance)])
    res = minimize(neg, t0, method="Nelder-Mead",
                   options=dict(xatol=1e-8, fatol=1e-10, maxiter=4000))
    k = kernel.replace(variance=math.exp(res.x[0]), lengthscale=math.exp(res.x[1]))
    return k, type(lik)(math.exp(res.x[2])), float(-res.fun)


@dataclass(frozen=True)
class WeightSpaceModel:
    """``f(x) = phi(x)^T w`` with ``phi = [cos(w x), sin(w x)]`` and
    ``w ~ N(0, diag(prior_var, prior_var))``."""

    frequencies: np.ndarray
    prior_var: np.ndarray

    @property
    def num_weights(self) -> int:
        return 2 * self.frequencies.shape[0]

    def features(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float).reshape(-1, 1)
        wx = x * self.frequencies[None, :]
        return np.concatenate([np.cos(wx), np.sin(wx)], axis=1)

    def weight_prior(self) -> np.ndarray:
        return np.concatenate([self.prior_var, self.prior_var])

    def kernel_approx(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.sum(self.prior_var * np.cos(np.multiply.outer(r, self.frequencies)), axis=-1)

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        w = rng.standard_normal(self.num_weights) * np.sqrt(self.weight_prior())
        return self.features(X) @ w

    def fit_predict(self, lik, X, y, Xstar=None):
        """Log marginal likelihood and predictive ``(mean, var)`` of f."""
        y = np.asarray(y, dtype=float).reshape(-1)
        N = y.shape[0]
        s2 = float(lik.noise_variance)
        Phi = self.features(X)
        prior = self.weight_prior()
        keep = prior > 0
        Phi, prior = Phi[:, keep], prior[keep]
        # posterior precision over weights: diag(1/prior) + Phi^T Phi / s2
        A = np.diag(1.0 / prior) + Phi.T @ Phi / s2
        L = np.linalg.cholesky(A)
        b = Phi.T @ y / s2
        mu = scipy.linalg.cho_solve((L, True), b)
        logdet_C = N * math.log(s2) + 2 * np.sum(np.log(np.diag(L))) + np.sum(np.log(prior))
        quad = y @ y / s2 - b @ mu
        lml = -0.5 * (N * math.log(2 * math.pi) + logdet_C + quad)
        if Xstar is None:
            return float(lml), None, None
        Ps = self.features(Xstar)[:, keep]
        mean = Ps @ mu
        V = scipy.linalg.solve_triangular(L, Ps.T, lower=True)
        return float(lml), mean, np.sum(V**2, axis=0)


def sample_spectral_frequencies(kernel: MaternKernel, num: int, rng: np.random.Generator) -> np.ndarray:
    """Draw frequencies from the normalized spectral density.

    Order 1/2 is a Cauchy law, sampled by inverting its CDF. Orders 3/2 and
    5/2 are Student-t laws, sampled by accept-reject from the same Cauchy
    proposal with acceptance probability ``(1 + w^2/lambda^2)^-(p-1)``.
    """
    lam = float(kernel.decay)
    power = kernel.order.degree
    out = np.empty(0)
    while out.shape[0] < num:
        need = num - out.shape[0]
        batch = max(2 * need * power, 16)
        w = lam * np.tan(np.pi * (rng.uniform(size=batch) - 0.5))
        if power > 1:
            accept = rng.uniform(size=batch) < (1.0 + (w / lam) ** 2) ** (1 - power)
            w = w[accept]
        out = np.concatenate([out, w[:need]])
    return out


def rff_model(kernel: MaternKernel, num_freqs: int, seed: int = 0,
              zero_frequencies: bool = False) -> WeightSpaceModel:
    """Random Fourier features with ``num_freqs`` sampled frequencies."""
    rng = np.random.default_rng(seed)
    if zero_frequencies:
        freqs = np.zeros(num_freqs)
    else:
        freqs = sample_spectral_frequencies(kernel, num_freqs, rng)
    prior = np.full(num_freqs, float(kernel.variance) / max(num_freqs, 1))
    return WeightSpaceModel(freqs, prior)


def regular_ff_model(kernel: MaternKernel, spacing: float, num_freqs: int) -> WeightSpaceModel:
    """Regular Fourier features at ``w_m = m * spacing``, ``m = 1..M``.

    Weight variances are ``s(w_m) * spacing / pi``, the rectangle rule for
    ``k(r) = (1/pi) int_0^inf s(w) cos(w r) dw``.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    freqs = spacing * np.arange(1, num_freqs + 1)
    prior = np.asarray(spectral_density(kernel, freqs)) * spacing / np.pi
    return WeightSpaceModel(freqs, prior)


def l2_features_matern12(basis: FourierBasis, kernel: MaternKernel):
    """Fourier features projected in L2 rather than in the RKHS (order 1/2).

    Returns ``(cross_cov, Kuu)``: ``cross_cov(x)`` is the (N, 2M+1) matrix of
    ``int_a^b k(x, t) phi_m(t) dt`` and ``Kuu`` the dense matrix of
    ``int int k(s, t) phi_m(s) phi_m'(t) ds dt``.
    """
    if kernel.order is not Order.HALF:
        raise NotImplementedError("L2 features are only available for order 1/2")
    a, b, L = basis.a, basis.b, basis.width
    lam = float(kernel.decay)
    s2 = float(kernel.variance)
    w = np.concatenate([[0.0], basis.frequencies])
    s = np.asarray(spectral_density(kernel, w))
    denom = lam**2 + w**2
    M = basis.num_frequencies

    def cross_cov(x):
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        inside = (x >= a) & (x <= b)
        ea = np.exp(-lam * np.abs(x - a))
        eb = np.exp(-lam * np.abs(b - x))
        edge = s2 / denom * (lam * (-ea - eb) + 1j * w * (ea - eb))
        E_in = s * np.exp(1j * w * (x - a)) + edge
        tail = 1.0 - np.exp(-lam * L)
        E_lo = s2 * np.exp(lam * (x - a)) * tail * (lam + 1j * w) / denom
        E_hi = s2 * (np.exp(-lam * (x - b)) - np.exp(-lam * (x - a))) * (lam - 1j * w) / denom
        E = np.where(inside, E_in, np.where(x < a, E_lo, E_hi))
        return np.concatenate([E.real, E.imag[:, 1:]], axis=1)

    tail = 1.0 - np.exp(-lam * L)
    cc = np.diag(s * L / 2 * np.where(w == 0, 2.0, 1.0))
    cc -= 2 * s2 * lam**2 * tail / np.outer(denom, denom)
    ws, ds = w[1:], denom[1:]
    ss = np.diag(s[1:] * L / 2) + 2 * s2 * tail * np.outer(ws, ws) / np.outer(ds, ds)
    K = np.zeros((2 * M + 1, 2 * M + 1))
    K[: M + 1, : M + 1] = cc
    K[M + 1 :, M + 1 :] = ss
    return cross_cov, K


def _operator_coeffs(lam: float, power: int) -> np.ndarray:
    """Coefficients of ``(lambda + D)^power`` acting on ``[g, g', g'', ...]``."""
    return np.array([comb(power, k) * lam ** (power - k) for k in range(power + 1)])


def _boundary_form(kernel: MaternKernel, G, H) -> np.ndarray:
    """Boundary terms at ``a`` for derivative stacks ``G``, ``H`` (deriv, n)."""
    lam, s2 = float(kernel.decay), float(kernel.variance)
    order = kernel.order
    out = np.outer(G[0], H[0]) / s2
    if order is Order.THREE_HALVES:
        out = out + np.outer(G[1], H[1]) / (lam**2 * s2)
    elif order is Order.FIVE_HALVES:
        out = (9.0 / (8.0 * s2)) * np.outer(G[0], H[0])
        out = out + 9.0 / (8.0 * lam**4 * s2) * np.outer(G[2], H[2])
        out = out + 3.0 / (lam**2 * s2) * (
            np.outer(G[1], H[1]) + np.outer(G[2], H[0]) / 8.0 + np.outer(G[0], H[2]) / 8.0
        )
    return out


def rkhs_inner_product_quadrature(kernel: MaternKernel, g: Callable, h: Callable,
                                  a: float, b: float, epsrel: float = 1e-12,
                                  epsabs: float = 0.0) -> np.ndarray:
    """RKHS inner product on ``[a, b]`` by adaptive quadrature.

    ``g(t)`` and ``h(t)`` return arrays of shape ``(p + 1, n)`` holding the
    values and first ``p`` derivatives of ``n`` functions at the scalar
    ``t``, where ``p`` is 1, 2 or 3 for orders 1/2, 3/2, 5/2. The result is
    the ``(n_g, n_h)`` matrix of inner products: the integral of
    ``(lambda + D)^p g * (lambda + D)^p h`` scaled by
    ``1 / (s(w) (lambda^2 + w^2)^p)`` plus exact boundary terms at ``a``.
    Pass ``epsabs`` when the integral may vanish, as the relative target is
    then unreachable.
    """
    lam, s2 = float(kernel.decay), float(kernel.variance)
    p = kernel.order.degree
    coeffs = _operator_coeffs(lam, p)
    scale = 1.0 / (float(spectral_density(kernel, 0.0)) * lam ** (2 * p))

    def integrand(t):
        Gt, Ht = np.asarray(g(t))[: p + 1], np.asarray(h(t))[: p + 1]
        return np.outer(coeffs @ Gt, coeffs @ Ht)

    # epsabs is in the units of the result, the integral is scaled afterwards
    value, err = quad_vec(integrand, a, b, epsrel=epsrel, epsabs=epsabs / scale, norm="max",
                          limit=20000)
    tol = max(1e-9 * np.max(np.abs(value)), 1e-13, epsabs / scale)
    if not np.all(np.isfinite(value)) or err > tol:
        raise QuadratureError(f"quadrature error estimate {err:g} exceeds tolerance {tol:g}")
    Ga, Ha = np.asarray(g(a))[: p + 1], np.asarray(h(a))[: p + 1]
    return scale * value + _boundary_form(kernel, Ga, Ha)


def fourier_derivatives(basis: FourierBasis, max_order: int = 3) -> Callable:
    """Values and derivatives of the 2M+1 basis functions at a scalar t."""
    w = np.concatenate([[0.0], basis.frequencies])
    ws = basis.frequencies

    def derivs(t):
        out = []
        for k in range(max_order + 1):
            # d^k/dt^k cos(w t') = w^k cos(w t' + k pi/2), same shift for sin
            cos_k = w**k * np.cos(w * (t - basis.a) + k * np.pi / 2)
            sin_k = ws**k * np.sin(ws * (t - basis.a) + k * np.pi / 2)
            out.append(np.concatenate([cos_k, sin_k]))
        return np.stack(out)

    return derivs


def kuu_quadrature(basis: FourierBasis, kernel: MaternKernel, epsrel: float = 1e-12) -> np.ndarray:
    """Dense Gram matrix of the Fourier basis via the quadrature inner product."""
    d = fourier_derivatives(basis)
    return rkhs_inner_product_quadrature(kernel, d, d, basis.a, basis.b, epsrel)


def inducing_point_elbo(kernel_or_model, lik, X, y, Z) -> float:
    """Collapsed ELBO of a sparse GP with fixed inducing inputs ``Z`` (dense)."""
    y = np.asarray(y, dtype=float).reshape(-1)
    N = y.shape[0]
    s2 = float(lik.noise_variance)
    Kuu = gram(kernel_or_model, Z)
    Kuf = gram(kernel_or_model, Z, X)
    kdiag = np.diag(gram(kernel_or_model, X[:1]))[0] * np.ones(N)
    L = np.linalg.cholesky(Kuu + 1e-10 * np.mean(np.diag(Kuu)) * np.eye(Kuu.shape[0]))
    A = scipy.linalg.solve_triangular(L, Kuf, lower=True) / math.sqrt(s2)
    Bm = np.eye(A.shape[0]) + A @ A.T
    LB = np.linalg.cholesky(Bm)
    c = scipy.linalg.solve_triangular(LB, A @ y, lower=True) / math.sqrt(s2)
    bound = -0.5 * N * math.log(2 * math.pi * s2) - np.sum(np.log(np.diag(LB)))
    bound += -0.5 * y @ y / s2 + 0.5 * c @ c
    bound += -0.5 * np.sum(kdiag) / s2 + 0.5 * np.sum(A**2)
    return float(bound)
