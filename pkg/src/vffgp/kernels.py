"""Half-integer Matern covariance functions and their spectral densities."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from .exceptions import DataError


class Order(enum.Enum):
    """Smoothness of a half-integer Matern kernel."""

    HALF = 0.5
    THREE_HALVES = 1.5
    FIVE_HALVES = 2.5

    @classmethod
    def parse(cls, value) -> "Order":
        """Accept an `Order`, a float like 1.5, or strings like ``"3/2"``."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            text = value.strip().lower().replace("matern", "").lstrip("-_")
            aliases = {
                "1/2": 0.5, "12": 0.5, "0.5": 0.5, "half": 0.5,
                "3/2": 1.5, "32": 1.5, "1.5": 1.5,
                "5/2": 2.5, "52": 2.5, "2.5": 2.5,
            }
            if text not in aliases:
                raise ValueError(f"unknown Matern order {value!r}")
            value = aliases[text]
        for member in cls:
            if math.isclose(float(value), member.value):
                return member
        raise ValueError(f"unknown Matern order {value!r}")

    @property
    def degree(self) -> int:
        """Number of ``(lambda + D)`` factors in the RKHS inner product."""
        return int(self.value + 0.5)

    @property
    def label(self) -> str:
        return {0.5: "1/2", 1.5: "3/2", 2.5: "5/2"}[self.value]


def _is_concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class MaternKernel:
    """Stationary Matern covariance ``k(r)`` with half-integer order.

    ``variance`` and ``lengthscale`` are pytree leaves so the kernel can be
    passed through ``jax.grad``; the order is static.
    """

    order: Order = field(metadata=dict(static=True))
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "order", Order.parse(self.order))
        for name in ("variance", "lengthscale"):
            value = getattr(self, name)
            if isinstance(value, (int, float, np.number, np.ndarray, jax.Array)) \
                    and _is_concrete(value) and np.ndim(value) == 0:
                if not float(value) > 0:
                    raise ValueError(f"{name} must be positive, got {value}")

    @property
    def decay(self):
        """Decay rate lambda: 1/l, sqrt(3)/l or sqrt(5)/l."""
        return math.sqrt(2 * self.order.value) / self.lengthscale

    def replace(self, **changes) -> "MaternKernel":
        return replace(self, **changes)

    def __call__(self, r):
        return _matern(self, jnp.abs(jnp.asarray(r, dtype=float)))


def _matern(kernel: MaternKernel, r):
    lam_r = kernel.decay * r
    order = kernel.order
    if order is Order.HALF:
        poly = 1.0
    elif order is Order.THREE_HALVES:
        poly = 1.0 + lam_r
    else:
        poly = 1.0 + lam_r + lam_r**2 / 3.0
    value = kernel.variance * poly * jnp.exp(-lam_r)
    # k(0) is sigma^2 exactly, keeping Gram diagonals free of exp() rounding
    return jnp.where(r == 0, kernel.variance * jnp.ones_like(value), value)


def kernel_eval(kernel: MaternKernel, r):
    """Covariance at non-negative distance(s) ``r``."""
    r = jnp.asarray(r, dtype=float)
    if _is_concrete(r) and bool(jnp.any(r < 0)):
        raise DataError("distance must be non-negative")
    return _matern(kernel, r)


def spectral_density(kernel: MaternKernel, omega):
    """Spectral density ``s(omega)``, the Fourier transform of ``k(r)``.

    The normalization matches ``k(r) = (1/2pi) int s(w) exp(i w r) dw``.
    """
    lam = kernel.decay
    w2 = jnp.asarray(omega, dtype=float) ** 2
    order = kernel.order
    if order is Order.HALF:
        return 2.0 * kernel.variance * lam / (lam**2 + w2)
    if order is Order.THREE_HALVES:
        return 4.0 * kernel.variance * lam**3 / (lam**2 + w2) ** 2
    return 16.0 / 3.0 * kernel.variance * lam**5 / (lam**2 + w2) ** 3
