"""Variational Fourier features for Gaussian processes.

Sparse variational GP approximations whose inducing variables are RKHS
projections onto a harmonic Fourier basis on an interval ``[a, b]``. The
resulting Gram matrices are diagonal plus low rank, which keeps inference
linear in the number of features.
"""

import jax

# Everything in this package assumes double precision.
jax.config.update("jax_enable_x64", True)

from .exceptions import (  # noqa: E402
    ConvergenceError,
    DataError,
    NumericalError,
    QuadratureError,
    VFFError,
)
from .kernels import MaternKernel, Order, kernel_eval, spectral_density  # noqa: E402
from .features import (  # noqa: E402
    FourierBasis,
    auto_bounds,
    build_kuu,
    cross_covariance,
    feature_matrix,
    feature_vector,
    residual_variance,
)
from .lowrank import (  # noqa: E402
    KroneckerMatrix,
    LowRankPlusDiag,
    StructuredSqrt,
    block_diag,
    kron_assemble,
    logdet,
    solve,
    structured_sqrt,
)
from .multidim import (  # noqa: E402
    AdditiveModel,
    ProductModel,
    additive_feature_vector,
    product_feature_vector,
)

from .likelihoods import Bernoulli, GaussianLikelihood, Poisson  # noqa: E402
from .regression import (  # noqa: E402
    GaussianState,
    SufficientStats,
    accumulate_stats,
    collapsed_elbo,
    hyperparameter_objective_and_gradient,
    optimal_posterior,
    predict,
)
from .variational import KronSumCovariance, elbo_and_gradients, kl_q_p, marginal_q_f  # noqa: E402
from .mcmc import WhitenedModel, WhitenedState, hmc_sample, lgcp_model, log_target  # noqa: E402
from .baselines import full_gp_fit_predict, regular_ff_model, rff_model  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AdditiveModel",
    "Bernoulli",
    "GaussianLikelihood",
    "GaussianState",
    "KronSumCovariance",
    "Poisson",
    "SufficientStats",
    "WhitenedModel",
    "WhitenedState",
    "accumulate_stats",
    "collapsed_elbo",
    "elbo_and_gradients",
    "full_gp_fit_predict",
    "hmc_sample",
    "hyperparameter_objective_and_gradient",
    "kl_q_p",
    "lgcp_model",
    "log_target",
    "marginal_q_f",
    "optimal_posterior",
    "predict",
    "regular_ff_model",
    "rff_model",
    "ConvergenceError",
    "DataError",
    "FourierBasis",
    "KroneckerMatrix",
    "LowRankPlusDiag",
    "MaternKernel",
    "NumericalError",
    "Order",
    "ProductModel",
    "QuadratureError",
    "StructuredSqrt",
    "VFFError",
    "additive_feature_vector",
    "auto_bounds",
    "block_diag",
    "build_kuu",
    "cross_covariance",
    "feature_matrix",
    "feature_vector",
    "kernel_eval",
    "kron_assemble",
    "logdet",
    "product_feature_vector",
    "residual_variance",
    "solve",
    "spectral_density",
    "structured_sqrt",
]
