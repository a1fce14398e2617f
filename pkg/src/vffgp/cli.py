"""``vffgp`` command-line interface.

Subcommands ``generate``, ``fit``, ``predict`` and ``experiment``. Settings
come from an optional ``--config`` file of ``key=value`` lines; flags given
on the command line override it. Exit codes: 0 success, 1 input error,
2 non-convergence (results are still written), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .exceptions import ConvergenceError, DataError, NumericalError
from .features import FourierBasis, auto_bounds
from .kernels import MaternKernel, Order
from .likelihoods import Bernoulli, GaussianLikelihood, Poisson
from .multidim import AdditiveModel, ProductModel

SCHEMA_VERSION = "1.0"
ORACLE_MAX_N = 2000
EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("vffgp")


class InputError(Exception):
    """Bad configuration, arguments or files (exit code 1)."""


def read_config(path) -> dict:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {i}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _merge(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in ("config", "command", "func") or value is None:
            continue
        if value is False and key in ("with_oracle",):
            continue
        cfg[key] = value
    return cfg


def _get(cfg, key, cast, default=None, required=False):
    if key not in cfg or cfg[key] in ("", None):
        if required:
            raise InputError(f"missing setting {key!r}")
        return default
    value = cfg[key]
    try:
        if cast is bool:
            return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"setting {key}={value!r}: {exc}") from None


def _parse_bounds(text: str):
    try:
        a, b = (float(v) for v in str(text).split(","))
    except ValueError:
        raise InputError(f"--bounds expects 'a,b', got {text!r}") from None
    if not a < b:
        raise InputError(f"--bounds needs a < b, got {text!r}")
    return a, b


def _order(cfg):
    try:
        return Order.parse(cfg.get("order", "3/2"))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _seed(cfg) -> int:
    return _get(cfg, "seed", int, required=True)


def _write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


# ----------------------------------------------------------------- generate

def cmd_generate(cfg: dict) -> int:
    from .data import (generate_banana, generate_point_pattern, generate_product_regression,
                       generate_regression, write_csv)

    seed = _seed(cfg)
    out = _get(cfg, "out", str, required=True)
    dataset = cfg.get("dataset", "regression")
    N = _get(cfg, "N", int, 100)
    if N < 0:
        raise InputError("N must be non-negative")
    D = _get(cfg, "D", int, 1)
    order = _order(cfg)
    variance = _get(cfg, "variance", float, 1.0)
    lengthscale = _get(cfg, "lengthscale", float, 0.2)
    noise = _get(cfg, "noise", float, 0.05)
    meta = dict(dataset=dataset, seed=seed, N=N, D=D, order=order.label, variance=variance,
                lengthscale=lengthscale, noise=noise)
    if dataset == "regression":
        X, y, sampler = generate_regression(N, D, order, variance, lengthscale, noise, seed)
    elif dataset == "product":
        if N > 5000:
            raise InputError("product-kernel data is sampled densely; N must be <= 5000")
        X, y = generate_product_regression(N, D, order, variance, lengthscale, noise, seed)
        sampler = "dense"
    elif dataset == "banana":
        X, y = generate_banana(N, seed)
        sampler = "crescents"
        meta.update(D=2)
    elif dataset == "points":
        X, _ = generate_point_pattern(seed, grid=_get(cfg, "grid", int, 64),
                                      variance=variance, lengthscale=lengthscale,
                                      mean_count=_get(cfg, "mean_count", float, 150.0),
                                      order=order)
        y, sampler = None, "dense_grid"
        meta.update(D=2, N=int(X.shape[0]))
    else:
        raise InputError(f"unknown dataset {dataset!r}; choose regression, product, banana or points")
    meta["sampler"] = sampler
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, X, y)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    _write_json(f"{out}.meta.json", meta)
    return EXIT_OK


# ---------------------------------------------------------------------- fit

def _likelihood(cfg, y):
    name = cfg.get("likelihood", "gaussian")
    if name == "gaussian":
        return GaussianLikelihood(_get(cfg, "noise", float, 0.1))
    if name in ("bernoulli", "logit", "probit"):
        if y.size and not np.all((y == 0) | (y == 1)):
            raise InputError("bernoulli likelihood needs targets in {0, 1}")
        return Bernoulli("probit" if name == "probit" else _get(cfg, "link", str, "logit"))
    if name == "poisson":
        if y.size and (np.any(y < 0) or np.any(y != np.round(y))):
            raise InputError("poisson likelihood needs non-negative integer counts")
        area = _get(cfg, "bin_area", float, 1.0)
        offset = math.log(max(float(np.mean(y)) if y.size else 1.0, 1e-12) / area)
        return Poisson(area, _get(cfg, "offset", float, offset))
    raise InputError(f"unknown likelihood {name!r}; choose gaussian, bernoulli or poisson")


def _build_model(cfg, X):
    order = _order(cfg)
    D = X.shape[1]
    M = _get(cfg, "M", int, 20)
    if M < 0:
        raise InputError("M must be non-negative")
    if "bounds" in cfg:
        bounds = [_parse_bounds(cfg["bounds"])] * D
    else:
        if X.shape[0] == 0:
            raise InputError("no data to choose bounds from; pass --bounds a,b")
        margin = _get(cfg, "margin", float, 0.75)
        bounds = [auto_bounds(X[:, d], margin) for d in range(D)]
    variance = _get(cfg, "variance", float, 1.0)
    lengthscale = _get(cfg, "lengthscale", float, 0.2)
    bases = tuple(FourierBasis(a, b, M) for a, b in bounds)
    kind = cfg.get("kernel", "additive")
    if kind == "additive":
        kernels = tuple(MaternKernel(order, variance / D, lengthscale) for _ in range(D))
        return AdditiveModel(kernels, bases), bounds
    if kind == "product":
        kernels = tuple(MaternKernel(order, variance if d == 0 else 1.0, lengthscale)
                        for d in range(D))
        return ProductModel(kernels, bases), bounds
    raise InputError(f"unknown kernel {kind!r}; choose additive or product")


def _sqrt_psd(S):
    w, Q = np.linalg.eigh(0.5 * (S + S.T))
    return Q * np.sqrt(np.maximum(w, 0.0))


def _fit_conjugate(cfg, model, lik, X, y):
    from . import regression
    if not isinstance(lik, GaussianLikelihood):
        raise InputError("model conjugate requires the gaussian likelihood")
    fit = regression.fit(model, X, y, noise_variance=float(lik.noise_variance),
                         optimize=_get(cfg, "optimize", bool, True),
                         maxiter=_get(cfg, "maxiter", int, 1000), allow_outside=True)
    post = (np.asarray(fit.state.mean), np.asarray(fit.state.cov_factor))
    return dict(elbo=fit.elbo, hyperparameters=fit.hyperparameters(), converged=fit.converged,
                iterations=fit.iterations, message=fit.message), fit.model, fit.likelihood, post


def _fit_vgauss(cfg, model, lik, X, y):
    from . import variational
    fit = variational.fit(model, lik, X, y, covariance=cfg.get("covariance", "full"),
                          optimize_hyper=_get(cfg, "optimize", bool, True),
                          maxiter=_get(cfg, "maxiter", int, 5000))
    S = np.asarray(variational.as_covariance(fit.params["cov"]).dense())
    post = (np.asarray(fit.params["mean"]), _sqrt_psd(S))
    return dict(elbo=fit.elbo, hyperparameters=fit.hyperparameters(), converged=fit.converged,
                iterations=fit.iterations, message=fit.message), fit.model, fit.likelihood, post


def _fit_mcmc(cfg, model, lik, X, y, seed):
    import jax.numpy as jnp

    from .data import named_rng
    from .mcmc import WhitenedModel, hmc_sample, write_trace
    wm = WhitenedModel(model, lik, y, X=X, sample_hyper=_get(cfg, "optimize", bool, True))
    iterations = _get(cfg, "iterations", int, 1000)
    chain = hmc_sample(wm.initial_state(step_size=_get(cfg, "step_size", float, 0.05),
                                        num_leapfrog=_get(cfg, "num_leapfrog", int, 20)),
                       wm, iterations, int(named_rng(seed, "hmc").integers(2**31)))
    if "trace" in cfg:
        write_trace(chain, cfg["trace"])
    draws = chain.retained
    if draws.shape[0] == 0:
        draws = chain.samples
    theta = np.mean(draws[:, : wm.num_hyper], axis=0) if wm.num_hyper else np.asarray(wm.theta0)
    fitted = model.with_log_params(jnp.asarray(theta[: wm.num_model_params]))
    fitted_lik = lik.with_log_params(jnp.asarray(theta[wm.num_model_params:]))
    # moment-matched Gaussian over u at the posterior-mean hyperparameters
    R = fitted.kuu().sqrt()
    U = np.stack([np.asarray(R.matvec(jnp.asarray(z[wm.num_hyper:]))) for z in draws])
    S = np.cov(U, rowvar=False) if U.shape[0] > 1 else np.zeros((U.shape[1], U.shape[1]))
    names = fitted.param_names() + fitted_lik.param_names()
    values = [math.exp(t) if n != "offset" else float(t) for n, t in
              zip(names, np.concatenate([np.asarray(fitted.log_params()),
                                         np.asarray(fitted_lik.log_params())]))]
    acc = chain.acceptance_rate
    res = dict(elbo=None, hyperparameters=dict(zip(names, values)),
               converged=bool(0.5 <= acc <= 0.95), iterations=iterations,
               message=f"acceptance {acc:.3f}, {chain.num_divergent} divergent",
               diagnostics=dict(acceptance_rate=acc, num_divergent=chain.num_divergent,
                                step_size=chain.step_size))
    return res, fitted, fitted_lik, (U.mean(axis=0), _sqrt_psd(np.atleast_2d(S)))


def _model_document(model, lik, post, order) -> dict:
    kind = "product" if isinstance(model, ProductModel) else "additive"
    lik_doc = dict(name=type(lik).__name__.lower())
    if isinstance(lik, GaussianLikelihood):
        lik_doc["noise_variance"] = float(lik.noise_variance)
    elif isinstance(lik, Bernoulli):
        lik_doc["link"] = lik.link
    else:
        lik_doc.update(bin_area=float(lik.bin_area), offset=float(lik.offset))
    return dict(
        schema_version=SCHEMA_VERSION, kernel=kind, order=order.label,
        kernels=[dict(variance=float(k.variance), lengthscale=float(k.lengthscale))
                 for k in model.kernels],
        bases=[dict(a=b.a, b=b.b, M=b.num_frequencies) for b in model.bases],
        likelihood=lik_doc,
        posterior=dict(mean=post[0].tolist(), cov_factor=post[1].tolist()),
    )


def cmd_fit(cfg: dict) -> int:
    from .data import read_csv

    t0 = time.perf_counter()
    seed = _seed(cfg)
    out = _get(cfg, "out", str, required=True)
    X, y, _ = read_csv(_get(cfg, "data", str, required=True))
    if y is None:
        raise InputError("data file has no 'y' column")
    kind = cfg.get("model", "conjugate")
    lik = _likelihood(cfg, y)
    model, bounds = _build_model(cfg, X)
    if kind == "conjugate":
        res, fitted, fitted_lik, post = _fit_conjugate(cfg, model, lik, X, y)
    elif kind == "vgauss":
        res, fitted, fitted_lik, post = _fit_vgauss(cfg, model, lik, X, y)
    elif kind == "mcmc":
        res, fitted, fitted_lik, post = _fit_mcmc(cfg, model, lik, X, y, seed)
    else:
        raise InputError(f"unknown model {kind!r}; choose conjugate, vgauss or mcmc")
    result = dict(schema_version=SCHEMA_VERSION, model_kind=kind, seed=seed,
                  M=[b.num_frequencies for b in model.bases],
                  bounds=[[float(a), float(b)] for a, b in bounds],
                  kernel=cfg.get("kernel", "additive"), order=_order(cfg).label,
                  likelihood=cfg.get("likelihood", "gaussian"), num_data=int(y.shape[0]), **res)
    if _get(cfg, "with_oracle", bool, False):
        if kind != "conjugate":
            raise InputError("--with-oracle is only available for conjugate fits")
        if y.shape[0] > ORACLE_MAX_N:
            raise InputError(f"--with-oracle needs N <= {ORACLE_MAX_N}, got {y.shape[0]}")
        from .baselines import full_gp_fit_predict
        result["oracle_log_ml"], _, _ = full_gp_fit_predict(fitted, fitted_lik, X, y)
    result["wall_time_seconds"] = time.perf_counter() - t0
    _write_json(out, result)
    if "save_model" in cfg:
        _write_json(cfg["save_model"], _model_document(fitted, fitted_lik, post, _order(cfg)))
    if not result["converged"]:
        log.warning("fit did not converge: %s", result["message"])
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ------------------------------------------------------------------ predict

def load_model(path):
    """Rebuild ``(model, posterior_state)`` from a saved model file."""
    import jax.numpy as jnp

    from .regression import GaussianState
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        order = Order.parse(doc["order"])
        kernels = tuple(MaternKernel(order, k["variance"], k["lengthscale"]) for k in doc["kernels"])
        bases = tuple(FourierBasis(b["a"], b["b"], int(b["M"])) for b in doc["bases"])
        cls = {"additive": AdditiveModel, "product": ProductModel}[doc["kernel"]]
        mean = np.asarray(doc["posterior"]["mean"], dtype=float)
        factor = np.asarray(doc["posterior"]["cov_factor"], dtype=float)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot load model {path}: {exc}") from exc
    if len(kernels) != len(bases) or not kernels:
        raise InputError(f"{path}: kernels and bases disagree")
    model = cls(kernels, bases)
    K = model.num_features
    if mean.shape != (K,) or factor.shape != (K, K):
        raise InputError(f"{path}: posterior has shape {mean.shape}, basis needs {K} features")
    return model, GaussianState(jnp.asarray(mean), jnp.asarray(factor))


def cmd_predict(cfg: dict) -> int:
    from .data import read_csv
    from .regression import predict

    model, state = load_model(_get(cfg, "model_file", str, required=True))
    Xs, _, _ = read_csv(_get(cfg, "xstar", str, required=True), target=None)
    out = _get(cfg, "out", str, required=True)
    if Xs.shape[0] and Xs.shape[1] != model.dim:
        raise InputError(f"inputs have {Xs.shape[1]} columns, model has {model.dim} dimensions")
    mean, var = predict(state, model.kuu(), model, Xs.reshape(-1, model.dim))
    mean, var = np.asarray(mean), np.asarray(var)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise NumericalError("non-finite predictions")
    try:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("mean,var\n")
            for m, v in zip(mean, var):
                fh.write(f"{float(m)!r},{float(v)!r}\n")
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    return EXIT_OK


# --------------------------------------------------------------- experiment

def cmd_experiment(cfg: dict) -> int:
    from .experiments import EXPERIMENTS, run_experiment

    name = cfg.get("name")
    if name not in EXPERIMENTS:
        raise InputError(f"unknown experiment {name!r}; available: {', '.join(sorted(EXPERIMENTS))}")
    seed = _seed(cfg)
    out = Path(_get(cfg, "out", str, required=True))
    t0 = time.perf_counter()
    try:
        summary = run_experiment(name, cfg, out, seed)
    except OSError as exc:
        raise InputError(f"cannot write results to {out}: {exc}") from exc
    summary = dict(experiment=name, seed=seed, wall_time_seconds=time.perf_counter() - t0,
                   summary=summary)
    _write_json(out / "summary.json", _jsonable(summary))
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# --------------------------------------------------------------------- main

def _common(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--M", type=int, help="frequencies per dimension")
    p.add_argument("--bounds", help="interval a,b used for every dimension")
    p.add_argument("--order", help="Matern order: 1/2, 3/2 or 5/2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vffgp", description="Variational Fourier feature GPs")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    _common(g)
    g.add_argument("--dataset", help="regression, product, banana or points")
    g.add_argument("--N", type=int)
    g.add_argument("--D", type=int)
    g.add_argument("--variance", type=float)
    g.add_argument("--lengthscale", type=float)
    g.add_argument("--noise", type=float)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model to a CSV dataset and write a JSON result")
    _common(f)
    f.add_argument("--data")
    f.add_argument("--model", help="conjugate, vgauss or mcmc")
    f.add_argument("--likelihood", help="gaussian, bernoulli or poisson")
    f.add_argument("--kernel", help="additive or product")
    f.add_argument("--covariance", help="full, kron or kronsum (vgauss)")
    f.add_argument("--margin", type=float)
    f.add_argument("--variance", type=float)
    f.add_argument("--lengthscale", type=float)
    f.add_argument("--noise", type=float)
    f.add_argument("--iterations", type=int, help="HMC iterations (mcmc)")
    f.add_argument("--with-oracle", action="store_true", help="also compute the exact GP log ml")
    f.add_argument("--save-model", help="write the fitted model for `vffgp predict`")
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict latent mean and variance at new inputs")
    _common(p)
    p.add_argument("model_file")
    p.add_argument("xstar")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("experiment", help="run a named experiment and write CSV tables")
    _common(e)
    e.add_argument("name")
    e.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(_merge(args))
    except (InputError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
