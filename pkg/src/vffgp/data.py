"""Synthetic datasets, seeded random streams and CSV input/output."""

from __future__ import annotations

import csv
import io
import zlib

import numpy as np

from .baselines import MAX_DENSE_N, gram, regular_ff_model
from .exceptions import DataError
from .kernels import MaternKernel


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the sub-stream ``name`` of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def sample_gp(kernel: MaternKernel, x, rng: np.random.Generator,
              num_features: int = 4000) -> tuple[np.ndarray, str]:
    """Draw a zero-mean GP path at 1D inputs ``x``.

    Exact (dense Cholesky) up to 5000 points; beyond that a regular Fourier
    feature expansion is used. Returns the draw and the sampler name.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] <= MAX_DENSE_N:
        K = gram(kernel, x)
        L = np.linalg.cholesky(K + 1e-10 * float(kernel.variance) * np.eye(x.shape[0]))
        return L @ rng.standard_normal(x.shape[0]), "dense"
    span = float(np.ptp(x)) if x.size else 1.0
    spacing = np.pi / (4.0 * max(span, 1e-12))
    lam = float(kernel.decay)
    # cover the spectrum well past the decay rate, at most num_features terms
    M = int(min(num_features, max(200, np.ceil(200 * lam / spacing))))
    ff = regular_ff_model(kernel, spacing, M)
    return ff.sample(x - np.min(x), rng), "regular_ff"


def generate_regression(N: int, D: int = 1, order="3/2", variance: float = 1.0,
                        lengthscale: float = 0.2, noise: float = 0.05, seed: int = 0):
    """Inputs uniform on ``[0, 1]^D``; targets are a sum of independent 1D GP
    draws (variance split evenly across dimensions) plus Gaussian noise."""
    rng = named_rng(seed, "data")
    X = rng.uniform(size=(N, D))
    f = np.zeros(N)
    sampler = "dense"
    kernel = MaternKernel(order, variance / D, lengthscale)
    for d in range(D):
        if N:
            g, sampler = sample_gp(kernel, X[:, d], rng)
            f += g
    y = f + np.sqrt(noise) * rng.standard_normal(N)
    return X, y, sampler


def generate_product_regression(N: int, D: int, order="3/2", variance: float = 1.0,
                                lengthscale: float = 0.2, noise: float = 0.05, seed: int = 0):
    """Inputs uniform on ``[0, 1]^D``; targets from a product-kernel GP (dense)."""
    from .multidim import ProductModel
    rng = named_rng(seed, "data")
    X = rng.uniform(size=(N, D))
    model = ProductModel.from_data(X, order, 1, variance, lengthscale)
    K = gram(model, X)
    f = np.linalg.cholesky(K + 1e-10 * np.eye(N)) @ rng.standard_normal(N)
    return X, f + np.sqrt(noise) * rng.standard_normal(N)


def generate_banana(N: int = 400, seed: int = 0, noise: float = 0.25):
    """Two interleaved crescents in 2D with labels in {0, 1}, scaled to [0, 1]^2."""
    rng = named_rng(seed, "data")
    n0 = N // 2
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, N - n0)
    A = np.stack([np.cos(t0), np.sin(t0)], 1)
    B = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], 1)
    X = np.concatenate([A, B]) + noise * rng.standard_normal((N, 2))
    y = np.concatenate([np.zeros(n0), np.ones(N - n0)])
    X = (X - X.min(0)) / np.ptp(X, 0)
    perm = rng.permutation(N)
    return X[perm], y[perm]


def generate_point_pattern(seed: int = 0, grid: int = 64, variance: float = 1.0,
                           lengthscale: float = 0.15, mean_count: float = 150.0,
                           order="3/2"):
    """Events of a log Gaussian Cox process on ``[0, 1]^2``.

    The log-intensity is a separable-kernel GP drawn on a fine grid; counts
    per cell are Poisson and events are placed uniformly inside each cell.
    """
    rng = named_rng(seed, "data")
    centres = (np.arange(grid) + 0.5) / grid
    k = MaternKernel(order, 1.0, lengthscale)
    L = np.linalg.cholesky(gram(k, centres) + 1e-10 * np.eye(grid))
    f = np.sqrt(variance) * L @ rng.standard_normal((grid, grid)) @ L.T
    rate = np.exp(f)
    rate *= mean_count / rate.sum()
    counts = rng.poisson(rate)
    events = []
    for i, j in zip(*np.nonzero(counts)):
        n = counts[i, j]
        events.append(np.stack([(i + rng.uniform(size=n)) / grid,
                                (j + rng.uniform(size=n)) / grid], 1))
    events = np.concatenate(events) if events else np.zeros((0, 2))
    return events, f


def write_csv(path, X, y=None, names=None) -> None:
    """Comma-separated numeric table with a mandatory header."""
    X = np.asarray(X, dtype=float)
    X = X.reshape(X.shape[0], -1) if X.ndim != 2 else X
    cols = [X[:, d] for d in range(X.shape[1])]
    if names is None:
        names = [f"x{d + 1}" for d in range(X.shape[1])]
    if y is not None:
        cols.append(np.asarray(y, dtype=float).reshape(-1))
        names = list(names) + ["y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path, target: str | None = "y"):
    """Read a numeric CSV; returns ``(X, y, names)`` with ``y`` None if absent.

    Malformed cells raise `DataError` naming the row and column.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: empty file, a header row is required") from None
    rows = []
    for r, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        vals = []
        for c, cell in enumerate(row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {r}, column {c + 1} ({header[c]}): "
                                f"cannot parse {cell!r} as a number") from None
        rows.append(vals)
    table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if target is not None and target in header:
        j = header.index(target)
        X = np.delete(table, j, axis=1)
        names = [h for h in header if h != target]
        return X, table[:, j], names
    return table, None, header
