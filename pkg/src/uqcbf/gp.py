"""Exact Gaussian-process regression with an RBF kernel.

Dense Cholesky implementation for small datasets (n <= ~2000).
Hyperparameters are selected by maximizing the log marginal likelihood on a
log grid, which keeps the module free of an optimizer dependency.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular


class CholeskyError(RuntimeError):
    """Kernel matrix stayed indefinite after the jitter ladder."""


@dataclass(frozen=True)
class RbfKernel:
    signal_var: float
    length_scale: float
    noise_var: float

    def __post_init__(self):
        if min(self.signal_var, self.length_scale, self.noise_var) <= 0:
            raise ValueError("kernel hyperparameters must be positive")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        sq = np.sum(a ** 2, axis=1)[:, None] + np.sum(b ** 2, axis=1)[None, :] - 2 * a @ b.T
        np.maximum(sq, 0.0, out=sq)
        return self.signal_var * np.exp(-sq / (2.0 * self.length_scale ** 2))


@dataclass
class GpModel:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    kernel: RbfKernel
    cholesky_factor: np.ndarray  # lower triangular of K + noise I
    alpha: np.ndarray            # (K + noise I)^-1 y


def _chol_with_jitter(k: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for _ in range(9):
        try:
            return cholesky(k + jitter * np.eye(len(k)), lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10
    raise CholeskyError("kernel matrix not positive definite after jitter ladder")


def fit_gp(inputs: np.ndarray, targets: np.ndarray, kernel: RbfKernel) -> GpModel:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    k = kernel(x, x) + kernel.noise_var * np.eye(len(x))
    chol = _chol_with_jitter(k)
    alpha = cho_solve((chol, True), y)
    return GpModel(x, y, kernel, chol, alpha)


def predict_gp(model: GpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean (N, d_out) and diagonal variance (N, d_out)."""
    xq = np.atleast_2d(np.asarray(x, dtype=float))
    ks = model.kernel(xq, model.train_inputs)
    mean = ks @ model.alpha
    v = solve_triangular(model.cholesky_factor, ks.T, lower=True)
    var = model.kernel.signal_var - np.sum(v ** 2, axis=0)
    np.maximum(var, 0.0, out=var)
    return mean, np.repeat(var[:, None], mean.shape[1], axis=1)


def log_marginal_likelihood(inputs, targets, kernel: RbfKernel) -> float:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    k = kernel(x, x) + kernel.noise_var * np.eye(len(x))
    chol = _chol_with_jitter(k)
    alpha = cho_solve((chol, True), y)
    n, d = y.shape
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * np.sum(y * alpha) - 0.5 * d * logdet - 0.5 * n * d * np.log(2 * np.pi))


def fit_gp_ml(inputs, targets,
              signal_grid=(0.1, 0.3, 1.0, 3.0),
              length_grid=(0.1, 0.2, 0.4, 0.8, 1.6),
              noise_grid=(0.01, 0.03, 0.08, 0.15, 0.3)) -> GpModel:
    """Grid-search hyperparameters by log marginal likelihood, then fit."""
    best, best_lml = None, -np.inf
    for s, l, n in product(signal_grid, length_grid, noise_grid):
        kernel = RbfKernel(s, l, n)
        lml = log_marginal_likelihood(inputs, targets, kernel)
        if lml > best_lml:
            best, best_lml = kernel, lml
    return fit_gp(inputs, targets, best)
