from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def mvn_logpdf(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Dense multivariate-normal log density through a Cholesky factor."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n == 0:
        return 0.0
    L = np.linalg.cholesky(cov)
    z = solve_triangular(L, y - mean, lower=True)
    return float(-0.5 * (n * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def psd_sqrt_factor(a: np.ndarray) -> np.ndarray:
    """A factor ``L`` with ``L @ L.T == a`` for a symmetric PSD matrix (possibly singular)."""
    vals, vecs = np.linalg.eigh(symmetrize(a))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def chol_inverse(a: np.ndarray) -> np.ndarray:
    c = cho_factor(a, lower=True)
    return cho_solve(c, np.eye(a.shape[0]))


def logdet_pd(a: np.ndarray) -> float:
    return 2.0 * float(np.log(np.diag(np.linalg.cholesky(a))).sum())
