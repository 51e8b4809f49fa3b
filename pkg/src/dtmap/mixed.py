"""Per-subject sufficient statistics shared by the LMM and reduced-rank baselines.

Both baselines have marginal covariance ``B_i L L^T B_i^T + sigma2 I`` for some
``d x r`` factor ``L``; everything they need from subject ``i`` reduces to
``B_i^T B_i``, ``B_i^T y_i``, ``B_i^T 1``, ``y_i^T y_i``, ``1^T y_i`` and ``n_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import LOG_2PI
from .spline_basis import BasisConfig, design_matrix


@dataclass
class SubjectStats:
    G: np.ndarray       # (m, d, d)
    By: np.ndarray      # (m, d)
    B1: np.ndarray      # (m, d)
    yy: np.ndarray      # (m,)
    y1: np.ndarray      # (m,)
    n: np.ndarray       # (m,)

    @property
    def m(self) -> int:
        return self.n.size

    @property
    def total_n(self) -> int:
        return int(self.n.sum())

    def residual_cross(self, mu: float) -> np.ndarray:
        """``B_i^T (y_i - mu)`` for every subject."""
        return self.By - mu * self.B1

    def residual_sq(self, mu: float) -> np.ndarray:
        return self.yy - 2.0 * mu * self.y1 + mu * mu * self.n


def subject_stats(trajectories, basis: BasisConfig) -> SubjectStats:
    d = basis.d
    m = len(trajectories)
    G = np.zeros((m, d, d))
    By = np.zeros((m, d))
    B1 = np.zeros((m, d))
    yy = np.zeros(m)
    y1 = np.zeros(m)
    n = np.zeros(m)
    for i, tr in enumerate(trajectories):
        dm = design_matrix(basis, tr.times)
        G[i] = dm.gram
        By[i] = dm.rows.T @ tr.values
        B1[i] = dm.rows.sum(axis=0)
        yy[i] = tr.values @ tr.values
        y1[i] = tr.values.sum()
        n[i] = tr.n
    return SubjectStats(G, By, B1, yy, y1, n)


def factor_posterior(L: np.ndarray, sigma2: float, stats: SubjectStats, mu: float):
    """Posterior over factor scores ``z_i`` for ``w_i = L z_i``, ``z_i ~ N(0, I)``.

    Returns the per-subject marginal log-likelihoods, posterior means ``(m, r)``
    and posterior covariances ``(m, r, r)`` of ``z_i``.
    """
    r = L.shape[1]
    c = stats.residual_cross(mu)
    LtGL = np.einsum("ka,ikl,lb->iab", L, stats.G, L)
    A = np.eye(r) + LtGL / sigma2
    chol = np.linalg.cholesky(A)
    Ainv = np.linalg.inv(A)
    Ainv = 0.5 * (Ainv + np.swapaxes(Ainv, -1, -2))
    Ltc = c @ L
    zmean = np.einsum("iab,ib->ia", Ainv, Ltc) / sigma2
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1) + stats.n * np.log(sigma2)
    quad = (stats.residual_sq(mu) - np.einsum("ia,ia->i", Ltc, zmean)) / sigma2
    ll = -0.5 * (stats.n * LOG_2PI + logdet + quad)
    return ll, zmean, Ainv
