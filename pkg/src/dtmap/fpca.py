"""Reduced-rank mixed model (rank-q coefficient covariance) fitted by EM.

    x_i ~ N(0, I_q),   y_i | x_i ~ N(mu + B_i F x_i, sigma2 I)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .gaussian import Gaussian, symmetrize
from .lmm import EMConfig, LmmModel, heldout_ll
from .mixed import factor_posterior, subject_stats
from .spline_basis import BasisConfig, design_matrix


@dataclass
class FpcaModel:
    mu: float
    F: np.ndarray
    sigma2: float
    basis: BasisConfig
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def q(self) -> int:
        return self.F.shape[1]

    def to_dict(self) -> dict:
        return {"mu": self.mu, "F": self.F.reshape(-1).tolist(), "sigma2": self.sigma2,
                "basis": self.basis.to_dict(), "q": self.q}

    @classmethod
    def from_dict(cls, obj: dict) -> "FpcaModel":
        basis = BasisConfig.from_dict(obj["basis"])
        F = np.asarray(obj["F"], dtype=float).reshape(basis.d, int(obj["q"]))
        return cls(float(obj["mu"]), F, float(obj["sigma2"]), basis)


def canonicalize(F: np.ndarray) -> np.ndarray:
    """Orthogonal columns with non-increasing norms; first nonzero entry of each column positive."""
    U, s, _ = np.linalg.svd(F, full_matrices=False)
    F = U * s
    for j in range(F.shape[1]):
        nz = np.flatnonzero(np.abs(F[:, j]) > 1e-14 * max(s[0], 1e-300))
        if nz.size and F[nz[0], j] < 0:
            F[:, j] = -F[:, j]
    return F


def em_step(stats, mu, F, sigma2):
    """Joint EM update of ``(mu, F, sigma2)``. Returns new params and loglik before the step."""
    d, q = F.shape
    ll, xmean, xcov = factor_posterior(F, sigma2, stats, mu)
    Exx = xcov + np.einsum("ia,ib->iab", xmean, xmean)

    # mean of y_i is X_i theta with theta = [mu, vec(F)], X_i = [1, x_i^T kron B_i]
    H = np.zeros((1 + d * q, 1 + d * q))
    H[0, 0] = stats.total_n
    cross = np.einsum("ia,ik->ak", xmean, stats.B1).reshape(-1)
    H[0, 1:] = cross
    H[1:, 0] = cross
    H[1:, 1:] = np.einsum("iab,ikl->akbl", Exx, stats.G).reshape(d * q, d * q)
    rhs = np.concatenate([[stats.y1.sum()], np.einsum("ia,ik->ak", xmean, stats.By).reshape(-1)])
    H = symmetrize(H)
    theta = np.linalg.lstsq(H, rhs, rcond=None)[0]
    ssr = stats.yy.sum() - 2.0 * theta @ rhs + theta @ H @ theta
    mu_new = float(theta[0])
    F_new = theta[1:].reshape(q, d).T
    sigma2_new = float(max(ssr / stats.total_n, 1e-12))
    return mu_new, F_new, sigma2_new, float(ll.sum())


def marginal_loglik(stats, mu, F, sigma2) -> float:
    return float(factor_posterior(F, sigma2, stats, mu)[0].sum())


def fit_fpca(ds, basis: BasisConfig, q: int = 2, em: EMConfig | None = None, *,
             warm: LmmModel | None = None, init=None, seed: int = 0) -> FpcaModel:
    """Fit the rank-``q`` model; warm-starts from a fitted LMM when given."""
    em = em or EMConfig()
    d = basis.d
    if q > d:
        raise ValueError(f"rank q={q} exceeds basis dimension d={d}")
    if ds.n < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} observations, got {ds.n}")
    stats = subject_stats(ds.trajectories, basis)

    if init is not None:
        mu, F, sigma2 = init
        F = np.asarray(F, dtype=float)
    elif warm is not None:
        vals, vecs = np.linalg.eigh(warm.Sigma)
        order = np.argsort(vals)[::-1][:q]
        F = vecs[:, order] * np.sqrt(np.clip(vals[order], 0.0, None))
        mu, sigma2 = warm.mu, warm.sigma2
    else:
        y = ds.pooled_values()
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.standard_normal((d, q)))
        F = Q * np.sqrt(max(y.var(), 1e-8))
        mu, sigma2 = float(y.mean()), float(max(y.var(), 1e-8))

    trace = []
    for _ in range(em.max_iters):
        mu, F, sigma2, ll = em_step(stats, mu, F, sigma2)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= em.rel_tol * abs(trace[-1]):
            break
    trace.append(marginal_loglik(stats, mu, F, sigma2))
    return FpcaModel(mu, canonicalize(F), sigma2, basis, loglik_trace=trace)


def fpca_embed(model: FpcaModel, traj) -> Gaussian:
    """Posterior over the rank-q score ``x_i`` of one trajectory."""
    q = model.q
    B = design_matrix(model.basis, traj.times).rows
    if B.shape[0] == 0:
        return Gaussian(np.zeros(q), np.eye(q))
    BF = B @ model.F
    prec = np.eye(q) + BF.T @ BF / model.sigma2
    cov = symmetrize(np.linalg.inv(prec))
    mean = cov @ BF.T @ (traj.values - model.mu) / model.sigma2
    return Gaussian(mean, cov)


def fpca_embed_all(model: FpcaModel, ds) -> EmbeddingSet:
    stats = subject_stats(ds.trajectories, model.basis)
    _, xmean, xcov = factor_posterior(model.F, model.sigma2, stats, model.mu)
    return EmbeddingSet(ds.subject_ids, xmean, xcov, model_tag="fpca")


def fpca_heldout_ll(model: FpcaModel, traj) -> dict:
    return heldout_ll(model.mu, model.F @ model.F.T, model.sigma2, model.basis, traj)
