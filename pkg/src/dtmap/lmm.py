"""Fixed-basis linear mixed model fitted by EM.

    w_i ~ N(0, Sigma),   y_i | w_i ~ N(mu + B_i w_i, sigma2 I)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .gaussian import Gaussian, mvn_logpdf, psd_sqrt_factor, symmetrize
from .mixed import factor_posterior, subject_stats
from .spline_basis import BasisConfig, design_matrix

log = logging.getLogger(__name__)


@dataclass
class EMConfig:
    max_iters: int = 500
    rel_tol: float = 1e-6


@dataclass
class LmmModel:
    mu: float
    Sigma: np.ndarray
    sigma2: float
    basis: BasisConfig
    pca_basis: np.ndarray | None = None
    coef_mean: np.ndarray | None = None
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def d(self) -> int:
        return self.basis.d

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "Sigma": self.Sigma.reshape(-1).tolist(),
            "sigma2": self.sigma2,
            "basis": self.basis.to_dict(),
            "pca_basis": None if self.pca_basis is None else self.pca_basis.reshape(-1).tolist(),
            "pca_components": None if self.pca_basis is None else self.pca_basis.shape[1],
            "coef_mean": None if self.coef_mean is None else self.coef_mean.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LmmModel":
        basis = BasisConfig.from_dict(obj["basis"])
        d = basis.d
        pca = obj.get("pca_basis")
        return cls(
            mu=float(obj["mu"]),
            Sigma=np.asarray(obj["Sigma"], dtype=float).reshape(d, d),
            sigma2=float(obj["sigma2"]),
            basis=basis,
            pca_basis=None if pca is None else np.asarray(pca, dtype=float).reshape(d, obj["pca_components"]),
            coef_mean=None if obj.get("coef_mean") is None else np.asarray(obj["coef_mean"], dtype=float),
        )


def _repair(Sigma: np.ndarray) -> np.ndarray:
    d = Sigma.shape[0]
    tr = float(np.trace(Sigma))
    if np.linalg.eigvalsh(Sigma)[0] <= 1e-12 * max(tr, 1e-300):
        jitter = 1e-8 * max(tr, 1e-12) / d
        log.warning("random-effect covariance is singular; adding jitter %.3g", jitter)
        Sigma = Sigma + jitter * np.eye(d)
    return Sigma


def marginal_loglik(stats, mu, Sigma, sigma2) -> float:
    ll, _, _ = factor_posterior(psd_sqrt_factor(Sigma), sigma2, stats, mu)
    return float(ll.sum())


def em_step(stats, mu, Sigma, sigma2):
    """One EM iteration. Returns ``(mu, Sigma, sigma2, loglik_before)``."""
    L = psd_sqrt_factor(Sigma)
    ll, zmean, zcov = factor_posterior(L, sigma2, stats, mu)
    wmean = zmean @ L.T
    wcov = np.einsum("ka,iab,lb->ikl", L, zcov, L)

    n = stats.total_n
    mu_new = float((stats.y1.sum() - np.einsum("ik,ik->", stats.B1, wmean)) / n)
    c = stats.residual_cross(mu_new)
    ssr = (stats.residual_sq(mu_new) - 2.0 * np.einsum("ik,ik->i", c, wmean)
           + np.einsum("ik,ikl,il->i", wmean, stats.G, wmean)
           + np.einsum("ikl,ilk->i", stats.G, wcov))
    sigma2_new = float(ssr.sum() / n)
    Sigma_new = symmetrize((wmean.T @ wmean + wcov.sum(axis=0)) / stats.m)
    return mu_new, _repair(Sigma_new), sigma2_new, float(ll.sum())


def posterior_means(model: LmmModel, stats) -> tuple[np.ndarray, np.ndarray]:
    L = psd_sqrt_factor(model.Sigma)
    _, zmean, zcov = factor_posterior(L, model.sigma2, stats, model.mu)
    return zmean @ L.T, np.einsum("ka,iab,lb->ikl", L, zcov, L)


def _pca(points: np.ndarray, k: int):
    center = points.mean(axis=0)
    cov = np.cov(points - center, rowvar=False, bias=True).reshape(points.shape[1], points.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude entry of each direction positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(vecs.shape[1])])
    return center, vecs, vals[order]


def fit_lmm(ds, basis: BasisConfig, em: EMConfig | None = None, *, init=None,
            n_components: int = 2) -> LmmModel:
    """Fit ``(mu, Sigma, sigma2)`` by EM.

    ``init`` optionally overrides the default start ``(mean(y), I, var(y))``.
    """
    em = em or EMConfig()
    if ds.n < basis.d + 1:
        raise ValueError(f"need at least d + 1 = {basis.d + 1} observations, got {ds.n}")
    stats = subject_stats(ds.trajectories, basis)
    if init is None:
        y = ds.pooled_values()
        mu, Sigma, sigma2 = float(y.mean()), np.eye(basis.d), float(max(y.var(), 1e-8))
    else:
        mu, Sigma, sigma2 = init
        Sigma = np.asarray(Sigma, dtype=float)

    # trace[t] is the marginal log-likelihood of the t-th iterate
    trace = []
    for _ in range(em.max_iters):
        mu, Sigma, sigma2, ll = em_step(stats, mu, Sigma, sigma2)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= em.rel_tol * abs(trace[-1]):
            break
    trace.append(marginal_loglik(stats, mu, Sigma, sigma2))

    model = LmmModel(mu, Sigma, sigma2, basis, loglik_trace=trace)
    wmean, _ = posterior_means(model, stats)
    k = min(n_components, basis.d)
    model.coef_mean, model.pca_basis, _ = _pca(wmean, k)
    return model


def lmm_posterior_coefficients(model: LmmModel, traj) -> Gaussian:
    """Conjugate posterior over ``w_i`` given one trajectory."""
    B = design_matrix(model.basis, traj.times).rows
    if B.shape[0] == 0:
        return Gaussian(np.zeros(model.d), model.Sigma.copy())
    # covariance-form update avoids inverting Sigma
    r = traj.values - model.mu
    SBt = model.Sigma @ B.T
    K = B @ SBt + model.sigma2 * np.eye(B.shape[0])
    gain = np.linalg.solve(K, SBt.T).T
    mean = gain @ r
    cov = symmetrize(model.Sigma - gain @ SBt.T)
    return Gaussian(mean, cov)


def lmm_embed(model: LmmModel, ds) -> EmbeddingSet:
    if model.pca_basis is None:
        raise ValueError("model has no principal subspace; fit it first")
    stats = subject_stats(ds.trajectories, model.basis)
    wmean, wcov = posterior_means(model, stats)
    P = model.pca_basis
    means = (wmean - model.coef_mean) @ P
    covs = np.einsum("ka,ikl,lb->iab", P, wcov, P)
    return EmbeddingSet(ds.subject_ids, means, covs, model_tag="lmm")


def heldout_ll(mu: float, cov_coef: np.ndarray, sigma2: float, basis: BasisConfig, traj) -> dict:
    B = design_matrix(basis, traj.times).rows
    n = B.shape[0]
    if n == 0:
        return {"subject_ll": 0.0, "obs_ll": 0.0}
    cov = B @ cov_coef @ B.T + sigma2 * np.eye(n)
    ll = mvn_logpdf(traj.values, np.full(n, mu), cov)
    return {"subject_ll": ll, "obs_ll": ll / n}


def lmm_heldout_ll(model: LmmModel, traj) -> dict:
    return heldout_ll(model.mu, model.Sigma, model.sigma2, model.basis, traj)
