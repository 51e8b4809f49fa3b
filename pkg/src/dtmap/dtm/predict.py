"""Posterior coefficient process, predictive trajectories and new-subject inference."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..embeddings import EmbeddingSet
from ..gaussian import LOG_2PI, Gaussian, mvn_logpdf
from ..kernels import gram
from ..mixed import subject_stats
from ..spline_basis import design_matrix
from .inference import optimize_local
from .objective import global_cache, subject_terms
from .state import DtmState


def coeff_posterior_batch(state: DtmState, X: np.ndarray, g=None):
    """Means ``(R, d)`` and covariances ``(R, d, d)`` of ``w | x`` for each row of ``X``."""
    g = g or global_cache(state)
    h = state.hyper
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Kx = gram(X, state.Z, h.kernel)               # (R, p)
    A = Kx @ g.Kinv                                # rows are k_x^T K^-1
    means = A @ g.M
    ktilde = np.clip(h.alpha - np.einsum("rp,rp->r", A, Kx), 0.0, None)
    covs = np.einsum("ra,kalb,rb->rkl", A, g.S4, A)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    covs += ktilde[:, None, None] * np.eye(state.d)
    return means, covs


def coeff_posterior(state: DtmState, x) -> Gaussian:
    means, covs = coeff_posterior_batch(state, np.asarray(x, dtype=float)[None, :])
    return Gaussian(means[0], covs[0])


def predict_trajectory(state: DtmState, x, times) -> Gaussian:
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size == 0:
        return Gaussian(np.zeros(0), np.zeros((0, 0)))
    w = coeff_posterior(state, x)
    B = design_matrix(state.basis, times).rows
    cov = B @ w.cov @ B.T + state.hyper.sigma2 * np.eye(times.size)
    return Gaussian(state.hyper.mu + B @ w.mean, 0.5 * (cov + cov.T))


def predictive_logpdf(state: DtmState, traj, X: np.ndarray) -> np.ndarray:
    """``log N(y; mu + B mu(x_r), B Sigma(x_r) B^T + sigma2 I)`` for each row ``x_r``."""
    X = np.atleast_2d(X)
    B = design_matrix(state.basis, traj.times).rows
    n = B.shape[0]
    if n == 0:
        return np.zeros(len(X))
    means, covs = coeff_posterior_batch(state, X)
    h = state.hyper
    resid = traj.values[None, :] - h.mu - means @ B.T
    C = np.einsum("nk,rkl,ml->rnm", B, covs, B) + h.sigma2 * np.eye(n)
    L = np.linalg.cholesky(C)
    z = np.linalg.solve(L, resid[:, :, None])[:, :, 0]
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
    return -0.5 * (n * LOG_2PI + logdet + (z * z).sum(1))


def heldout_ll_at(state: DtmState, traj, x) -> float:
    """Predictive log density with the latent fixed at ``x``."""
    pred = predict_trajectory(state, x, traj.times)
    return mvn_logpdf(traj.values, pred.mean, pred.cov)


def embed_new(state: DtmState, traj, max_iters: int = 100, grad_tol: float = 1e-8) -> Gaussian:
    """Variational posterior ``q(x*)`` for an unseen trajectory with all globals frozen."""
    q = state.q
    if traj.n == 0:
        return Gaussian(np.zeros(q), np.eye(q))
    stats = subject_stats([traj], state.basis)
    g = global_cache(state)
    t = subject_terms(state, g, stats, 0)
    mean, cov = optimize_local(state, t, g, np.zeros(q), np.eye(q), max_iters, grad_tol)
    return Gaussian(mean, cov)


def mc_heldout_ll(state: DtmState, traj, n_samples: int = 256, rng=None,
                  posterior: Gaussian | None = None) -> dict:
    """Monte Carlo log predictive density, latents drawn from the prior or ``posterior``."""
    rng = np.random.default_rng(rng)
    q = state.q
    eps = rng.standard_normal((n_samples, q))
    if posterior is None:
        X = eps
    else:
        X = posterior.mean + eps @ np.linalg.cholesky(posterior.cov).T
    if traj.n == 0:
        return {"subject_ll": 0.0, "obs_ll": 0.0}
    lp = predictive_logpdf(state, traj, X)
    ll = float(logsumexp(lp) - np.log(n_samples))
    return {"subject_ll": ll, "obs_ll": ll / traj.n}


def dtm_embed(state: DtmState) -> EmbeddingSet:
    return EmbeddingSet(list(state.subject_ids), state.local_means.copy(), state.local_covs.copy(),
                        model_tag="dtm")
