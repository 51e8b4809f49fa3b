"""Local updates, natural-gradient global updates and the SVI training loop."""
from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from ..lmm import EMConfig, fit_lmm
from ..mixed import subject_stats
from ..spline_basis import build_basis
from .objective import (
    elbo,
    global_cache,
    hyper_gradients,
    local_objective,
    natural_targets,
    pack_local,
    subject_terms,
    unpack_local,
)
from .state import DtmConfig, DtmState, init_dtm

log = logging.getLogger(__name__)


def optimize_local(state: DtmState, t, g, mean, cov, max_iters: int = 20, grad_tol: float = 1e-6):
    """Conjugate-gradient ascent on one subject's ``q(x)``; never returns a worse point."""
    q = state.q
    theta0 = pack_local(np.asarray(mean, float), np.asarray(cov, float))
    f0, _ = local_objective(theta0, state, t, g)

    def neg(theta):
        v, gr = local_objective(theta, state, t, g)
        if not np.isfinite(v):
            return np.inf, np.zeros_like(theta)
        return -v, -gr

    res = minimize(neg, theta0, jac=True, method="CG",
                   options={"maxiter": max_iters, "gtol": grad_tol})
    theta = res.x
    if not np.isfinite(res.fun) or -res.fun < f0:
        theta = theta0
    new_mean, L = unpack_local(theta, q)
    return new_mean.copy(), L @ L.T


def local_step(state: DtmState, stats, i: int, max_iters: int = 20, grad_tol: float = 1e-6, g=None):
    """Refit ``(m_i, S_i)`` with the globals held fixed; updates ``state`` in place."""
    g = g or global_cache(state)
    t = subject_terms(state, g, stats, i)
    mean, cov = optimize_local(state, t, g, state.local_means[i], state.local_covs[i], max_iters, grad_tol)
    state.local_means[i] = mean
    state.local_covs[i] = cov
    return mean, cov


def global_natural_step(state: DtmState, stats, batch, lam: float, scale: float | None = None,
                        max_halvings: int = 10) -> float:
    """Natural-gradient step on ``q(u)``; updates ``state`` in place and returns the step used.

    With ``theta1 = S^-1 m`` and ``theta2 = -S^-1 / 2`` the step is
    ``theta <- theta + lam (eta - theta)``.
    """
    if not 0 <= lam <= 1:
        raise ValueError("step size must lie in [0, 1]")
    batch = list(batch)
    if lam == 0:
        return 0.0
    if scale is None:
        scale = state.n_subjects / len(batch)
    eta1, Lam = natural_targets(state, stats, batch, scale)
    pd_ = state.p * state.d
    Sinv = cho_solve((state.S_chol, True), np.eye(pd_))
    Sinv = 0.5 * (Sinv + Sinv.T)
    theta1 = Sinv @ state.m
    for _ in range(max_halvings + 1):
        prec = (1.0 - lam) * Sinv + lam * Lam
        try:
            Lp = np.linalg.cholesky(0.5 * (prec + prec.T))
        except np.linalg.LinAlgError:
            lam *= 0.5
            continue
        th1 = (1.0 - lam) * theta1 + lam * eta1
        state.m = cho_solve((Lp, True), th1)
        # chol(S) from chol(S^-1): S = Lp^-T Lp^-1
        Lp_inv = solve_triangular(Lp, np.eye(pd_), lower=True)
        state.set_S(Lp_inv.T @ Lp_inv)
        return lam
    raise np.linalg.LinAlgError("natural-gradient step left the positive-definite cone")


def hyper_step(state: DtmState, stats, batch, lam: float, scale: float, n_obs: float) -> dict:
    """Plain gradient ascent on ``(mu, log sigma2, log alpha, log ell)``; gradients are per observation."""
    gr = hyper_gradients(state, stats, batch, scale)
    h = state.hyper
    step = lam / max(n_obs, 1.0)
    h.mu += step * gr["d_mu"]
    h.sigma2 = float(np.exp(np.log(h.sigma2) + step * gr["d_log_sigma2"]))
    h.alpha = float(np.exp(np.log(h.alpha) + step * gr["d_log_alpha"]))
    h.ell = float(np.exp(np.log(h.ell) + step * gr["d_log_ell"]))
    return gr


def learning_rate(cfg: DtmConfig, epoch: int, iteration: int) -> float:
    t = epoch if cfg.decay == "epoch" else iteration
    return cfg.lr0 / t


def fit_dtm(ds, cfg: DtmConfig | None = None, *, basis=None, warm=None, state: DtmState | None = None,
            track_elbo: bool = False) -> DtmState:
    """Stochastic variational training.

    Each iteration refits the locals of a minibatch, takes a natural step on
    ``q(u)`` with ``lr0 / t`` and, when enabled, a gradient step on the
    hyperparameters. A final pass refits every subject's locals.
    """
    cfg = cfg or DtmConfig()
    if ds.m == 0:
        raise ValueError("empty dataset")
    fresh = state is None
    if fresh:
        basis = basis or build_basis(ds)
        warm = warm or fit_lmm(ds, basis, EMConfig())
        state = init_dtm(ds, basis, cfg, warm)
    stats = subject_stats(ds.trajectories, state.basis)
    if fresh:
        # start q(u) at its optimum given the warm-start locals, so the map
        # already carries the cluster structure before the first local step
        global_natural_step(state, stats, range(ds.m), 1.0, scale=1.0)
    rng = np.random.default_rng(cfg.seed)
    n_obs = float(ds.n)
    m = ds.m
    bs = min(cfg.batch_size, m)
    history = []
    if track_elbo:
        history.append(elbo(state, stats).total)

    iteration = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(m)
        for start in range(0, m, bs):
            iteration += 1
            batch = order[start:start + bs]
            g = global_cache(state)
            for i in batch:
                local_step(state, stats, int(i), cfg.local_max_iters, cfg.local_grad_tol, g)
            lam = learning_rate(cfg, epoch, iteration)
            scale = m / len(batch)
            global_natural_step(state, stats, batch, lam, scale)
            if cfg.learn_hypers:
                hyper_step(state, stats, batch, lam, scale, n_obs)
            if track_elbo:
                history.append(elbo(state, stats).total)
        log.debug("epoch %d done (lambda=%.4g)", epoch, lam)

    g = global_cache(state)
    for i in range(m):
        local_step(state, stats, i, cfg.local_max_iters, cfg.local_grad_tol, g)
    if track_elbo:
        history.append(elbo(state, stats).total)
    state.history = history
    return state
