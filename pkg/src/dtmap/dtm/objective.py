"""Evidence lower bound of the trajectory map and its analytic gradients.

Notation: ``p`` inducing inputs ``Z``, ``d`` basis coefficients, inducing
values ``u = vec(U)`` stacked coefficient by coefficient (``u[k*p + j]`` is the
value of coefficient ``k`` at ``z_j``), ``q(u) = N(m, S)``,
``q(x_i) = N(m_i, S_i)``. For subject ``i`` with residual ``r_i = y_i - mu``:

    a_i = K^-1 M B_i^T r_i                       (p-vector; M is m as p x d)
    W_i = M G_i M^T + sum_kk' G_i[k', k] S_kk'   (p x p; G_i = B_i^T B_i)
    Q_i = K^-1 W_i K^-1 - tr(G_i) K^-1

and the expected log-likelihood part of the bound is

    L_i = -n_i/2 log(2 pi sigma2)
          - (r_i^T r_i - 2 psi1_i^T a_i + tr(Q_i psi2_i) + tr(G_i) alpha) / (2 sigma2).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..gaussian import LOG_2PI
from ..kernels import _psi, gram, gram_dlog_ell, psi_dlog_ell
from .state import DtmState


@dataclass
class ElboBreakdown:
    expected_loglik: float
    trace_S_term: float
    ktilde_trace_term: float
    kl_x: float
    kl_u: float
    log_hyper_prior: float
    total: float = 0.0

    def __post_init__(self):
        self.total = (self.expected_loglik + self.trace_S_term + self.ktilde_trace_term
                      - self.kl_x - self.kl_u + self.log_hyper_prior)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Globals:
    """Quantities shared by every subject for a fixed global state."""

    K: np.ndarray
    Kinv: np.ndarray
    logdetK: float
    M: np.ndarray
    S: np.ndarray
    S4: np.ndarray
    logdetS: float


def global_cache(state: DtmState) -> Globals:
    h = state.hyper
    K = gram(state.Z, state.Z, h.kernel, h.jitter)
    cf = cho_factor(K, lower=True)
    Kinv = cho_solve(cf, np.eye(state.p))
    Kinv = 0.5 * (Kinv + Kinv.T)
    logdetK = 2.0 * float(np.log(np.diag(cf[0])).sum())
    S = state.S
    d, p = state.d, state.p
    logdetS = 2.0 * float(np.log(np.abs(np.diag(state.S_chol))).sum())
    return Globals(K, Kinv, logdetK, state.M, S, S.reshape(d, p, d, p), logdetS)


@dataclass
class SubjectTerms:
    """Per-subject quantities that stay fixed while only ``q(x_i)`` changes."""

    n: float
    r2: float
    c: np.ndarray          # B^T r
    trG: float
    a: np.ndarray          # K^-1 M c
    quad_K: np.ndarray     # K^-1 M G M^T K^-1
    trace_K: np.ndarray    # K^-1 T K^-1
    Q: np.ndarray

    def const(self, sigma2: float, alpha: float) -> float:
        return -0.5 * self.n * (LOG_2PI + np.log(sigma2)) - 0.5 * (self.r2 + self.trG * alpha) / sigma2


def subject_terms(state: DtmState, g: Globals, stats, i: int) -> SubjectTerms:
    mu = state.hyper.mu
    G = stats.G[i]
    c = stats.By[i] - mu * stats.B1[i]
    r2 = stats.yy[i] - 2.0 * mu * stats.y1[i] + mu * mu * stats.n[i]
    Kinv = g.Kinv
    a = Kinv @ (g.M @ c)
    KM = Kinv @ g.M
    quad_K = KM @ G @ KM.T
    T = np.einsum("kalb,kl->ab", g.S4, G)
    trace_K = Kinv @ T @ Kinv
    trG = float(np.trace(G))
    Q = quad_K + trace_K - trG * Kinv
    return SubjectTerms(float(stats.n[i]), float(r2), c, trG, a, quad_K, 0.5 * (trace_K + trace_K.T), Q)


def kl_gaussian_std(mean: np.ndarray, cov: np.ndarray) -> float:
    """KL(N(mean, cov) || N(0, I))."""
    q = mean.size
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return np.inf
    return 0.5 * float(np.trace(cov) + mean @ mean - q - logdet)


def kl_u(state: DtmState, g: Globals) -> float:
    d, p = state.d, state.p
    R = np.einsum("kakb->ab", g.S4) + g.M @ g.M.T
    return 0.5 * float(np.sum(g.Kinv * R) - p * d + d * g.logdetK - g.logdetS)


def subject_elbo_parts(state: DtmState, g: Globals, stats, i: int, mean=None, cov=None):
    """``(expected_loglik, trace_S_term, ktilde_trace_term)`` for subject ``i``."""
    h = state.hyper
    mean = state.local_means[i] if mean is None else mean
    cov = state.local_covs[i] if cov is None else cov
    t = subject_terms(state, g, stats, i)
    ps, _ = _psi(np.asarray(mean, float), np.asarray(cov, float), state.Z, h.kernel)
    s2 = h.sigma2
    ell = (-0.5 * t.n * (LOG_2PI + np.log(s2))
           - 0.5 * (t.r2 - 2.0 * ps.psi1 @ t.a + np.sum(t.quad_K * ps.psi2)) / s2)
    trS = -0.5 * np.sum(t.trace_K * ps.psi2) / s2
    ktl = -0.5 * t.trG * (h.alpha - np.sum(g.Kinv * ps.psi2)) / s2
    return float(ell), float(trS), float(ktl)


def expected_local_loglik(state: DtmState, stats, i: int, g: Globals | None = None) -> float:
    """Closed-form ``E_{q(u) q(x_i)}[log p~(y_i | u, x_i)]``."""
    g = g or global_cache(state)
    return float(sum(subject_elbo_parts(state, g, stats, i)))


def svi_scale(state: DtmState, batch) -> float:
    return state.n_subjects / len(batch)


def elbo(state: DtmState, stats, batch=None, scale: float | str = 1.0) -> ElboBreakdown:
    """The bound on a batch of subject indices.

    ``scale`` multiplies the per-subject terms (including the latent KL);
    ``scale="svi"`` uses ``n_subjects / len(batch)``.
    """
    batch = range(state.n_subjects) if batch is None else list(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if scale == "svi":
        scale = svi_scale(state, batch)
    elif scale == "full":
        scale = 1.0
    g = global_cache(state)
    e = ts = kt = klx = 0.0
    for i in batch:
        a, b, c = subject_elbo_parts(state, g, stats, i)
        e += a
        ts += b
        kt += c
        klx += kl_gaussian_std(state.local_means[i], state.local_covs[i])
    return ElboBreakdown(scale * e, scale * ts, scale * kt, scale * klx, kl_u(state, g),
                         state.hyper.log_prior())


# ---------------------------------------------------------------------------
# global (q(u)) gradients


def natural_targets(state: DtmState, stats, batch, scale: float, g: Globals | None = None):
    """Batch estimates ``(eta1, Lambda)`` with ``eta2 = -Lambda / 2``.

    ``Lambda`` includes the prior precision ``I_d kron K^-1``, so
    ``S = Lambda^-1``, ``m = S eta1`` is the optimum of the bound in ``q(u)``.
    """
    g = g or global_cache(state)
    h = state.hyper
    d, p = state.d, state.p
    eta1 = np.zeros(p * d)
    lik = np.zeros((d, d, p, p))
    for i in batch:
        ps, _ = _psi(state.local_means[i], state.local_covs[i], state.Z, h.kernel)
        c = stats.By[i] - h.mu * stats.B1[i]
        eta1 += np.kron(c, g.Kinv @ ps.psi1)
        P = g.Kinv @ ps.psi2 @ g.Kinv
        lik += stats.G[i][:, :, None, None] * P[None, None, :, :]
    Lam = (scale / h.sigma2) * lik.transpose(0, 2, 1, 3).reshape(p * d, p * d)
    Lam += np.kron(np.eye(d), g.Kinv)
    return (scale / h.sigma2) * eta1, 0.5 * (Lam + Lam.T)


def global_gradients(state: DtmState, stats, batch=None, scale: float = 1.0):
    """Euclidean gradients of :func:`elbo` with respect to ``m`` and ``S``.

    ``dJ/dm = eta1 - Lambda m`` and ``dJ/dS = (S^-1 - Lambda) / 2``.
    """
    batch = range(state.n_subjects) if batch is None else list(batch)
    eta1, Lam = natural_targets(state, stats, batch, scale)
    Sinv = cho_solve((state.S_chol, True), np.eye(state.p * state.d))
    return eta1 - Lam @ state.m, 0.5 * (0.5 * (Sinv + Sinv.T) - Lam)


# ---------------------------------------------------------------------------
# local (q(x_i)) objective


def _tril(q):
    return np.tril_indices(q)


def pack_local(mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """``(m_i, S_i)`` to the unconstrained log-Cholesky vector."""
    q = mean.size
    L = np.linalg.cholesky(cov)
    Lp = L.copy()
    Lp[np.diag_indices(q)] = np.log(np.diag(L))
    return np.concatenate([mean, Lp[_tril(q)]])


def unpack_local(theta: np.ndarray, q: int):
    mean = theta[:q]
    L = np.zeros((q, q))
    L[_tril(q)] = theta[q:]
    di = np.diag_indices(q)
    L[di] = np.exp(L[di])
    return mean, L


def local_objective(theta: np.ndarray, state: DtmState, t: SubjectTerms, g: Globals):
    """Subject ``i``'s share of the bound as a function of ``q(x_i)``, with gradient.

    Returns ``(value, grad)`` in the log-Cholesky parameterization.
    """
    from ..kernels import psi_local_grads

    h = state.hyper
    q = state.q
    mean, L = unpack_local(theta, q)
    S = L @ L.T
    g1 = t.a / h.sigma2
    g2 = -0.5 * t.Q / h.sigma2
    val, gm, gS, _ = psi_local_grads(mean, S, state.Z, h.kernel, g1, g2)
    val += t.const(h.sigma2, h.alpha)

    # minus KL(q(x_i) || N(0, I))
    logdetS = 2.0 * np.log(np.diag(L)).sum()
    val -= 0.5 * (np.trace(S) + mean @ mean - q - logdetS)
    gm = gm - mean
    Sinv = cho_solve((L, True), np.eye(q))
    gS = gS - 0.5 * (np.eye(q) - Sinv)

    gL = 2.0 * gS @ L
    di = np.diag_indices(q)
    gL[di] *= L[di]
    return float(val), np.concatenate([gm, np.tril(gL)[_tril(q)]])


# ---------------------------------------------------------------------------
# hyperparameter gradients


def hyper_gradients(state: DtmState, stats, batch=None, scale: float | str = 1.0) -> dict:
    """Gradients of :func:`elbo` with respect to ``mu``, ``log sigma2``, ``log alpha``, ``log ell``."""
    batch = range(state.n_subjects) if batch is None else list(batch)
    if scale == "svi":
        scale = svi_scale(state, batch)
    h = state.hyper
    g = global_cache(state)
    s2, alpha = h.sigma2, h.alpha
    Kinv = g.Kinv

    d_mu = 0.0
    d_ls = 0.0
    psi_a = psi_l = 0.0     # psi contributions to log alpha / log ell
    explicit_a = 0.0
    GK = np.zeros_like(Kinv)    # accumulated so that the K-contribution is tr(GK dK)
    for i in batch:
        t = subject_terms(state, g, stats, i)
        ps, dpsi1_l, dpsi2_l = psi_dlog_ell(state.local_means[i], state.local_covs[i], state.Z, h.kernel)
        psi1, psi2 = ps.psi1, ps.psi2
        resid1 = (stats.y1[i] - h.mu * stats.n[i]) - stats.B1[i] @ (g.M.T @ (Kinv @ psi1))
        d_mu += resid1 / s2
        energy = t.r2 - 2.0 * psi1 @ t.a + np.sum(t.Q * psi2) + t.trG * alpha
        d_ls += -0.5 * t.n + 0.5 * energy / s2

        g1 = t.a / s2
        g2 = -0.5 * t.Q / s2
        psi_a += g1 @ psi1 + 2.0 * np.sum(g2 * psi2)
        psi_l += g1 @ dpsi1_l + np.sum(g2 * dpsi2_l)
        explicit_a += -0.5 * t.trG * alpha / s2

        Kp2K = Kinv @ psi2 @ Kinv
        W = g.M @ stats.G[i] @ g.M.T + np.einsum("kalb,kl->ab", g.S4, stats.G[i])
        GK += -np.outer(t.a, Kinv @ psi1) / s2
        GK += (Kp2K @ W @ Kinv) / s2 - 0.5 * t.trG * Kp2K / s2

    GK *= scale
    # minus KL(q(u) || p(u)) depends on K
    R = np.einsum("kakb->ab", g.S4) + g.M @ g.M.T
    GK_kl = 0.5 * Kinv @ R @ Kinv - 0.5 * state.d * Kinv

    dK_a = g.K
    dK_l = gram_dlog_ell(state.Z, h.kernel)
    pr = h.prior
    grads = {
        "d_mu": scale * d_mu,
        "d_log_sigma2": scale * d_ls - pr.rho_s * (np.log(s2) - pr.m_s),
        "d_log_alpha": scale * (psi_a + explicit_a) + np.sum((GK + GK_kl) * dK_a)
                        - pr.rho_a * (np.log(alpha) - pr.m_a),
        "d_log_ell": scale * psi_l + np.sum((GK + GK_kl) * dK_l)
                      - pr.rho_ell * (np.log(h.ell) - pr.m_ell),
    }
    return {k: float(v) for k, v in grads.items()}
