"""RBF kernel over latent points and its expectations under Gaussian inputs.

The kernel is ``k(x, x') = alpha * exp(-|x - x'|^2 / (2 ell^2))``; the scale
``alpha`` lives inside the kernel, so ``K_pp`` and ``k_i`` carry it.

For ``x ~ N(m, S)`` the psi-statistics are

    psi1_j  = E[k(x, z_j)]
            = alpha |I + S/ell^2|^(-1/2) exp(-1/2 (m - z_j)^T (S + ell^2 I)^(-1) (m - z_j))
    psi2_jk = E[k(x, z_j) k(x, z_k)]
            = alpha^2 |I + 2S/ell^2|^(-1/2) exp(-|z_j - z_k|^2 / (4 ell^2))
              * exp(-1/2 (m - zbar)^T (S + ell^2/2 I)^(-1) (m - zbar)),  zbar = (z_j + z_k)/2
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KernelHyper:
    alpha: float = 1.0
    ell: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "ell"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"kernel {name} must be positive and finite, got {v}")


@dataclass
class PsiStats:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


def sq_dists(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    Z = np.atleast_2d(Z)
    d2 = (X * X).sum(1)[:, None] + (Z * Z).sum(1)[None, :] - 2.0 * X @ Z.T
    return np.clip(d2, 0.0, None)


def kernel(x, x2, h: KernelHyper) -> float:
    diff = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    return float(h.alpha * np.exp(-0.5 * (diff @ diff) / h.ell**2))


def gram(X, Z, h: KernelHyper, jitter: float = 0.0) -> np.ndarray:
    """Pairwise kernel matrix; for ``X`` equal to ``Z`` adds ``jitter * alpha`` to the diagonal."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape[1] != Z.shape[1]:
        raise ValueError("latent dimensions differ")
    same = X is Z or (X.shape == Z.shape and np.array_equal(X, Z))
    if same:
        # exact pairwise distances keep the diagonal at alpha and the matrix symmetric
        diff = X[:, None, :] - X[None, :, :]
        d2 = (diff * diff).sum(-1)
    else:
        d2 = sq_dists(X, Z)
    K = h.alpha * np.exp(-0.5 * d2 / h.ell**2)
    if same and jitter:
        K = K + jitter * h.alpha * np.eye(K.shape[0])
    return K


def _check_cov(S: np.ndarray) -> None:
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("latent covariance must be symmetric")
    lam = np.linalg.eigvalsh(S)
    if lam[0] < -1e-10 * max(1.0, lam[-1]):
        raise ValueError("latent covariance must be positive semidefinite")


def psi_stats(mean, cov, Z, h: KernelHyper, check: bool = True) -> PsiStats:
    mean = np.asarray(mean, dtype=float)
    S = np.asarray(cov, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if check:
        _check_cov(S)
    return _psi(mean, S, Z, h)[0]


def _psi(m, S, Z, h: KernelHyper):
    """psi-statistics plus the intermediates their derivatives need."""
    q = m.size
    l2 = h.ell**2
    I = np.eye(q)
    A1 = np.linalg.inv(S + l2 * I)
    delta = m[None, :] - Z                                   # (p, q)
    A1d = delta @ A1
    _, ld1 = np.linalg.slogdet(I + S / l2)
    psi1 = h.alpha * np.exp(-0.5 * ld1 - 0.5 * (A1d * delta).sum(1))

    A2 = np.linalg.inv(S + 0.5 * l2 * I)
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])
    eps = m[None, None, :] - zbar                            # (p, p, q)
    A2e = eps @ A2
    dz = Z[:, None, :] - Z[None, :, :]
    dz2 = (dz * dz).sum(-1)
    _, ld2 = np.linalg.slogdet(I + 2.0 * S / l2)
    psi2 = h.alpha**2 * np.exp(-0.5 * ld2 - 0.25 * dz2 / l2 - 0.5 * (A2e * eps).sum(-1))
    psi2 = 0.5 * (psi2 + psi2.T)
    parts = dict(A1=A1, A1d=A1d, delta=delta, A2=A2, A2e=A2e, eps=eps, dz2=dz2)
    return PsiStats(h.alpha, psi1, psi2), parts


def psi_local_grads(m, S, Z, h: KernelHyper, g1: np.ndarray, g2: np.ndarray):
    """Value and gradients of ``g1 . psi1 + sum(g2 * psi2)`` with respect to ``(m, S)``.

    The ``S`` gradient is the symmetric matrix ``G`` with ``df = tr(G dS)``.
    """
    ps, pr = _psi(m, S, Z, h)
    w1 = g1 * ps.psi1
    w2 = g2 * ps.psi2
    val = w1.sum() + w2.sum()
    A1d, A2e = pr["A1d"], pr["A2e"]
    grad_m = -(w1 @ A1d) - np.einsum("jk,jka->a", w2, A2e)
    grad_S = 0.5 * (A1d.T @ (w1[:, None] * A1d) - w1.sum() * pr["A1"])
    grad_S += 0.5 * (np.einsum("jk,jka,jkb->ab", w2, A2e, A2e) - w2.sum() * pr["A2"])
    return val, grad_m, 0.5 * (grad_S + grad_S.T), ps


def psi_dlog_ell(m, S, Z, h: KernelHyper):
    """Derivatives of ``psi1`` and ``psi2`` with respect to ``log ell``."""
    ps, pr = _psi(m, S, Z, h)
    q = m.size
    l2 = h.ell**2
    A1, A1d = pr["A1"], pr["A1d"]
    dlog1 = l2 * ((A1d * A1d).sum(1) - np.trace(A1)) + q
    A2, A2e = pr["A2"], pr["A2e"]
    dlog2 = -0.5 * l2 * np.trace(A2) + q + 0.5 * pr["dz2"] / l2 + 0.5 * l2 * (A2e * A2e).sum(-1)
    return ps, ps.psi1 * dlog1, ps.psi2 * dlog2


def gram_dlog_ell(Z, h: KernelHyper) -> np.ndarray:
    """Derivative of the (jittered) inducing Gram matrix with respect to ``log ell``."""
    Z = np.atleast_2d(Z)
    diff = Z[:, None, :] - Z[None, :, :]
    d2 = (diff * diff).sum(-1)
    return h.alpha * np.exp(-0.5 * d2 / h.ell**2) * d2 / h.ell**2
