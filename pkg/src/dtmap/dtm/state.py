"""Hyperparameters, variational state, training config and initialization."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from ..kernels import KernelHyper, gram
from ..lmm import LmmModel, posterior_means
from ..mixed import subject_stats
from ..spline_basis import BasisConfig


@dataclass
class HyperPrior:
    """Log-normal priors on sigma2, alpha and ell: means ``m_*`` and precisions ``rho_*``."""

    m_s: float = 0.0
    rho_s: float = 1.0
    m_a: float = 0.0
    rho_a: float = 1.0
    m_ell: float = 0.0
    rho_ell: float = 1.0

    def __post_init__(self):
        if min(self.rho_s, self.rho_a, self.rho_ell) < 0:
            raise ValueError("prior precisions must be nonnegative")


@dataclass
class DtmHyper:
    mu: float
    sigma2: float
    alpha: float
    ell: float
    prior: HyperPrior = field(default_factory=HyperPrior)
    learn_hypers: bool = False
    jitter: float = 1e-6

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def kernel(self) -> KernelHyper:
        return KernelHyper(self.alpha, self.ell)

    def log_prior(self) -> float:
        pr = self.prior
        return float(-0.5 * pr.rho_s * (np.log(self.sigma2) - pr.m_s) ** 2
                     - 0.5 * pr.rho_a * (np.log(self.alpha) - pr.m_a) ** 2
                     - 0.5 * pr.rho_ell * (np.log(self.ell) - pr.m_ell) ** 2)


@dataclass
class DtmConfig:
    q: int = 2
    p: int = 20
    batch_size: int = 25
    epochs: int = 5
    lr0: float = 0.1
    decay: str = "epoch"
    seed: int = 0
    learn_hypers: bool = False
    local_max_iters: int = 20
    local_grad_tol: float = 1e-6
    init_local_sd: float = 0.1
    ell0: float = 1.0
    jitter: float = 1e-6
    prior_precision: float = 1.0

    def __post_init__(self):
        if self.decay not in ("epoch", "iteration"):
            raise ValueError("decay must be 'epoch' or 'iteration'")
        if self.q < 1 or self.p < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("q, p and batch_size must be positive")
        if not 0 < self.lr0 <= 1:
            raise ValueError("lr0 must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DtmState:
    hyper: DtmHyper
    Z: np.ndarray
    m: np.ndarray
    S_chol: np.ndarray
    local_means: np.ndarray
    local_covs: np.ndarray
    basis: BasisConfig
    subject_ids: list = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        pd_ = self.p * self.d
        if self.m.shape != (pd_,) or self.S_chol.shape != (pd_, pd_):
            raise ValueError("global variational parameters must have size p*d")
        if self.local_means.shape[0] != self.local_covs.shape[0]:
            raise ValueError("local means and covariances disagree in count")

    @property
    def d(self) -> int:
        return self.basis.d

    @property
    def p(self) -> int:
        return self.Z.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.local_means.shape[0]

    @property
    def S(self) -> np.ndarray:
        return self.S_chol @ self.S_chol.T

    @property
    def M(self) -> np.ndarray:
        """Inducing means as a ``p x d`` matrix (column ``k`` is ``m_k``)."""
        return self.m.reshape(self.d, self.p).T

    def set_S(self, S: np.ndarray) -> None:
        self.S_chol = np.linalg.cholesky(0.5 * (S + S.T))

    def copy(self) -> "DtmState":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        h = self.hyper
        return {
            "hyper": {"mu": h.mu, "sigma2": h.sigma2, "alpha": h.alpha, "ell": h.ell,
                      "prior": asdict(h.prior), "learn_hypers": h.learn_hypers, "jitter": h.jitter},
            "dims": {"d": self.d, "q": self.q, "p": self.p},
            "basis": self.basis.to_dict(),
            "Z": self.Z.reshape(-1).tolist(),
            "m": self.m.tolist(),
            "S_chol": self.S_chol.reshape(-1).tolist(),
            "locals": [
                {"subject_id": sid, "m_i": self.local_means[i].tolist(),
                 "S_i": self.local_covs[i].reshape(-1).tolist()}
                for i, sid in enumerate(self.subject_ids)
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DtmState":
        hd = dict(obj["hyper"])
        prior = HyperPrior(**hd.pop("prior"))
        hyper = DtmHyper(prior=prior, **hd)
        d, q, p = obj["dims"]["d"], obj["dims"]["q"], obj["dims"]["p"]
        basis = BasisConfig.from_dict(obj["basis"])
        locs = obj["locals"]
        return cls(
            hyper=hyper,
            Z=np.asarray(obj["Z"], dtype=float).reshape(p, q),
            m=np.asarray(obj["m"], dtype=float),
            S_chol=np.asarray(obj["S_chol"], dtype=float).reshape(p * d, p * d),
            local_means=np.asarray([r["m_i"] for r in locs], dtype=float).reshape(len(locs), q),
            local_covs=np.asarray([r["S_i"] for r in locs], dtype=float).reshape(len(locs), q, q),
            basis=basis,
            subject_ids=[r["subject_id"] for r in locs],
        )


def unit_scaled_scores(points: np.ndarray, q: int) -> np.ndarray:
    """Top-``q`` principal component scores, each rescaled to unit variance."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:q]
    vecs = vecs[:, order]
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(q)])
    scores = centered @ vecs
    sd = scores.std(axis=0)
    return scores / np.where(sd > 0, sd, 1.0)


def init_dtm(ds, basis: BasisConfig, cfg: DtmConfig, warm: LmmModel) -> DtmState:
    """Initialize from a fitted LMM on the same basis."""
    if cfg.p > ds.m:
        raise ValueError(f"p={cfg.p} inducing points exceeds the {ds.m} subjects")
    if cfg.q > basis.d:
        raise ValueError("latent dimension q cannot exceed basis dimension d")
    if warm.basis.d != basis.d or not np.allclose(warm.basis.knots, basis.knots):
        raise ValueError("warm-start LMM was fitted on a different basis")
    alpha = float(np.mean(np.diag(warm.Sigma)))
    prior = HyperPrior(m_s=float(np.log(warm.sigma2)), rho_s=cfg.prior_precision,
                       m_a=float(np.log(alpha)), rho_a=cfg.prior_precision,
                       m_ell=float(np.log(cfg.ell0)), rho_ell=cfg.prior_precision)
    hyper = DtmHyper(mu=warm.mu, sigma2=warm.sigma2, alpha=alpha, ell=cfg.ell0, prior=prior,
                     learn_hypers=cfg.learn_hypers, jitter=cfg.jitter)

    wmean, _ = posterior_means(warm, subject_stats(ds.trajectories, basis))
    local_means = unit_scaled_scores(wmean, cfg.q)
    local_covs = np.tile(cfg.init_local_sd**2 * np.eye(cfg.q), (ds.m, 1, 1))

    km = KMeans(n_clusters=cfg.p, n_init=10, random_state=cfg.seed).fit(local_means)
    Z = km.cluster_centers_
    Kpp = gram(Z, Z, hyper.kernel, hyper.jitter)
    S = np.kron(np.eye(basis.d), Kpp)
    return DtmState(hyper=hyper, Z=Z, m=np.zeros(cfg.p * basis.d), S_chol=np.linalg.cholesky(S),
                    local_means=local_means, local_covs=local_covs, basis=basis,
                    subject_ids=list(ds.subject_ids))
