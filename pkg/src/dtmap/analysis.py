"""Cross-validated held-out likelihoods, clustering of embeddings and association tests."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import cdist

from .dtm import DtmConfig, fit_dtm, mc_heldout_ll
from .embeddings import EmbeddingSet
from .fpca import fit_fpca, fpca_heldout_ll
from .lmm import EMConfig, fit_lmm, lmm_heldout_ll
from .spline_basis import build_basis
from .trajdata import split_folds

MODEL_KINDS = ("lmm", "fpca", "dtm")


@dataclass
class ModelSpec:
    kind: str
    q: int = 2
    em: EMConfig = field(default_factory=EMConfig)
    dtm: DtmConfig = field(default_factory=DtmConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")


def as_spec(spec) -> ModelSpec:
    return spec if isinstance(spec, ModelSpec) else ModelSpec(str(spec))


@dataclass
class CvReport:
    """Per-fold mean held-out log-likelihoods for each model column."""

    models: list[str]
    subject_ll: dict[str, np.ndarray]
    obs_ll: dict[str, np.ndarray]

    @property
    def k(self) -> int:
        return len(next(iter(self.subject_ll.values())))

    def mean(self, model: str, kind: str = "subject_ll") -> float:
        return float(np.mean(getattr(self, kind)[model]))

    def sd(self, model: str, kind: str = "subject_ll") -> float:
        vals = getattr(self, kind)[model]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def summary(self) -> dict[str, dict[str, float]]:
        return {
            name: {
                "subject_ll_mean": self.mean(name), "subject_ll_sd": self.sd(name),
                "obs_ll_mean": self.mean(name, "obs_ll"), "obs_ll_sd": self.sd(name, "obs_ll"),
            }
            for name in self.models
        }

    def save(self, path) -> None:
        """Long CSV: ``model, fold, subject_ll, obs_ll`` with trailing ``mean`` and ``sd`` rows."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "fold", "subject_ll", "obs_ll"])
            for name in self.models:
                for f in range(self.k):
                    w.writerow([name, f, repr(float(self.subject_ll[name][f])), repr(float(self.obs_ll[name][f]))])
                w.writerow([name, "mean", repr(self.mean(name)), repr(self.mean(name, "obs_ll"))])
                w.writerow([name, "sd", repr(self.sd(name)), repr(self.sd(name, "obs_ll"))])

    @classmethod
    def load(cls, path) -> "CvReport":
        sub: dict[str, list[float]] = {}
        obs: dict[str, list[float]] = {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["fold"] in ("mean", "sd"):
                    continue
                sub.setdefault(row["model"], []).append(float(row["subject_ll"]))
                obs.setdefault(row["model"], []).append(float(row["obs_ll"]))
        return cls(list(sub), {k: np.array(v) for k, v in sub.items()}, {k: np.array(v) for k, v in obs.items()})


def fold_seed(seed: int, fold: int) -> int:
    """Seed of the stream used for ``fold``; independent of evaluation order."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _score_fold(spec: ModelSpec, train, test, basis, seed: int, mc_samples: int):
    lmm = fit_lmm(train, basis, spec.em)
    if spec.kind == "lmm":
        scores = [lmm_heldout_ll(lmm, tr) for tr in test]
    elif spec.kind == "fpca":
        model = fit_fpca(train, basis, spec.q, spec.em, warm=lmm)
        scores = [fpca_heldout_ll(model, tr) for tr in test]
    else:
        state = fit_dtm(train, replace(spec.dtm, q=spec.q, seed=seed), basis=basis, warm=lmm)
        rng = np.random.default_rng(seed)
        scores = [mc_heldout_ll(state, tr, mc_samples, rng) for tr in test]
    return (float(np.mean([s["subject_ll"] for s in scores])),
            float(np.mean([s["obs_ll"] for s in scores])))


def evaluate_cv(ds, model_specs, k: int = 10, seed: int = 0, mc_samples: int = 256,
                d: int = 5, degree: int = 2, folds=None) -> CvReport:
    """Subject-level k-fold cross-validation of held-out log-likelihoods.

    The basis is rebuilt from each fold's training times. LMM and FPCA are
    scored in closed form; the DTM by Monte Carlo over the latent prior.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    specs = [as_spec(s) for s in model_specs]
    names: list[str] = []
    for s in specs:
        name, j = s.kind, 2
        while name in names:
            name, j = f"{s.kind}#{j}", j + 1
        names.append(name)

    folds = folds or split_folds(ds, k, seed)
    sub = {n: np.zeros(k) for n in names}
    obs = {n: np.zeros(k) for n in names}
    for f in range(k):
        train, test = folds.train_test(ds, f)
        if train.m < d + 1:
            raise ValueError(f"fold {f}: {train.m} training subjects, need at least d + 1 = {d + 1}")
        basis = build_basis(train, d, degree)
        fs = fold_seed(seed, f)
        for name, spec in zip(names, specs):
            sub[name][f], obs[name][f] = _score_fold(spec, train, test, basis, fs, mc_samples)
    return CvReport(names, sub, obs)


# ---------------------------------------------------------------------------
# clustering


def cluster_embeddings(es: EmbeddingSet, n_clusters: int) -> np.ndarray:
    """Ward clustering of embedding means cut at exactly ``n_clusters`` groups.

    Subjects are processed in sorted-id order so the partition does not depend
    on input order; labels are numbered by first appearance in that order and
    returned aligned with ``es.subject_ids``.
    """
    m = len(es)
    if not 1 <= n_clusters <= m:
        raise ValueError(f"n_clusters must lie in [1, {m}]")
    order = np.argsort(np.asarray(es.subject_ids, dtype=object), kind="stable")
    X = es.means[order]
    if m == 1:
        raw = np.zeros(1, dtype=int)
    else:
        raw = cut_tree(linkage(X, method="ward", metric="euclidean"), n_clusters=n_clusters).ravel()
    relabel: dict[int, int] = {}
    sorted_labels = np.array([relabel.setdefault(int(c), len(relabel)) for c in raw])
    labels = np.empty(m, dtype=int)
    labels[order] = sorted_labels
    return labels


def save_clusters(subject_ids, labels, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "cluster"])
        for sid, c in zip(subject_ids, labels):
            w.writerow([sid, int(c)])


def load_clusters(path) -> dict[str, int]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return {r["subject_id"]: int(r["cluster"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# association


@dataclass
class AssociationResult:
    statistic: float
    p_value: float
    n_perm: int
    n_pos: int
    n_neg: int


def _energy_from_dist(D: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Energy distance for each boolean row of ``masks`` splitting ``D``'s points in two."""
    a = masks.astype(float)
    b = 1.0 - a
    na = a.sum(1)
    nb = b.sum(1)
    Da = a @ D
    s_aa = np.einsum("rn,rn->r", Da, a)
    s_ab = np.einsum("rn,rn->r", Da, b)
    s_bb = np.einsum("rn,rn->r", b @ D, b)
    return 2.0 * s_ab / (na * nb) - s_aa / na**2 - s_bb / nb**2


def energy_distance(X: np.ndarray, Y: np.ndarray) -> float:
    """V-statistic energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    return float(2 * cdist(X, Y).mean() - cdist(X, X).mean() - cdist(Y, Y).mean())


def association_test(es: EmbeddingSet, outcome, n_perm: int = 10000, seed: int = 0,
                     chunk: int = 512) -> AssociationResult:
    """Permutation two-sample test of equal embedding distributions with and without an outcome.

    ``outcome`` is either a boolean vector aligned with ``es.subject_ids`` or a
    mapping from subject id to boolean; subjects missing from the mapping are
    dropped.
    """
    if n_perm < 100:
        raise ValueError("n_perm must be at least 100")
    if isinstance(outcome, dict):
        keep = [i for i, sid in enumerate(es.subject_ids) if sid in outcome]
        X = es.means[keep]
        y = np.array([bool(outcome[es.subject_ids[i]]) for i in keep])
    else:
        X = es.means
        y = np.asarray(outcome, dtype=bool)
        if y.shape != (len(es),):
            raise ValueError("outcome vector must align with the embeddings")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("outcome has a single class; both groups must be nonempty")

    D = cdist(X, X)
    observed = float(_energy_from_dist(D, y[None, :])[0])
    rng = np.random.default_rng(seed)
    exceed = 0
    done = 0
    while done < n_perm:
        r = min(chunk, n_perm - done)
        perms = np.argsort(rng.random((r, y.size)), axis=1)
        stats = _energy_from_dist(D, y[perms])
        # tolerance guards against ties lost to rounding
        exceed += int(np.sum(stats >= observed - 1e-12 * max(abs(observed), 1.0)))
        done += r
    return AssociationResult(observed, (1.0 + exceed) / (1.0 + n_perm), n_perm, n_pos, n_neg)


def save_association(results: dict[str, AssociationResult], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["outcome", "statistic", "p_value", "n_perm", "n_pos", "n_neg"])
        for name, r in results.items():
            w.writerow([name, repr(r.statistic), repr(r.p_value), r.n_perm, r.n_pos, r.n_neg])


# ---------------------------------------------------------------------------
# cluster summaries


def cluster_mean_trajectories(ds, clusters: dict[str, int], grid: np.ndarray) -> dict[int, np.ndarray]:
    """Pointwise means of each cluster's observations binned to the nearest grid time."""
    grid = np.asarray(grid, dtype=float)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, np.ndarray] = {}
    for tr in ds:
        c = clusters.get(tr.subject_id)
        if c is None:
            continue
        idx = np.abs(tr.times[:, None] - grid[None, :]).argmin(1)
        s = sums.setdefault(c, np.zeros(grid.size))
        n = counts.setdefault(c, np.zeros(grid.size))
        np.add.at(s, idx, tr.values)
        np.add.at(n, idx, 1.0)
    with np.errstate(invalid="ignore"):
        return {c: np.where(counts[c] > 0, sums[c] / np.maximum(counts[c], 1), np.nan) for c in sorted(sums)}
