"""Datasets of sparse, irregularly sampled scalar trajectories.

The canonical on-disk form is a long-format CSV with one row per
observation: ``subject_id,time,value[,outcome...]``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .spline_basis import BasisConfig, design_matrix, uniform_basis


class DataError(ValueError):
    """Base class for dataset problems."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


_TRUE = {"1", "true"}
_FALSE = {"0", "false"}


@dataclass
class Trajectory:
    subject_id: str
    times: np.ndarray
    values: np.ndarray
    outcomes: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.subject_id = str(self.subject_id)
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.times.shape != self.values.shape:
            raise DataError(f"subject {self.subject_id}: times and values differ in length")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise DataError(f"subject {self.subject_id}: non-finite time or value")
        if np.any(np.diff(self.times) < 0):
            order = np.argsort(self.times, kind="stable")
            self.times = self.times[order]
            self.values = self.values[order]

    @property
    def n(self) -> int:
        return self.times.size


@dataclass
class Dataset:
    trajectories: list[Trajectory]

    def __post_init__(self):
        ids = [tr.subject_id for tr in self.trajectories]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids")
        self._index = {sid: i for i, sid in enumerate(ids)}

    @property
    def m(self) -> int:
        return len(self.trajectories)

    @property
    def n(self) -> int:
        return int(sum(tr.n for tr in self.trajectories))

    @property
    def subject_ids(self) -> list[str]:
        return [tr.subject_id for tr in self.trajectories]

    def __len__(self):
        return self.m

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, subject_id: str) -> Trajectory:
        return self.trajectories[self._index[subject_id]]

    def subset(self, subject_ids) -> "Dataset":
        return Dataset([self[sid] for sid in subject_ids])

    def pooled_values(self) -> np.ndarray:
        return np.concatenate([tr.values for tr in self.trajectories])

    def outcome_names(self) -> list[str]:
        names: list[str] = []
        for tr in self.trajectories:
            for k in tr.outcomes:
                if k not in names:
                    names.append(k)
        return names


DEFAULT_SCHEMA = {"subject": "subject_id", "time": "time", "value": "value"}


def _parse_bool(text: str, row: int, col: str) -> bool:
    key = text.strip().lower()
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    raise ParseError(f"row {row}: outcome column {col!r} has non-binary value {text!r}")


def load_dataset(path, schema: dict | None = None) -> Dataset:
    """Read a long-format CSV into a :class:`Dataset`.

    Columns other than the subject/time/value columns are treated as binary
    outcome columns.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise EmptyDatasetError(f"{path}: empty file")
        for role in ("subject", "time", "value"):
            if schema[role] not in header:
                raise SchemaError(f"{path}: missing column {schema[role]!r}")
        core = {schema["subject"], schema["time"], schema["value"]}
        outcome_cols = [c for c in header if c not in core]

        rows: dict[str, list[tuple[float, float]]] = {}
        outcomes: dict[str, dict[str, bool]] = {}
        # header is row 1
        for rowno, rec in enumerate(reader, start=2):
            sid = (rec[schema["subject"]] or "").strip()
            if not sid:
                raise ParseError(f"row {rowno}: empty subject id")
            try:
                t = float(rec[schema["time"]])
                v = float(rec[schema["value"]])
            except (TypeError, ValueError):
                raise ParseError(f"row {rowno}: non-numeric time or value") from None
            if not (np.isfinite(t) and np.isfinite(v)):
                raise ParseError(f"row {rowno}: non-finite time or value")
            rows.setdefault(sid, []).append((t, v))
            subj_out = outcomes.setdefault(sid, {})
            for col in outcome_cols:
                flag = _parse_bool(rec[col] or "", rowno, col)
                if subj_out.setdefault(col, flag) != flag:
                    raise ParseError(f"row {rowno}: outcome {col!r} inconsistent within subject {sid}")

    if not rows:
        raise EmptyDatasetError(f"{path}: no observations")
    trajs = []
    for sid, obs in rows.items():
        arr = np.array(obs)
        order = np.argsort(arr[:, 0], kind="stable")
        trajs.append(Trajectory(sid, arr[order, 0], arr[order, 1], outcomes[sid]))
    return Dataset(trajs)


def save_dataset(ds: Dataset, path) -> None:
    outcome_cols = ds.outcome_names()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time", "value", *outcome_cols])
        for tr in ds:
            flags = [int(tr.outcomes[c]) if c in tr.outcomes else "" for c in outcome_cols]
            for t, v in zip(tr.times, tr.values):
                w.writerow([tr.subject_id, repr(float(t)), repr(float(v)), *flags])


@dataclass
class FoldAssignment:
    fold_of_subject: dict[str, int]
    k: int

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for sid, f in self.fold_of_subject.items():
            out[f].append(sid)
        return out

    def train_test(self, ds: Dataset, fold: int) -> tuple[Dataset, Dataset]:
        train = [sid for sid in ds.subject_ids if self.fold_of_subject[sid] != fold]
        test = [sid for sid in ds.subject_ids if self.fold_of_subject[sid] == fold]
        return ds.subset(train), ds.subset(test)

    def save(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "fold"])
            for sid, f in self.fold_of_subject.items():
                w.writerow([sid, f])

    @classmethod
    def load(cls, path) -> "FoldAssignment":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            mapping = {r["subject_id"]: int(r["fold"]) for r in csv.DictReader(fh)}
        return cls(mapping, k=max(mapping.values()) + 1)


def split_folds(ds: Dataset, k: int, seed: int) -> FoldAssignment:
    """Subject-level k-fold split with fold sizes differing by at most one."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > ds.m:
        raise ValueError(f"cannot split {ds.m} subjects into {k} folds")
    ids = sorted(ds.subject_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    mapping = {ids[j]: int(pos % k) for pos, j in enumerate(perm)}
    return FoldAssignment({sid: mapping[sid] for sid in ds.subject_ids}, k)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimConfig:
    m: int = 300
    latent_dim: int = 2
    obs_count_law: tuple[int, int, int] = (1, 3, 30)
    time_horizon: float = 10.0
    noise_sd: float = 0.5
    map_kind: str = "linear"
    cluster_centers: list = field(default_factory=lambda: [[-1.5, 0.0], [1.5, 0.0]])
    cluster_sd: float = 0.35
    mu: float = 0.0
    coef_scale: float = 3.0
    level_weight: float = 1.0
    d: int = 5
    degree: int = 2

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be positive")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be nonnegative")
        if not self.time_horizon > 0:
            raise ValueError("time_horizon must be positive")
        if self.map_kind not in ("linear", "nonlinear-warp"):
            raise ValueError(f"unknown map_kind {self.map_kind!r}")
        lo, med, hi = self.obs_count_law
        if not 1 <= lo <= med <= hi:
            raise ValueError("obs_count_law must satisfy 1 <= min <= median <= max")
        centers = np.asarray(self.cluster_centers, dtype=float)
        if centers.ndim != 2 or centers.shape[1] != self.latent_dim:
            raise ValueError("cluster_centers must be a list of latent_dim-vectors")


@dataclass
class GroundTruth:
    subject_ids: list[str]
    latents: np.ndarray
    coefficients: np.ndarray
    labels: np.ndarray
    basis: BasisConfig
    mu: float
    loadings: np.ndarray


def _geometric_p_for_median(lo: int, med: int, hi: int) -> float:
    """Success probability of a geometric law on [lo, hi] whose median is ``med``."""
    if lo == hi:
        return 1.0

    def cdf(k, p):
        q = 1.0 - p
        return (1.0 - q ** (k - lo + 1)) / (1.0 - q ** (hi - lo + 1))

    # centre the 0.5 crossing between med - 1 and med
    def gap(p):
        return 0.5 * (cdf(med, p) + cdf(med - 1, p)) - 0.5 if med > lo else cdf(med, p) - 0.75

    lo_p, hi_p = 1e-6, 1 - 1e-9
    g_lo, g_hi = gap(lo_p), gap(hi_p)
    if g_lo * g_hi > 0:
        # target outside what a decreasing law on [lo, hi] can reach
        return lo_p if abs(g_lo) < abs(g_hi) else hi_p
    return brentq(gap, lo_p, hi_p)


def sample_obs_counts(law, size: int, rng: np.random.Generator) -> np.ndarray:
    lo, med, hi = law
    p = _geometric_p_for_median(lo, med, hi)
    ks = np.arange(lo, hi + 1)
    pmf = p * (1 - p) ** (ks - lo)
    pmf /= pmf.sum()
    return rng.choice(ks, size=size, p=pmf)


def warp_features(x: np.ndarray) -> np.ndarray:
    """Linear, sinusoidal and centred quadratic features of latent points, shape (m, 2q + q(q+1)/2)."""
    x = np.atleast_2d(x)
    q = x.shape[1]
    quad = [x[:, a] * x[:, b] - (1.0 if a == b else 0.0) for a in range(q) for b in range(a, q)]
    return np.column_stack([x, np.sin(np.pi * x), *quad]) if q else x


def simulate(cfg: SimConfig, seed: int) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(seed)
    basis = uniform_basis(0.0, cfg.time_horizon, cfg.d, cfg.degree)
    q = cfg.latent_dim
    centers = np.asarray(cfg.cluster_centers, dtype=float)
    labels = rng.integers(len(centers), size=cfg.m)
    latents = centers[labels] + cfg.cluster_sd * rng.standard_normal((cfg.m, q))

    if cfg.map_kind == "linear":
        feats = latents
    else:
        feats = warp_features(latents)
    loadings = cfg.coef_scale * rng.standard_normal((cfg.d, feats.shape[1])) / np.sqrt(feats.shape[1])
    # first latent axis also shifts the whole trajectory (B-splines sum to one)
    loadings[:, 0] += cfg.level_weight * cfg.coef_scale
    coefs = feats @ loadings.T

    counts = sample_obs_counts(cfg.obs_count_law, cfg.m, rng)
    width = len(str(cfg.m - 1))
    trajs, ids = [], []
    for i in range(cfg.m):
        t = np.sort(rng.uniform(0.0, cfg.time_horizon, size=counts[i]))
        B = design_matrix(basis, t).rows
        y = cfg.mu + B @ coefs[i] + cfg.noise_sd * rng.standard_normal(counts[i])
        sid = f"s{i:0{width}d}"
        ids.append(sid)
        trajs.append(Trajectory(sid, t, y, {"cluster1": bool(labels[i] == 1)} if len(centers) == 2 else {}))
    truth = GroundTruth(ids, latents, coefs, labels, basis, cfg.mu, loadings)
    return Dataset(trajs), truth


def save_truth(truth: GroundTruth, path) -> None:
    q = truth.latents.shape[1]
    d = truth.coefficients.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "cluster", *[f"x{j + 1}" for j in range(q)], *[f"w{k + 1}" for k in range(d)]])
        for i, sid in enumerate(truth.subject_ids):
            w.writerow([sid, int(truth.labels[i]), *map(repr, truth.latents[i].tolist()),
                        *map(repr, truth.coefficients[i].tolist())])
