"""Clamped B-spline bases and per-subject design matrices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BasisConfig:
    """Clamped B-spline basis of dimension ``d`` on ``domain``.

    ``knots`` carries the boundary knots with multiplicity ``degree + 1``,
    so ``len(knots) == d + degree + 1``.
    """

    d: int
    degree: int
    knots: np.ndarray
    domain: tuple[float, float]

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "domain", (float(self.domain[0]), float(self.domain[1])))
        lo, hi = self.domain
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.d <= self.degree:
            raise ValueError(f"basis dimension d={self.d} must exceed degree={self.degree}")
        if knots.shape != (self.d + self.degree + 1,):
            raise ValueError("knot vector must have length d + degree + 1")
        if not hi > lo:
            raise ValueError("degenerate basis domain")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be sorted")
        k = self.degree + 1
        if not (np.all(knots[:k] == lo) and np.all(knots[-k:] == hi)):
            raise ValueError("boundary knots need multiplicity degree + 1")
        interior = knots[k:-k]
        if np.any(interior <= lo) or np.any(interior >= hi):
            raise ValueError("interior knots must lie strictly inside the domain")

    @property
    def interior_knots(self) -> np.ndarray:
        k = self.degree + 1
        return self.knots[k:-k]

    def to_dict(self) -> dict:
        return {"degree": self.degree, "knots": self.knots.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "BasisConfig":
        knots = np.asarray(obj["knots"], dtype=float)
        degree = int(obj["degree"])
        return cls(d=len(knots) - degree - 1, degree=degree, knots=knots,
                   domain=(knots[0], knots[-1]))


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    gram: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "gram", self.rows.T @ self.rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]


def clamped_basis(t_min: float, t_max: float, interior, degree: int) -> BasisConfig:
    interior = np.sort(np.asarray(interior, dtype=float))
    k = degree + 1
    knots = np.concatenate([np.full(k, t_min), interior, np.full(k, t_max)])
    return BasisConfig(d=len(interior) + k, degree=degree, knots=knots,
                       domain=(t_min, t_max))


def uniform_basis(t_min: float, t_max: float, d: int, degree: int) -> BasisConfig:
    """Clamped basis with equally spaced interior knots."""
    if d <= degree:
        raise ValueError(f"basis dimension d={d} must exceed degree={degree}")
    n_interior = d - degree - 1
    interior = np.linspace(t_min, t_max, n_interior + 2)[1:-1]
    return clamped_basis(t_min, t_max, interior, degree)


def build_basis(ds, d: int = 5, degree: int = 2) -> BasisConfig:
    """Place interior knots at equally spaced percentiles of the pooled times."""
    if d <= degree:
        raise ValueError(f"basis dimension d={d} must exceed degree={degree}")
    times = np.concatenate([tr.times for tr in ds.trajectories]) if len(ds.trajectories) else np.array([])
    if times.size == 0:
        raise ValueError("no observation times to place knots on")
    t_min, t_max = float(times.min()), float(times.max())
    if not t_max > t_min:
        raise ValueError("all observation times are identical; cannot build a basis")
    n_interior = d - degree - 1
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = np.quantile(times, probs, method="linear")
    return clamped_basis(t_min, t_max, interior, degree)


def _span_index(cfg: BasisConfig, t: np.ndarray) -> np.ndarray:
    # knots[s] <= t < knots[s + 1], with the right endpoint folded into the last span
    s = np.searchsorted(cfg.knots, t, side="right") - 1
    return np.clip(s, cfg.degree, cfg.d - 1)


def evaluate(cfg: BasisConfig, times) -> np.ndarray:
    """Evaluate all ``d`` basis functions at ``times`` (Cox-de Boor recursion).

    Times outside the domain are clamped to the nearest endpoint.
    """
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite observation time")
    lo, hi = cfg.domain
    t = np.clip(t, lo, hi)
    p, U = cfg.degree, cfg.knots
    span = _span_index(cfg, t)

    # N[:, j] holds the basis function with index span - p + j
    N = np.zeros((t.size, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((t.size, p + 1))
    right = np.zeros((t.size, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - U[span + 1 - j]
        right[:, j] = U[span + j] - t
        saved = np.zeros(t.size)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(N[:, r], denom, out=np.zeros(t.size), where=denom != 0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    out = np.zeros((t.size, cfg.d))
    rows = np.arange(t.size)
    for j in range(p + 1):
        out[rows, span - p + j] = N[:, j]
    return out


def design_matrix(cfg: BasisConfig, times) -> DesignMatrix:
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return DesignMatrix(np.zeros((0, cfg.d)))
    return DesignMatrix(evaluate(cfg, times))
