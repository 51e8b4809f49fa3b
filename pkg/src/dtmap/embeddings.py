"""Per-subject latent embeddings and their CSV form.

CSV columns: ``subject_id, x1..xq, s11, s12, ..., sqq`` (covariance row-major;
covariance columns may be absent).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class EmbeddingSet:
    subject_ids: list[str]
    means: np.ndarray
    covs: np.ndarray | None = None
    model_tag: str = "dtm"

    def __post_init__(self):
        self.subject_ids = [str(s) for s in self.subject_ids]
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise ValueError("embedding subject ids must be unique")
        if self.means.shape[0] != len(self.subject_ids):
            raise ValueError("one embedding row per subject required")
        if self.covs is not None:
            self.covs = np.asarray(self.covs, dtype=float)
            q = self.q
            if self.covs.shape != (len(self.subject_ids), q, q):
                raise ValueError("embedding covariances must be (m, q, q)")

    @property
    def q(self) -> int:
        return self.means.shape[1]

    def __len__(self):
        return len(self.subject_ids)

    def save(self, path) -> None:
        q = self.q
        header = ["subject_id", *[f"x{j + 1}" for j in range(q)]]
        if self.covs is not None:
            header += [f"s{a + 1}{b + 1}" for a in range(q) for b in range(q)]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, sid in enumerate(self.subject_ids):
                row = [sid, *map(repr, self.means[i].tolist())]
                if self.covs is not None:
                    row += list(map(repr, self.covs[i].reshape(-1).tolist()))
                w.writerow(row)

    @classmethod
    def load(cls, path, model_tag: str = "dtm") -> "EmbeddingSet":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        if not header or header[0] != "subject_id":
            raise ValueError(f"{path}: first column must be subject_id")
        xcols = [j for j, h in enumerate(header) if h.startswith("x")]
        scols = [j for j, h in enumerate(header) if h.startswith("s") and h != "subject_id"]
        q = len(xcols)
        ids = [r[0] for r in rows]
        means = np.array([[float(r[j]) for j in xcols] for r in rows]).reshape(len(rows), q)
        covs = None
        if scols:
            if len(scols) != q * q:
                raise ValueError(f"{path}: expected {q * q} covariance columns")
            covs = np.array([[float(r[j]) for j in scols] for r in rows]).reshape(len(rows), q, q)
        return cls(ids, means, covs, model_tag)
