"""Latent embeddings of sparse, irregularly sampled trajectories.

Baselines (fixed-basis mixed model, reduced-rank FPCA) and the kernelized
reduced-rank model fitted by stochastic variational inference, together with
evaluation and clustering tools.
"""
__version__ = "0.1.0"

from .embeddings import EmbeddingSet
from .spline_basis import BasisConfig, build_basis, design_matrix
from .trajdata import Dataset, Trajectory, load_dataset, save_dataset, simulate

__all__ = [
    "BasisConfig", "Dataset", "EmbeddingSet", "Trajectory", "build_basis", "design_matrix",
    "load_dataset", "save_dataset", "simulate",
]
