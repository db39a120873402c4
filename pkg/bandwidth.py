"""
Kernel bandwidth selection on validation data.

Two strategies:
- median: median pairwise distance / sqrt(2), so exp(-d^2 / 2 sigma^2) is
  exp(-1) at the median distance
- grid-cv: 5-fold cross-validated kernel ridge over seven bandwidths spaced
  by factors of two around the median
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.kernel_ridge import KernelRidge
from sklearn.model_selection import KFold, cross_val_score

from errors import ConfigurationError
from kernel_core import embedding_distances
from models import BandwidthStrategy, KernelRole, KernelSpec

logger = logging.getLogger(__name__)

FALLBACK_BANDWIDTH = 1.0
GRID_FACTORS = (1 / 8, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 8.0)
CV_FOLDS = 5


def _median_from_distances(distances: np.ndarray, role: str) -> float:
    if distances.size == 0:
        logger.warning("Bandwidth needs at least two points; using fallback", extra={"role": role, "bandwidth": FALLBACK_BANDWIDTH})
        return FALLBACK_BANDWIDTH
    median = float(np.median(distances))
    if not median > 0 or not math.isfinite(median):
        logger.warning("Median distance is zero; using fallback", extra={"role": role, "bandwidth": FALLBACK_BANDWIDTH})
        return FALLBACK_BANDWIDTH
    return median / math.sqrt(2.0)


def median_bandwidth(data: np.ndarray, role: KernelRole = "context") -> float:
    """Median heuristic over all pairwise Euclidean distances."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] < 2:
        return _median_from_distances(np.zeros(0), role)
    return _median_from_distances(pdist(data), role)


def grid_cv_bandwidth(
    data: np.ndarray,
    targets: np.ndarray,
    lam: float = 1.0,
    seed: int = 0,
    role: KernelRole = "context",
) -> float:
    """
    Bandwidth from GRID_FACTORS x median minimising 5-fold squared error of
    Gaussian kernel ridge. Ties keep the earlier (smaller) grid value.
    """
    data = np.asarray(data, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if targets.shape[0] != data.shape[0]:
        raise ConfigurationError(f"{targets.shape[0]} targets for {data.shape[0]} points")

    center = median_bandwidth(data, role)
    if data.shape[0] < CV_FOLDS:
        logger.warning("Too few points for cross-validation; using the median", extra={"role": role, "points": data.shape[0]})
        return center

    folds = KFold(n_splits=CV_FOLDS, shuffle=True, random_state=seed)
    errors = []
    for factor in GRID_FACTORS:
        sigma = center * factor
        model = KernelRidge(alpha=lam, kernel="rbf", gamma=1.0 / (2.0 * sigma ** 2))
        scores = cross_val_score(model, data, targets, cv=folds, scoring="neg_mean_squared_error")
        errors.append(-float(np.mean(scores)))

    best = int(np.argmin(errors))
    logger.debug("Grid search bandwidth", extra={"role": role, "errors": [round(e, 6) for e in errors]})
    return center * GRID_FACTORS[best]


def select_bandwidth(
    data: np.ndarray,
    role: KernelRole = "context",
    strategy: BandwidthStrategy = "median",
    targets: Optional[np.ndarray] = None,
    lam: float = 1.0,
    seed: int = 0,
) -> float:
    """Pick a Gaussian bandwidth for ``role`` from validation ``data``."""
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise ConfigurationError("bandwidth selection needs validation data")
    if strategy == "median":
        return median_bandwidth(data, role)
    if strategy == "grid-cv":
        if targets is None:
            raise ConfigurationError("grid-cv bandwidth selection needs regression targets")
        return grid_cv_bandwidth(data, targets, lam=lam, seed=seed, role=role)
    raise ConfigurationError(f"unknown bandwidth strategy '{strategy}'")


def select_sigma_z(groups: Sequence[np.ndarray], embedding_kernel: KernelSpec) -> float:
    """Median heuristic over distances between per-group mean embeddings."""
    groups = [np.atleast_2d(g) for g in groups if len(g) > 0]
    if len(groups) < 2:
        return _median_from_distances(np.zeros(0), "task")
    dist_sq = embedding_distances(groups, embedding_kernel)
    upper = dist_sq[np.triu_indices(len(groups), k=1)]
    return _median_from_distances(np.sqrt(upper), "task")
