"""
Kernels for the multi-task bandit model.

Defines:
- context kernels k_X (and the embedding kernel k'_X) on R^d
- task kernels k_Z over arm descriptors, in the five similarity modes
- the product kernel k~((z, x), (z', x')) = k_Z(z, z') * k_X(x, x')
- task similarity estimated from data through empirical kernel mean embeddings

Arms are 1-based throughout (arm ids lie in [1..N]); matrices are indexed
with ``arm - 1``. Every object here is immutable after construction.
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Protocol, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from errors import ConfigurationError, DomainError
from models import KernelSpec, SimilarityMode

logger = logging.getLogger(__name__)

# Smallest admissible eigenvalue is -PSD_TOLERANCE * largest eigenvalue
PSD_TOLERANCE = 1e-8

DescriptorKind = Literal["arm", "singleton", "distribution"]


def as_context(values) -> np.ndarray:
    """Validate and freeze a context vector."""
    x = np.array(values, dtype=float)
    if x.ndim != 1:
        raise ConfigurationError(f"context must be a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("context has non-finite entries")
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class ArmDescriptor:
    """
    Arm descriptor z_a.

    ``kind`` selects how the task kernel reads it: ``arm`` is the arm id
    itself, ``singleton`` is the pooled space Z = {1}, ``distribution`` stands
    for the arm's context distribution P_a, whose similarities are held by an
    estimated TaskSimilarity. Every kind remembers the arm it came from.
    """

    arm: int
    kind: DescriptorKind = "arm"

    def __post_init__(self):
        if int(self.arm) != self.arm or self.arm < 1:
            raise IndexError(f"arm id must be an integer >= 1, got {self.arm}")

    @classmethod
    def arm_id(cls, arm: int) -> "ArmDescriptor":
        return cls(arm, "arm")

    @classmethod
    def singleton(cls, arm: int) -> "ArmDescriptor":
        return cls(arm, "singleton")

    @classmethod
    def distribution(cls, arm: int) -> "ArmDescriptor":
        return cls(arm, "distribution")


@dataclass(frozen=True, eq=False)
class AugmentedContext:
    """Augmented context x~ = (z_a, x_a)."""

    z: ArmDescriptor
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", as_context(self.x))

    @property
    def arm(self) -> int:
        return self.z.arm


def descriptor_kind(mode: SimilarityMode) -> DescriptorKind:
    """The descriptor kind a similarity mode attaches to contexts."""
    if mode == "pooled":
        return "singleton"
    if mode == "estimated":
        return "distribution"
    return "arm"


def augment(contexts: Sequence[np.ndarray], mode: SimilarityMode) -> List[AugmentedContext]:
    """Attach arm descriptors (arms 1..N in order) to per-arm contexts."""
    kind = descriptor_kind(mode)
    return [
        AugmentedContext(ArmDescriptor(arm, kind), x)
        for arm, x in enumerate(contexts, start=1)
    ]


def is_psd(matrix: np.ndarray, tolerance: float = PSD_TOLERANCE) -> bool:
    """Smallest eigenvalue >= -tolerance * largest (absolute) eigenvalue."""
    eigenvalues = np.linalg.eigvalsh(matrix)
    scale = max(float(np.max(np.abs(eigenvalues))), 0.0)
    return bool(eigenvalues[0] >= -tolerance * scale)


def project_psd(matrix: np.ndarray) -> np.ndarray:
    """
    Clip negative eigenvalues to zero, re-symmetrize and restore a unit
    diagonal. Rescaling by D^{-1/2} M D^{-1/2} keeps the result PSD.
    """
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    clipped = (eigenvectors * np.clip(eigenvalues, 0.0, None)) @ eigenvectors.T
    clipped = 0.5 * (clipped + clipped.T)
    diagonal = np.sqrt(np.clip(np.diag(clipped), 1e-300, None))
    projected = clipped / np.outer(diagonal, diagonal)
    np.fill_diagonal(projected, 1.0)
    return projected


@dataclass(frozen=True, eq=False)
class TaskSimilarity:
    """
    The N x N task similarity matrix K_Z together with its mode.

    Independent and Pooled carry the identity / all-ones matrix so that
    spectral diagnostics can treat every mode alike.
    """

    mode: SimilarityMode
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
            raise ConfigurationError(f"task similarity must be a non-empty square matrix, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ConfigurationError("task similarity has non-finite entries")
        if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12):
            raise ConfigurationError("task similarity must be symmetric")
        matrix = 0.5 * (matrix + matrix.T)
        if self.mode != "known" and not np.allclose(np.diag(matrix), 1.0, rtol=0.0, atol=1e-12):
            raise ConfigurationError(f"{self.mode} task similarity must have a unit diagonal")
        if not is_psd(matrix):
            raise ConfigurationError(f"{self.mode} task similarity is not positive semidefinite")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_arms(self) -> int:
        return self.matrix.shape[0]

    @property
    def max_diagonal(self) -> float:
        return float(np.max(np.diag(self.matrix)))

    @classmethod
    def independent(cls, n_arms: int) -> "TaskSimilarity":
        return cls("independent", np.eye(n_arms))

    @classmethod
    def pooled(cls, n_arms: int) -> "TaskSimilarity":
        return cls("pooled", np.ones((n_arms, n_arms)))

    @classmethod
    def known(cls, matrix: np.ndarray) -> "TaskSimilarity":
        return cls("known", matrix)

    def check_arms(self, arms: np.ndarray) -> None:
        if arms.size and (arms.min() < 1 or arms.max() > self.n_arms):
            raise IndexError(f"arm descriptor out of range [1..{self.n_arms}]")


class ArmContextLog(Protocol):
    """Anything that can hand out the contexts observed for each arm."""

    n_arms: int

    def contexts_by_arm(self) -> List[np.ndarray]:
        ...


# -------- Context kernels --------

def context_gram(spec: KernelSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Kernel block [k(x_i, y_j)] for row-stacked contexts."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ConfigurationError(f"context dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.family == "linear":
        return X @ Y.T
    return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * spec.bandwidth ** 2))


def eval_context_kernel(spec: KernelSpec, x: np.ndarray, x_prime: np.ndarray) -> float:
    """k_X(x, x'): Gaussian exp(-||x - x'||^2 / 2 sigma^2) or the dot product."""
    if spec.role not in ("context", "embedding"):
        raise ConfigurationError(f"kernel with role '{spec.role}' cannot evaluate contexts")
    x = as_context(x)
    x_prime = as_context(x_prime)
    if x.shape != x_prime.shape:
        raise ConfigurationError(f"context dimension mismatch: {x.shape[0]} vs {x_prime.shape[0]}")
    if spec.family == "linear":
        return float(np.dot(x, x_prime))
    diff = x - x_prime
    return float(np.exp(-np.dot(diff, diff) / (2.0 * spec.bandwidth ** 2)))


# -------- Task kernels --------

def eval_task_kernel(ts: TaskSimilarity, a: ArmDescriptor, a_prime: ArmDescriptor) -> float:
    """k_Z(z_a, z_a')."""
    ts.check_arms(np.array([a.arm, a_prime.arm]))
    if ts.mode == "independent":
        return 1.0 if a.arm == a_prime.arm else 0.0
    if ts.mode == "pooled":
        return 1.0
    return float(ts.matrix[a.arm - 1, a_prime.arm - 1])


def task_gram(ts: TaskSimilarity, arms_u: np.ndarray, arms_v: np.ndarray) -> np.ndarray:
    """Task kernel block [k_Z(u_i, v_j)] for 1-based arm id arrays."""
    arms_u = np.asarray(arms_u, dtype=int)
    arms_v = np.asarray(arms_v, dtype=int)
    ts.check_arms(arms_u)
    ts.check_arms(arms_v)
    if ts.mode == "independent":
        return (arms_u[:, None] == arms_v[None, :]).astype(float)
    if ts.mode == "pooled":
        return np.ones((arms_u.size, arms_v.size))
    return ts.matrix[np.ix_(arms_u - 1, arms_v - 1)]


# -------- Product kernel --------

def eval_product_kernel(ts: TaskSimilarity, kx: KernelSpec, u: AugmentedContext, v: AugmentedContext) -> float:
    """k~(u, v) = k_Z(z_u, z_v) * k_X(x_u, x_v)."""
    return eval_task_kernel(ts, u.z, v.z) * eval_context_kernel(kx, u.x, v.x)


def stack_points(points: Sequence[AugmentedContext]) -> Tuple[np.ndarray, np.ndarray]:
    """Split augmented contexts into (arm ids, row-stacked contexts)."""
    if not points:
        return np.zeros(0, dtype=int), np.zeros((0, 0))
    arms = np.fromiter((p.arm for p in points), dtype=int, count=len(points))
    return arms, np.vstack([p.x for p in points])


def product_block(
    ts: TaskSimilarity,
    kx: KernelSpec,
    arms_u: np.ndarray,
    X_u: np.ndarray,
    arms_v: np.ndarray,
    X_v: np.ndarray,
) -> np.ndarray:
    """Product kernel block from already-stacked arrays."""
    return task_gram(ts, arms_u, arms_v) * context_gram(kx, X_u, X_v)


def gram_matrix(ts: TaskSimilarity, kx: KernelSpec, points: Sequence[AugmentedContext]) -> np.ndarray:
    """K~ with entries k~(points[i], points[j]); exactly symmetric."""
    if not points:
        raise ConfigurationError("gram_matrix needs at least one point")
    arms, X = stack_points(points)
    gram = product_block(ts, kx, arms, X, arms, X)
    return 0.5 * (gram + gram.T)


def cross_gram(
    ts: TaskSimilarity,
    kx: KernelSpec,
    queries: Sequence[AugmentedContext],
    points: Sequence[AugmentedContext],
) -> np.ndarray:
    """Block [k~(queries[i], points[j])]."""
    arms_q, X_q = stack_points(queries)
    if not points:
        return np.zeros((len(queries), 0))
    arms_p, X_p = stack_points(points)
    return product_block(ts, kx, arms_q, X_q, arms_p, X_p)


def kernel_bound(ts: TaskSimilarity, kx: KernelSpec, contexts: np.ndarray = None) -> float:
    """c_k~ = max diag(K_Z) * sup k_X(x, x)."""
    if kx.family == "gaussian":
        sup_kx = 1.0
    else:
        if contexts is None or len(contexts) == 0:
            raise ConfigurationError("linear kernel bound needs the contexts it ranges over")
        sup_kx = float(np.max(np.sum(np.atleast_2d(contexts) ** 2, axis=1)))
    return ts.max_diagonal * sup_kx


# -------- Task similarity matrices --------

def parametric_task_matrix(mu: float, n_arms: int) -> TaskSimilarity:
    """K_Z(mu) = (1 - mu) I_N + mu 1 1^T."""
    if not 0.0 <= mu <= 1.0:
        raise DomainError(f"mu must lie in [0, 1], got {mu}")
    if n_arms < 1:
        raise DomainError(f"need at least one arm, got {n_arms}")
    matrix = (1.0 - mu) * np.eye(n_arms) + mu * np.ones((n_arms, n_arms))
    return TaskSimilarity("parametric", matrix)


def gaussian_task_matrix(arm_features: np.ndarray, bandwidth: float) -> TaskSimilarity:
    """Known similarity from a Gaussian kernel over per-arm feature rows."""
    features = np.asarray(arm_features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    spec = KernelSpec.gaussian(bandwidth, role="task")
    return TaskSimilarity.known(context_gram(spec, features, features))


def embedding_distances(groups: Sequence[np.ndarray], spec: KernelSpec) -> np.ndarray:
    """
    Squared distances ||Psi(P_a) - Psi(P_b)||^2 between empirical mean
    embeddings (V-statistic, i = j terms included). Only the upper triangle
    is computed so the result is exactly symmetric.
    """
    n = len(groups)
    means = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            means[i, j] = float(np.mean(context_gram(spec, groups[i], groups[j])))
            means[j, i] = means[i, j]
    self_terms = np.diag(means)
    dist_sq = self_terms[:, None] + self_terms[None, :] - 2.0 * means
    np.fill_diagonal(dist_sq, 0.0)
    return np.clip(dist_sq, 0.0, None)


def estimate_task_similarity(history: ArmContextLog, embedding_kernel: KernelSpec, sigma_z: float) -> TaskSimilarity:
    """
    Estimated K_Z with entries exp(-||Psi(P^_a) - Psi(P^_a')||^2 / 2 sigma_Z^2).

    Arms without pulls are similar only to themselves until they are pulled.
    """
    if not sigma_z > 0:
        raise DomainError(f"sigma_Z must be > 0, got {sigma_z}")

    groups = history.contexts_by_arm()
    matrix = np.eye(history.n_arms)
    pulled = [a for a, contexts in enumerate(groups) if len(contexts) > 0]

    if len(pulled) >= 2:
        dist_sq = embedding_distances([groups[a] for a in pulled], embedding_kernel)
        matrix[np.ix_(pulled, pulled)] = np.exp(-dist_sq / (2.0 * sigma_z ** 2))
        np.fill_diagonal(matrix, 1.0)

    if not is_psd(matrix):
        logger.warning(
            "Estimated task similarity failed the PSD check; projecting",
            extra={"min_eigenvalue": float(np.linalg.eigvalsh(matrix)[0])}
        )
        matrix = project_psd(matrix)

    return TaskSimilarity("estimated", matrix)
