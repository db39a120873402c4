"""
Regret aggregation and theory diagnostics.

Spectral quantities are computed in the log domain from symmetric
eigendecompositions. ``log`` means the natural logarithm everywhere.
Every bound check returns DiagnosticRecord objects (name, lhs, rhs, passed)
so callers can decide whether a failure is fatal.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import AggregationError, DomainError, NumericalError
from kernel_core import (
    TaskSimilarity,
    context_gram,
    gram_matrix,
    kernel_bound,
    parametric_task_matrix,
)
from models import DiagnosticRecord, KernelSpec

logger = logging.getLogger(__name__)

# Eigenvalues down to -EIGEN_TOLERANCE * lambda_max are treated as zero
EIGEN_TOLERANCE = 1e-8
RANK_TOLERANCE = 1e-8
CHECK_SLACK = 1e-9


@dataclass(eq=False)
class RegretTrace:
    """
    Cumulative regret R(1..T) of one run of one policy, with the arm pulled
    in each round when the episode loop recorded it.

    The optional fields carry what the bound checks need: the pulled
    augmented contexts (``history``), the similarity and kernel they were
    fitted with, and the largest squared width the policy computed.
    """

    policy: str
    run: int
    cumulative: np.ndarray
    actions: Optional[np.ndarray] = None
    fingerprint: str = ""
    max_width_sq: Optional[float] = None
    history: Optional[object] = None
    similarity: Optional[TaskSimilarity] = None
    kernel: Optional[KernelSpec] = None
    lam: Optional[float] = None

    def __post_init__(self):
        self.cumulative = np.asarray(self.cumulative, dtype=float)
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=int)
            if self.actions.shape != self.cumulative.shape:
                raise AggregationError(f"{self.policy} run {self.run}: one action per round is required")
        if self.cumulative.ndim != 1:
            raise AggregationError("regret trace must be one-dimensional")
        if np.any(np.diff(self.cumulative) < -1e-12):
            raise AggregationError(f"{self.policy} run {self.run}: cumulative regret decreased")

    @property
    def horizon(self) -> int:
        return int(self.cumulative.size)

    @property
    def final_regret(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative.size else 0.0


@dataclass(frozen=True, eq=False)
class RegretSummary:
    """Per-round mean, std (ddof=1) and mean +/- 2 std / sqrt(runs) band."""

    policy: str
    runs: int
    mean: np.ndarray
    std: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "policy": self.policy,
            "t": np.arange(1, self.mean.size + 1),
            "mean": self.mean,
            "std": self.std,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
        })


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    """Descending eigenvalues of K~ with the quantities derived from them."""

    eigenvalues: np.ndarray
    log_g: float
    effective_rank: Optional[int]
    rank_x: Optional[int] = None
    rank_z: Optional[int] = None


@dataclass(frozen=True)
class MonotonicityReport:
    mus: List[float]
    log_g: List[float]
    violations: List[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


# -------- Spectra --------

def symmetric_eigenvalues(matrix: np.ndarray) -> np.ndarray:
    """Eigenvalues in descending order, tiny negatives clamped to zero."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.size == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("matrix has non-finite entries")
    eigenvalues = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))[::-1]
    if not np.all(np.isfinite(eigenvalues)):
        raise NumericalError("non-finite eigenvalue")
    scale = max(float(eigenvalues[0]), 0.0)
    if eigenvalues[-1] < -EIGEN_TOLERANCE * scale - 1e-12:
        raise NumericalError(f"matrix is not PSD: smallest eigenvalue {eigenvalues[-1]:.3e}")
    return np.clip(eigenvalues, 0.0, None)


def numerical_rank(matrix: np.ndarray, tolerance: float = RANK_TOLERANCE) -> int:
    """Number of eigenvalues above tolerance * lambda_max."""
    eigenvalues = symmetric_eigenvalues(matrix)
    if eigenvalues.size == 0 or eigenvalues[0] <= 0:
        return 0
    return int(np.sum(eigenvalues > tolerance * eigenvalues[0]))


def log_g_from_eigenvalues(eigenvalues: np.ndarray, lam: float) -> float:
    if not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    return float(np.sum(np.log1p(np.asarray(eigenvalues, dtype=float) / lam)))


def compute_g(gram: np.ndarray, lam: float) -> float:
    """log g = log det(K~ + lam I) - n log lam = sum log((lambda_i + lam) / lam)."""
    return log_g_from_eigenvalues(symmetric_eigenvalues(gram), lam)


def effective_rank(eigenvalues: Sequence[float], lam: float, T: int) -> int:
    """Smallest j with j * lam * log T >= sum of the eigenvalues after the j-th."""
    if T < 2:
        raise DomainError(f"effective rank needs T >= 2, got {T}")
    eigenvalues = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    tails = np.concatenate([np.cumsum(eigenvalues[::-1])[::-1], [0.0]])
    log_t = math.log(T)
    for j, tail in enumerate(tails):
        if j * lam * log_t >= tail:
            return j
    return eigenvalues.size


def spectrum(
    gram: np.ndarray,
    lam: float,
    T: Optional[int] = None,
    context_kernel_gram: Optional[np.ndarray] = None,
    task_matrix: Optional[np.ndarray] = None,
) -> SpectrumReport:
    eigenvalues = symmetric_eigenvalues(gram)
    if T is None:
        T = eigenvalues.size - 1
    return SpectrumReport(
        eigenvalues=eigenvalues,
        log_g=log_g_from_eigenvalues(eigenvalues, lam),
        effective_rank=effective_rank(eigenvalues, lam, T) if T >= 2 else None,
        rank_x=numerical_rank(context_kernel_gram) if context_kernel_gram is not None else None,
        rank_z=numerical_rank(task_matrix) if task_matrix is not None else None,
    )


# -------- Bounds --------

def regret_bound_value(T: int, N: int, delta: float, lam: float, c: float, m: float, log_g: float) -> float:
    """
    2 sqrt(T) + 10 (sqrt(log(2TN(log T + 1)/delta)/2) + c sqrt(lam))
    * sqrt(2 m log g) * sqrt(T ceil(log T)).
    """
    if T < 1 or N < 1 or not 0 < delta < 1 or not lam > 0:
        raise DomainError("regret bound needs T >= 1, N >= 1, delta in (0, 1), lam > 0")
    if log_g < 0:
        raise DomainError(f"log g must be >= 0, got {log_g}")
    log_t = math.log(T)
    confidence = math.sqrt(math.log(2 * T * N * (log_t + 1) / delta) / 2) + c * math.sqrt(lam)
    return 2 * math.sqrt(T) + 10 * confidence * math.sqrt(2 * m * log_g) * math.sqrt(T * math.ceil(log_t))


def effective_rank_bound(r: int, T: int, lam: float, c_k: float) -> float:
    """
    r log(2T(2(T+1)c_k + r lam - r lam log T) / (r lam)).

    Zero when r = 0; infinite (vacuous) when the log argument is not positive.
    """
    if r < 0 or T < 1 or not lam > 0:
        raise DomainError("effective rank bound needs r >= 0, T >= 1, lam > 0")
    if r == 0:
        return 0.0
    argument = 2 * T * (2 * (T + 1) * c_k + r * lam - r * lam * math.log(T)) / (r * lam)
    if argument <= 0:
        return math.inf
    return r * math.log(argument)


def rank_product_bound(rank_z: int, rank_x: int, T: int, lam: float, c_k: float) -> float:
    """r_z r_x log(((T+1) c_k + lam) / lam)."""
    if not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    return rank_z * rank_x * math.log(((T + 1) * c_k + lam) / lam)


# -------- Similarity monotonicity --------

def is_majorized(x: Sequence[float], y: Sequence[float], tolerance: float = 1e-9) -> bool:
    """x is majorized by y: equal totals, every partial sum of sorted x <= that of y."""
    x = np.sort(np.asarray(x, dtype=float))[::-1]
    y = np.sort(np.asarray(y, dtype=float))[::-1]
    if x.shape != y.shape:
        raise DomainError("majorization needs vectors of equal length")
    scale = tolerance * max(1.0, float(np.max(np.abs(np.concatenate([x, y])))) if x.size else 1.0)
    partial_x, partial_y = np.cumsum(x), np.cumsum(y)
    if x.size and abs(partial_x[-1] - partial_y[-1]) > scale * x.size:
        return False
    return bool(np.all(partial_x <= partial_y + scale * x.size))


def rearranged_gram(task_matrix: np.ndarray, n: int, context_gram_r: np.ndarray) -> np.ndarray:
    """(K_Z kron 1_n 1_n^T) elementwise K_X^r for a balanced, arm-sorted history."""
    task_matrix = np.asarray(task_matrix, dtype=float)
    expected = task_matrix.shape[0] * n
    if context_gram_r.shape != (expected, expected):
        raise DomainError(f"rearranged context gram must be {expected}x{expected}, got {context_gram_r.shape}")
    return np.kron(task_matrix, np.ones((n, n))) * context_gram_r


def g_mu_monotonicity_check(
    context_gram_r: np.ndarray,
    n: int,
    N: int,
    lam: float,
    mu_grid: Sequence[float],
    slack: float = CHECK_SLACK,
) -> MonotonicityReport:
    """
    log g(mu) over an ascending mu grid for the balanced design; every
    adjacent pair must satisfy log g(mu_i) >= log g(mu_{i+1}) - slack.
    """
    mus = [float(mu) for mu in mu_grid]
    if any(b < a for a, b in zip(mus, mus[1:])):
        raise DomainError("mu grid must be ascending")
    values = [
        compute_g(rearranged_gram(parametric_task_matrix(mu, N).matrix, n, context_gram_r), lam)
        for mu in mus
    ]
    violations = [
        (mus[i], mus[i + 1], values[i], values[i + 1])
        for i in range(len(values) - 1)
        if values[i] < values[i + 1] - slack
    ]
    return MonotonicityReport(mus=mus, log_g=values, violations=violations)


# -------- Widths --------

def schur_width_sq(gram_with_query: np.ndarray, lam: float) -> float:
    """
    Unweighted s^2 at the last point of ``gram_with_query`` given the others:
    (k - k^T (K + lam I)^{-1} k) / lam, by a dense solve.
    """
    gram_with_query = np.asarray(gram_with_query, dtype=float)
    k_self = float(gram_with_query[-1, -1])
    if gram_with_query.shape[0] == 1:
        return k_self / lam
    K = gram_with_query[:-1, :-1]
    k = gram_with_query[:-1, -1]
    solved = np.linalg.solve(K + lam * np.eye(K.shape[0]), k)
    return (k_self - float(k @ solved)) / lam


def lower_width_bound(k_self: float, n: int, c_k: float, lam_max_task: float, lam: float) -> float:
    """L = (4 n c lmax + lam) / (n c lmax + 2 lam)^2 * (k + lam) - 1."""
    x = n * c_k * lam_max_task
    return (4 * x + lam) / (x + 2 * lam) ** 2 * (k_self + lam) - 1.0


def width_bounds_check(
    gram_with_query: np.ndarray,
    task_matrix: np.ndarray,
    lam: float,
    c_k: float,
    n: int,
    width_sq_fn: Callable[[np.ndarray, float], float] = schur_width_sq,
    mu_grid: Optional[Sequence[float]] = None,
    n_arms: Optional[int] = None,
    label: str = "",
) -> List[DiagnosticRecord]:
    """
    Upper bound s^2 <= c_k/lam, the lower bound L <= s^2 when L > 0, and
    (with ``mu_grid``) L(mu) nonincreasing over the parametric family.

    ``n`` is the largest per-arm count among the points, query included.
    The mu sweep only covers mu where n c lmax(K_Z(mu)) >= 1.5 lam; below
    that L is not monotone in lmax.
    """
    prefix = f"{label}:" if label else ""
    width_sq = float(width_sq_fn(gram_with_query, lam))
    records = [DiagnosticRecord(
        name=f"{prefix}width_upper_bound",
        lhs=width_sq,
        rhs=c_k / lam,
        passed=bool(width_sq <= c_k / lam + CHECK_SLACK),
        detail=f"n={n} lam={lam} c_k={c_k}",
    )]

    lam_max_task = float(symmetric_eigenvalues(task_matrix)[0])
    lower = lower_width_bound(float(gram_with_query[-1, -1]), n, c_k, lam_max_task, lam)
    if lower > 0:
        records.append(DiagnosticRecord(
            name=f"{prefix}width_lower_bound",
            lhs=lower,
            rhs=width_sq,
            passed=bool(lower <= width_sq + CHECK_SLACK),
            detail=f"lambda_max(K_Z)={lam_max_task:.6g}",
        ))

    if mu_grid is not None:
        N = n_arms if n_arms is not None else np.asarray(task_matrix).shape[0]
        k_self = float(gram_with_query[-1, -1])
        regime = [mu for mu in sorted(mu_grid) if n * c_k * (1 + mu * (N - 1)) >= 1.5 * lam]
        values = [lower_width_bound(k_self, n, c_k, 1 + mu * (N - 1), lam) for mu in regime]
        worst = max((b - a for a, b in zip(values, values[1:])), default=0.0)
        records.append(DiagnosticRecord(
            name=f"{prefix}width_lower_bound_mu_monotone",
            lhs=worst,
            rhs=0.0,
            passed=bool(worst <= CHECK_SLACK),
            detail=f"{len(regime)} grid points in regime",
        ))

    for record in records:
        if not record.passed:
            logger.warning("Width bound violated", extra={"check": record.name, "matrix": np.array2string(gram_with_query, precision=6)})
    return records


# -------- Regret --------

def aggregate_runs(traces: Sequence[RegretTrace]) -> RegretSummary:
    """Per-round statistics across runs of one policy."""
    if not traces:
        raise AggregationError("no traces to aggregate")
    policies = {trace.policy for trace in traces}
    if len(policies) > 1:
        raise AggregationError(f"cannot aggregate different policies together: {sorted(policies)}")
    lengths = {trace.horizon for trace in traces}
    if len(lengths) > 1:
        raise AggregationError(f"trace lengths differ: {sorted(lengths)}")

    stacked = np.vstack([trace.cumulative for trace in traces])
    runs = stacked.shape[0]
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0, ddof=1) if runs > 1 else np.zeros_like(mean)
    half_band = 2.0 * std / math.sqrt(runs)
    return RegretSummary(
        policy=traces[0].policy,
        runs=runs,
        mean=mean,
        std=std,
        ci_lo=mean - half_band,
        ci_hi=mean + half_band,
    )


def run_bound_checks(trace: RegretTrace, n_arms: int, delta: float, c: float) -> List[DiagnosticRecord]:
    """
    Effective-rank, rank-product and regret-bound records for one completed run.

    The Gram matrix covers the run's pulled augmented contexts; with n
    points the spectral bounds use T = n - 1.
    """
    if trace.history is None or trace.similarity is None or trace.kernel is None or trace.lam is None:
        raise DomainError(f"{trace.policy} run {trace.run}: trace carries no fitted model")

    points = trace.history.points()
    lam = trace.lam
    label = f"{trace.policy}:run{trace.run}"
    contexts = np.vstack([p.x for p in points])
    c_k = kernel_bound(trace.similarity, trace.kernel, contexts)

    gram = gram_matrix(trace.similarity, trace.kernel, points)
    report = spectrum(gram, lam, T=len(points) - 1,
                      context_kernel_gram=context_gram(trace.kernel, contexts, contexts),
                      task_matrix=trace.similarity.matrix)
    T_spectral = len(points) - 1
    records: List[DiagnosticRecord] = []

    if report.effective_rank is not None:
        records.append(DiagnosticRecord(
            name=f"{label}:effective_rank_bound",
            lhs=report.log_g,
            rhs=effective_rank_bound(report.effective_rank, T_spectral, lam, c_k),
            passed=False,
            detail=f"effective_rank={report.effective_rank}",
        ))
    records.append(DiagnosticRecord(
        name=f"{label}:rank_product_bound",
        lhs=report.log_g,
        rhs=rank_product_bound(report.rank_z, report.rank_x, T_spectral, lam, c_k),
        passed=False,
        detail=f"rank_z={report.rank_z} rank_x={report.rank_x}",
    ))
    m = max(1.0, c_k / lam)
    records.append(DiagnosticRecord(
        name=f"{label}:regret_bound",
        lhs=trace.final_regret,
        rhs=regret_bound_value(trace.horizon, n_arms, delta, lam, c, m, report.log_g),
        passed=False,
        detail=f"log_g={report.log_g:.6g}",
    ))
    if trace.max_width_sq is not None:
        records.append(DiagnosticRecord(
            name=f"{label}:width_upper_bound",
            lhs=trace.max_width_sq,
            rhs=c_k / lam,
            passed=False,
        ))

    return [r.model_copy(update={"passed": bool(r.lhs <= r.rhs + CHECK_SLACK * max(1.0, abs(r.rhs)))}) for r in records]
