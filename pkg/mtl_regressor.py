"""
Multi-task kernel ridge regression over augmented contexts.

Provides:
- History: the ordered log of pulls and the per-arm counts n_{a,t}
- fit(): weighted (1/n_a per observation) or unweighted kernel ridge solve
- predict() / width(): the estimate f^_t(x~) and the UCB width s_{a,t}
- ucb_indices(): estimate + beta * width for a list of candidates
- extend(): rank-one Cholesky update for unweighted states

The weighted system (eta K + lam I)^{-1} eta is non-symmetric; it is solved
through eta^{1/2} (eta^{1/2} K eta^{1/2} + lam I)^{-1} eta^{1/2}, whose middle
factor is SPD and handled by Cholesky.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Literal, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from errors import ConfigurationError, DomainError, NumericalError
from kernel_core import AugmentedContext, TaskSimilarity, product_block, stack_points
from models import KernelSpec

logger = logging.getLogger(__name__)

RegressionMode = Literal["weighted", "unweighted"]

# Negative width radicands down to -RADICAND_TOLERANCE * max(1, k(x, x)) are rounding noise
RADICAND_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class Observation:
    """One pulled arm: (round, arm, augmented context, reward)."""

    round: int
    arm: int
    context: AugmentedContext
    reward: float


class History:
    """
    Ordered log of observations with per-arm pull counts.

    The counts always sum to the number of observations.
    """

    def __init__(self, n_arms: int, observations: Iterable[Observation] = ()):
        if n_arms < 1:
            raise ConfigurationError(f"history needs at least one arm, got {n_arms}")
        self.n_arms = n_arms
        self._observations: List[Observation] = []
        self._pull_counts = np.zeros(n_arms, dtype=int)
        for observation in observations:
            self._add(observation)

    def _add(self, observation: Observation) -> None:
        if not 1 <= observation.arm <= self.n_arms:
            raise IndexError(f"arm {observation.arm} outside [1..{self.n_arms}]")
        if observation.context.arm != observation.arm:
            raise ConfigurationError("augmented context belongs to a different arm")
        if not np.isfinite(observation.reward):
            raise ConfigurationError(f"reward must be finite, got {observation.reward}")
        if self._observations and observation.round <= self._observations[-1].round:
            raise ConfigurationError("history rounds must be strictly increasing")
        self._observations.append(observation)
        self._pull_counts[observation.arm - 1] += 1

    def append(self, round: int, arm: int, context: AugmentedContext, reward: float) -> Observation:
        observation = Observation(round, arm, context, float(reward))
        self._add(observation)
        return observation

    def __len__(self) -> int:
        return len(self._observations)

    @property
    def observations(self) -> tuple:
        return tuple(self._observations)

    @property
    def pull_counts(self) -> np.ndarray:
        return self._pull_counts.copy()

    @property
    def rounds(self) -> np.ndarray:
        return np.array([o.round for o in self._observations], dtype=int)

    @property
    def arms(self) -> np.ndarray:
        return np.array([o.arm for o in self._observations], dtype=int)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([o.reward for o in self._observations], dtype=float)

    def points(self) -> List[AugmentedContext]:
        return [o.context for o in self._observations]

    def weights(self) -> np.ndarray:
        """Diagonal of eta: 1 / n_{a_tau} for every logged pull."""
        if not self._observations:
            return np.zeros(0)
        return 1.0 / self._pull_counts[self.arms - 1]

    def contexts_by_arm(self) -> List[np.ndarray]:
        """Row-stacked contexts of the rounds where each arm was pulled."""
        dim = self._observations[0].context.x.shape[0] if self._observations else 0
        groups: List[List[np.ndarray]] = [[] for _ in range(self.n_arms)]
        for observation in self._observations:
            groups[observation.arm - 1].append(observation.context.x)
        return [np.vstack(g) if g else np.zeros((0, dim)) for g in groups]

    def subset(self, rounds: Iterable[int]) -> "History":
        """Observations whose round is in ``rounds``, order preserved."""
        wanted = set(rounds)
        return History(self.n_arms, (o for o in self._observations if o.round in wanted))

    def snapshot(self) -> "History":
        return History(self.n_arms, self._observations)


@dataclass(frozen=True)
class UcbIndex:
    """Per-arm (estimate, width, index = estimate + beta * width)."""

    arm: int
    estimate: float
    width: float
    index: float


@dataclass(frozen=True, eq=False)
class RegressorState:
    """A fitted (or empty) regressor; immutable after fit."""

    mode: RegressionMode
    lam: float
    similarity: TaskSimilarity
    kernel: KernelSpec
    arms: np.ndarray
    contexts: np.ndarray
    rewards: np.ndarray
    weights: np.ndarray
    gram: np.ndarray
    cholesky_lower: np.ndarray
    coefficients: np.ndarray

    @property
    def size(self) -> int:
        return int(self.arms.size)

    @property
    def is_empty(self) -> bool:
        return self.size == 0


def _empty_state(similarity: TaskSimilarity, kernel: KernelSpec, lam: float, mode: RegressionMode) -> RegressorState:
    empty = np.zeros(0)
    return RegressorState(
        mode=mode, lam=lam, similarity=similarity, kernel=kernel,
        arms=np.zeros(0, dtype=int), contexts=np.zeros((0, 0)), rewards=empty,
        weights=empty, gram=np.zeros((0, 0)), cholesky_lower=np.zeros((0, 0)),
        coefficients=empty,
    )


def _factorize(gram: np.ndarray, root_weights: np.ndarray, lam: float) -> np.ndarray:
    system = root_weights[:, None] * gram * root_weights[None, :] + lam * np.eye(gram.shape[0])
    try:
        lower = cholesky(system, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed: {exc}", float(np.linalg.cond(system))) from exc
    if not np.all(np.isfinite(lower)):
        raise NumericalError("Cholesky factor is not finite", float(np.linalg.cond(system)))
    return lower


def _coefficients(lower: np.ndarray, root_weights: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    coefficients = root_weights * cho_solve((lower, True), root_weights * rewards)
    if not np.all(np.isfinite(coefficients)):
        system = lower @ lower.T
        raise NumericalError("ridge coefficients are not finite", float(np.linalg.cond(system)))
    return coefficients


def fit(
    history: History,
    similarity: TaskSimilarity,
    kernel: KernelSpec,
    lam: float,
    mode: RegressionMode = "weighted",
) -> RegressorState:
    """
    Solve the multi-task ridge problem on ``history``.

    Weighted mode scales each squared loss by 1/n_{a,t-1}; unweighted mode
    drops those factors.
    """
    if not lam > 0:
        raise DomainError(f"lambda must be > 0, got {lam}")
    if mode not in ("weighted", "unweighted"):
        raise ConfigurationError(f"unknown regression mode '{mode}'")
    if len(history) == 0:
        return _empty_state(similarity, kernel, lam, mode)

    arms, contexts = stack_points(history.points())
    gram = product_block(similarity, kernel, arms, contexts, arms, contexts)
    gram = 0.5 * (gram + gram.T)
    rewards = history.rewards
    weights = history.weights() if mode == "weighted" else np.ones(len(history))
    root_weights = np.sqrt(weights)

    lower = _factorize(gram, root_weights, lam)
    coefficients = _coefficients(lower, root_weights, rewards)

    return RegressorState(
        mode=mode, lam=lam, similarity=similarity, kernel=kernel,
        arms=arms, contexts=contexts, rewards=rewards, weights=weights,
        gram=gram, cholesky_lower=lower, coefficients=coefficients,
    )


def extend(state: RegressorState, point: AugmentedContext, reward: float) -> RegressorState:
    """
    Append one observation to an unweighted state by extending its Cholesky
    factor. Weighted states must be refitted: a new pull changes eta for
    every earlier pull of the same arm.
    """
    if state.mode != "unweighted":
        raise ConfigurationError("incremental updates are only valid in unweighted mode")

    arm = np.array([point.arm], dtype=int)
    x = point.x[None, :]
    self_value = float(product_block(state.similarity, state.kernel, arm, x, arm, x)[0, 0])

    if state.is_empty:
        arms, contexts = arm, x
        gram = np.array([[self_value]])
        lower = np.array([[np.sqrt(self_value + state.lam)]])
    else:
        column = product_block(state.similarity, state.kernel, state.arms, state.contexts, arm, x)[:, 0]
        row = solve_triangular(state.cholesky_lower, column, lower=True)
        pivot_sq = self_value + state.lam - float(row @ row)
        if not pivot_sq > 0:
            raise NumericalError(f"non-positive Cholesky pivot {pivot_sq:.3e} while extending")
        n = state.size
        lower = np.zeros((n + 1, n + 1))
        lower[:n, :n] = state.cholesky_lower
        lower[n, :n] = row
        lower[n, n] = np.sqrt(pivot_sq)
        gram = np.zeros((n + 1, n + 1))
        gram[:n, :n] = state.gram
        gram[:n, n] = column
        gram[n, :n] = column
        gram[n, n] = self_value
        arms = np.concatenate([state.arms, arm])
        contexts = np.vstack([state.contexts, x])

    rewards = np.append(state.rewards, float(reward))
    weights = np.ones(rewards.size)
    coefficients = _coefficients(lower, weights, rewards)

    return RegressorState(
        mode=state.mode, lam=state.lam, similarity=state.similarity, kernel=state.kernel,
        arms=arms, contexts=contexts, rewards=rewards, weights=weights,
        gram=gram, cholesky_lower=lower, coefficients=coefficients,
    )


def self_kernel(state: RegressorState, queries: Sequence[AugmentedContext]) -> np.ndarray:
    """k~(x~, x~) for each query."""
    arms, X = stack_points(queries)
    task_diag = np.ones(arms.size) if state.similarity.mode in ("independent", "pooled") \
        else np.diag(state.similarity.matrix)[arms - 1]
    state.similarity.check_arms(arms)
    context_diag = np.ones(arms.size) if state.kernel.family == "gaussian" else np.sum(X ** 2, axis=1)
    return task_diag * context_diag


def kernel_vectors(state: RegressorState, queries: Sequence[AugmentedContext]) -> np.ndarray:
    """Rows k~_{t-1}(x~) for each query (shape: queries x history)."""
    if state.is_empty:
        return np.zeros((len(queries), 0))
    arms, X = stack_points(queries)
    return product_block(state.similarity, state.kernel, arms, X, state.arms, state.contexts)


def predict_many(state: RegressorState, queries: Sequence[AugmentedContext]) -> np.ndarray:
    if state.is_empty:
        return np.zeros(len(queries))
    return kernel_vectors(state, queries) @ state.coefficients


def width_many(state: RegressorState, queries: Sequence[AugmentedContext]) -> np.ndarray:
    """
    s = lam^{-1/2} sqrt(k~(x~, x~) - k^T (eta K + lam I)^{-1} eta k) per query.
    Before any observation the subtracted term is zero.
    """
    diag = self_kernel(state, queries)
    if state.is_empty:
        radicand = diag
    else:
        root_weights = np.sqrt(state.weights)
        scaled = kernel_vectors(state, queries) * root_weights[None, :]
        solved = solve_triangular(state.cholesky_lower, scaled.T, lower=True)
        radicand = diag - np.sum(solved ** 2, axis=0)

    tolerance = RADICAND_TOLERANCE * np.maximum(1.0, diag)
    if np.any(radicand < -tolerance):
        worst = float(np.min(radicand))
        raise NumericalError(f"width radicand {worst:.3e} is negative beyond rounding")
    if np.any(radicand < 0):
        logger.debug("Clamping tiny negative width radicand", extra={"radicand": float(np.min(radicand))})
    return np.sqrt(np.clip(radicand, 0.0, None) / state.lam)


def predict(state: RegressorState, query: AugmentedContext) -> float:
    """f^_t(x~) = k~_{t-1}(x~)^T alpha; zero for an empty state."""
    return float(predict_many(state, [query])[0])


def width(state: RegressorState, query: AugmentedContext) -> float:
    return float(width_many(state, [query])[0])


def ucb_indices(state: RegressorState, candidates: Sequence[AugmentedContext], beta: float) -> List[UcbIndex]:
    """One UcbIndex per candidate: estimate + beta * width."""
    if not beta >= 0:
        raise DomainError(f"beta must be >= 0, got {beta}")
    estimates = predict_many(state, candidates)
    widths = width_many(state, candidates)
    return [
        UcbIndex(arm=c.arm, estimate=float(e), width=float(w), index=float(e + beta * w))
        for c, e, w in zip(candidates, estimates, widths)
    ]


def fit_or_extend(
    previous: Optional[RegressorState],
    history: History,
    similarity: TaskSimilarity,
    kernel: KernelSpec,
    lam: float,
    mode: RegressionMode,
    incremental: bool,
) -> RegressorState:
    """
    Refit, or extend ``previous`` by the newest observation when that is
    valid: unweighted mode, same similarity object, exactly one new row.
    """
    if (
        incremental
        and mode == "unweighted"
        and previous is not None
        and previous.similarity is similarity
        and previous.size == len(history) - 1
        and len(history) > 0
    ):
        newest = history.observations[-1]
        return extend(previous, newest.context, newest.reward)
    return fit(history, similarity, kernel, lam, mode)
