"""
Bandit policies and the episode loop.

- KMTLUCBPolicy: UCB over the multi-task kernel ridge estimate in any
  similarity mode (independent, pooled, known, parametric, estimated)
- KernelUCBReference: per-arm / pooled kernel ridge on contexts alone, a
  dense-solve reference for the independent and pooled specialisations
- SupKMTLUCBPolicy: level-based master over BaseKMTL-UCB estimates built on
  disjoint round sets
- OraclePolicy, RandomPolicy, FixedArmPolicy: harness baselines

Every policy follows reset(n_arms, rng) / choose(t, observation) /
update(t, arm, reward). Arms are 1-based.
"""

import hashlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from analysis import RegretTrace
from errors import ConfigurationError, DiagnosticsFailure, DomainError
from kernel_core import (
    AugmentedContext,
    TaskSimilarity,
    augment,
    context_gram,
    estimate_task_similarity,
    parametric_task_matrix,
)
from models import PolicyConfig, SimilarityMode
from mtl_regressor import (
    History,
    RegressorState,
    UcbIndex,
    fit,
    fit_or_extend,
    ucb_indices,
)

logger = logging.getLogger(__name__)


def confidence_alpha(T: int, N: int, delta: float) -> float:
    """alpha = sqrt(log(2TN(ceil(log T) + 1) / delta) / 2)."""
    if T < 1 or N < 1 or not 0 < delta < 1:
        raise DomainError("alpha needs T >= 1, N >= 1 and delta in (0, 1)")
    return math.sqrt(math.log(2 * T * N * (math.ceil(math.log(T)) + 1) / delta) / 2)


def resolve_beta(config: PolicyConfig, n_arms: int) -> float:
    """Configured beta, or the theoretical multiplier alpha + c sqrt(lam)."""
    if config.beta is not None:
        return config.beta
    return confidence_alpha(config.horizon, n_arms, config.delta) + config.c * math.sqrt(config.lam)


def argmax_arm(values: Sequence[float], arms: Optional[Sequence[int]] = None) -> int:
    """Arm with the largest value; exact ties go to the first (lowest) arm."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ConfigurationError("cannot choose from an empty candidate list")
    position = int(np.argmax(values))
    return int(arms[position]) if arms is not None else position + 1


def regression_mode(config: PolicyConfig) -> str:
    return "weighted" if config.weighted else "unweighted"


def kmtl_ucb_choose(
    history: History,
    candidates: Sequence[AugmentedContext],
    config: PolicyConfig,
    similarity: TaskSimilarity,
    beta: Optional[float] = None,
) -> int:
    """One KMTL-UCB decision from scratch: fit, score, argmax."""
    if not candidates:
        raise ConfigurationError("cannot choose from an empty candidate list")
    if beta is None:
        beta = resolve_beta(config, len(candidates))
    state = fit(history, similarity, config.context_kernel, config.lam, regression_mode(config))
    indices = ucb_indices(state, candidates, beta)
    return argmax_arm([i.index for i in indices], [i.arm for i in indices])


class BanditPolicy(ABC):
    """Base class for every policy the harness can run."""

    def __init__(self, name: str):
        self.name = name
        self.logger = logging.getLogger(self.__class__.__name__)
        self.n_arms = 0
        self.rng: Optional[np.random.Generator] = None

    def reset(self, n_arms: int, rng: np.random.Generator) -> None:
        if n_arms < 1:
            raise ConfigurationError(f"need at least one arm, got {n_arms}")
        self.n_arms = n_arms
        self.rng = rng

    @abstractmethod
    def choose(self, t: int, observation) -> int:
        ...

    def update(self, t: int, arm: int, reward: float) -> None:
        """Feed back the chosen arm's reward; stateless policies ignore it."""

    def _check_candidates(self, observation) -> None:
        if observation.n_arms != self.n_arms:
            raise ConfigurationError(f"{self.name}: expected {self.n_arms} arms, got {observation.n_arms}")


class OraclePolicy(BanditPolicy):
    """Always plays a best arm by expected reward."""

    def __init__(self):
        super().__init__("oracle")

    def choose(self, t: int, observation) -> int:
        self._check_candidates(observation)
        return argmax_arm(observation.expected_rewards)


class RandomPolicy(BanditPolicy):
    def __init__(self):
        super().__init__("random")

    def choose(self, t: int, observation) -> int:
        self._check_candidates(observation)
        return int(self.rng.integers(1, self.n_arms + 1))


class FixedArmPolicy(BanditPolicy):
    def __init__(self, arm: int):
        super().__init__(f"fixed:{arm}")
        self.arm = arm

    def reset(self, n_arms: int, rng: np.random.Generator) -> None:
        super().reset(n_arms, rng)
        if not 1 <= self.arm <= n_arms:
            raise ConfigurationError(f"fixed arm {self.arm} outside [1..{n_arms}]")

    def choose(self, t: int, observation) -> int:
        self._check_candidates(observation)
        return self.arm


class _KernelPolicy(BanditPolicy):
    """Shared bookkeeping: history of pulled augmented contexts and K_Z."""

    def __init__(self, name: str, config: PolicyConfig, similarity_mode: SimilarityMode,
                 known_similarity: Optional[TaskSimilarity] = None):
        super().__init__(name)
        if similarity_mode == "known" and known_similarity is None:
            raise ConfigurationError(f"{name}: known similarity mode needs a task similarity matrix")
        self.config = config
        self.similarity_mode = similarity_mode
        self.known_similarity = known_similarity
        self.history: Optional[History] = None
        self.similarity: Optional[TaskSimilarity] = None
        self.max_width_sq = 0.0
        self._candidates: List[AugmentedContext] = []

    def reset(self, n_arms: int, rng: np.random.Generator) -> None:
        super().reset(n_arms, rng)
        self.history = History(n_arms)
        self.max_width_sq = 0.0
        self._candidates = []
        self.similarity = self._initial_similarity(n_arms)

    def _initial_similarity(self, n_arms: int) -> TaskSimilarity:
        mode = self.similarity_mode
        if mode == "independent":
            return TaskSimilarity.independent(n_arms)
        if mode == "pooled":
            return TaskSimilarity.pooled(n_arms)
        if mode == "parametric":
            return parametric_task_matrix(self.config.mu, n_arms)
        if mode == "estimated":
            return TaskSimilarity("estimated", np.eye(n_arms))
        if self.known_similarity.n_arms != n_arms:
            raise ConfigurationError(
                f"{self.name}: known similarity covers {self.known_similarity.n_arms} arms, environment has {n_arms}"
            )
        return self.known_similarity

    def _refresh_similarity(self, t: int) -> None:
        if self.similarity_mode != "estimated" or len(self.history) == 0:
            return
        if (t - 1) % self.config.estimate_period != 0:
            return
        self.similarity = estimate_task_similarity(
            self.history, self.config.embedding_kernel, self.config.sigma_z
        )
        self.logger.debug(
            "Re-estimated task similarity",
            extra={"round": t, "arms_pulled": int(np.sum(self.history.pull_counts > 0))}
        )

    def _record_widths(self, indices: Sequence[UcbIndex]) -> None:
        self.max_width_sq = max(self.max_width_sq, max(i.width ** 2 for i in indices))

    def update(self, t: int, arm: int, reward: float) -> None:
        if not self._candidates:
            raise ConfigurationError(f"{self.name}: update() called before choose()")
        self.history.append(t, arm, self._candidates[arm - 1], reward)


class KMTLUCBPolicy(_KernelPolicy):
    """
    Plays argmax_a f^_t(x~_a) + beta * s_{a,t}.

    In estimated mode the task similarity is re-estimated from the history
    every ``estimate_period`` rounds.
    """

    def __init__(self, config: PolicyConfig, name: str = "kmtl-ucb",
                 similarity_mode: Optional[SimilarityMode] = None,
                 known_similarity: Optional[TaskSimilarity] = None):
        super().__init__(name, config, similarity_mode or config.similarity, known_similarity)
        self.beta = 0.0
        self._state: Optional[RegressorState] = None

    def reset(self, n_arms: int, rng: np.random.Generator) -> None:
        super().reset(n_arms, rng)
        self.beta = resolve_beta(self.config, n_arms)
        self._state = None

    def choose(self, t: int, observation) -> int:
        self._check_candidates(observation)
        self._refresh_similarity(t)
        self._candidates = augment(observation.contexts, self.similarity_mode)

        self._state = fit_or_extend(
            self._state, self.history, self.similarity, self.config.context_kernel,
            self.config.lam, regression_mode(self.config), self.config.incremental,
        )
        indices = ucb_indices(self._state, self._candidates, self.beta)
        self._record_widths(indices)
        return argmax_arm([i.index for i in indices], [i.arm for i in indices])


class KernelUCBReference(_KernelPolicy):
    """
    Kernel-UCB on contexts alone by dense solves.

    ``pooled=True`` fits one estimator on every pull; otherwise each arm gets
    its own estimator on its own pulls. Weighted mode scales each pull by
    1/n_{a_tau} exactly like the multi-task estimator.
    """

    def __init__(self, config: PolicyConfig, pooled: bool, name: Optional[str] = None):
        super().__init__(
            name or ("kernel-ucb-pool-ref" if pooled else "kernel-ucb-ind-ref"),
            config,
            "pooled" if pooled else "independent",
        )
        self.pooled = pooled
        self.beta = 0.0

    def reset(self, n_arms: int, rng: np.random.Generator) -> None:
        super().reset(n_arms, rng)
        self.beta = resolve_beta(self.config, n_arms)

    def _score(self, X: np.ndarray, y: np.ndarray, weights: np.ndarray, x: np.ndarray) -> Tuple[float, float]:
        kernel = self.config.context_kernel
        lam = self.config.lam
        k_self = float(context_gram(kernel, x[None, :], x[None, :])[0, 0])
        if y.size == 0:
            return 0.0, math.sqrt(k_self / lam)
        K = context_gram(kernel, X, X)
        k = context_gram(kernel, X, x[None, :])[:, 0]
        system = weights[:, None] * K + lam * np.eye(y.size)
        estimate = float(k @ np.linalg.solve(system, weights * y))
        radicand = k_self - float(k @ np.linalg.solve(system, weights * k))
        return estimate, math.sqrt(max(radicand, 0.0) / lam)

    def choose(self, t: int, observation) -> int:
        self._check_candidates(observation)
        self._candidates = augment(observation.contexts, self.similarity_mode)

        observations = self.history.observations
        X = np.vstack([o.context.x for o in observations]) if observations else np.zeros((0, 0))
        y = self.history.rewards
        arms = self.history.arms
        weights = self.history.weights() if self.config.weighted else np.ones(y.size)

        scores = []
        for candidate in self._candidates:
            if self.pooled:
                estimate, width = self._score(X, y, weights, candidate.x)
            else:
                mask = arms == candidate.arm
                estimate, width = self._score(X[mask], y[mask], weights[mask], candidate.x)
            self.max_width_sq = max(self.max_width_sq, width ** 2)
            scores.append(estimate + self.beta * width)
        return argmax_arm(scores)


# -------- SupKMTL-UCB --------

Branch = Literal["greedy", "filter", "explore"]


@dataclass(frozen=True)
class BranchRecord:
    """One pass through a level of the Sup master."""

    round: int
    level: int
    branch: Branch
    active: Tuple[int, ...]
    ucbs: Tuple[float, ...]
    widths: Tuple[float, ...]
    chosen: Optional[int] = None
    survivors: Tuple[int, ...] = ()


@dataclass
class SupState:
    """
    Level round sets Psi^1..Psi^Q (``psi[q - 1]``) and a log of every branch
    taken, which the structural checks read.
    """

    n_levels: int
    psi: List[List[int]] = field(default_factory=list)
    log: List[BranchRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.n_levels < 1:
            raise DomainError(f"need at least one level, got {self.n_levels}")
        if not self.psi:
            self.psi = [[] for _ in range(self.n_levels)]

    @classmethod
    def for_horizon(cls, T: int) -> "SupState":
        return cls(n_levels=level_count(T))

    def add(self, level: int, t: int) -> None:
        self.psi[level - 1].append(t)


def level_count(T: int) -> int:
    """Q = max(1, ceil(log T))."""
    if T < 1:
        raise DomainError(f"horizon must be >= 1, got {T}")
    return max(1, math.ceil(math.log(T)))


def base_kmtl_ucb(
    psi: Sequence[int],
    history: History,
    candidates: Sequence[AugmentedContext],
    similarity: TaskSimilarity,
    config: PolicyConfig,
    n_arms: Optional[int] = None,
) -> List[UcbIndex]:
    """
    Unweighted ridge on the rounds in ``psi`` only. The returned width is s;
    the index is estimate + (alpha + c sqrt(lam)) s.
    """
    n_arms = n_arms or len(candidates)
    multiplier = confidence_alpha(config.horizon, n_arms, config.delta) + config.c * math.sqrt(config.lam)
    state = fit(history.subset(psi), similarity, config.context_kernel, config.lam, "unweighted")
    return ucb_indices(state, candidates, multiplier)


def sup_kmtl_ucb_choose(
    t: int,
    candidates: Sequence[AugmentedContext],
    state: SupState,
    history: History,
    similarity: TaskSimilarity,
    config: PolicyConfig,
) -> Tuple[int, Optional[int]]:
    """
    Walk down the levels for round ``t``.

    Returns (arm, level) where level is set only when the round must be
    added to Psi^level (the explore branch).
    """
    if not candidates:
        raise ConfigurationError("cannot choose from an empty candidate list")
    T = config.horizon
    n_arms = len(candidates)
    multiplier = confidence_alpha(T, n_arms, config.delta) + config.c * math.sqrt(config.lam)
    greedy_threshold = 1.0 / math.sqrt(T)

    active = [c.arm for c in candidates]
    by_arm = {c.arm: c for c in candidates}
    level = 1
    while True:
        if level > state.n_levels:
            raise DiagnosticsFailure(f"round {t}: level {level} exceeds Q={state.n_levels}")

        indices = base_kmtl_ucb(state.psi[level - 1], history, [by_arm[a] for a in active],
                                similarity, config, n_arms)
        ucbs = tuple(i.index for i in indices)
        widths = tuple(multiplier * i.width for i in indices)

        if all(w <= greedy_threshold for w in widths):
            arm = argmax_arm(ucbs, active)
            state.log.append(BranchRecord(t, level, "greedy", tuple(active), ucbs, widths, chosen=arm))
            return arm, None

        level_threshold = 2.0 ** (-level)
        if all(w <= level_threshold for w in widths):
            best = max(ucbs)
            survivors = tuple(a for a, u in zip(active, ucbs) if u >= best - 2.0 ** (1 - level))
            state.log.append(BranchRecord(t, level, "filter", tuple(active), ucbs, widths, survivors=survivors))
            active = list(survivors)
            level += 1
            continue

        arm = next(a for a, w in zip(active, widths) if w > level_threshold)
        state.log.append(BranchRecord(t, level, "explore", tuple(active), ucbs, widths, chosen=arm))
        return arm, level


class SupKMTLUCBPolicy(_KernelPolicy):
    """SupKMTL-UCB; rounds chosen in the explore branch feed that level's Psi."""

    def __init__(self, config: PolicyConfig, name: str = "sup-kmtl-ucb",
                 similarity_mode: Optional[SimilarityMode] = None,
                 known_similarity: Optional[TaskSimilarity] = None):
        super().__init__(name, config, similarity_mode or config.similarity, known_similarity)
        self.sup_state: Optional[SupState] = None
        self._pending_level: Optional[int] = None
        self._multiplier = 1.0

    def reset(self, n_arms: int, rng: np.random.Generator) -> None:
        super().reset(n_arms, rng)
        self.sup_state = SupState.for_horizon(self.config.horizon)
        self._multiplier = confidence_alpha(self.config.horizon, n_arms, self.config.delta) + self.config.c * math.sqrt(self.config.lam)
        self._pending_level = None

    def choose(self, t: int, observation) -> int:
        self._check_candidates(observation)
        if t > self.config.horizon:
            raise ConfigurationError(f"round {t} beyond the configured horizon {self.config.horizon}")
        self._refresh_similarity(t)
        self._candidates = augment(observation.contexts, self.similarity_mode)
        arm, level = sup_kmtl_ucb_choose(
            t, self._candidates, self.sup_state, self.history, self.similarity, self.config
        )
        for record in reversed(self.sup_state.log):
            if record.round != t:
                break
            widest = max(record.widths) / self._multiplier
            self.max_width_sq = max(self.max_width_sq, widest ** 2)
        self._pending_level = level
        return arm

    def update(self, t: int, arm: int, reward: float) -> None:
        super().update(t, arm, reward)
        if self._pending_level is not None:
            self.sup_state.add(self._pending_level, t)
            self._pending_level = None


# -------- Registry --------

PolicyFactory = Callable[[PolicyConfig, Optional[TaskSimilarity]], BanditPolicy]

POLICY_NAMES = (
    "kmtl-ucb", "kmtl-ucb-est", "kernel-ucb-ind", "kernel-ucb-pool",
    "kernel-ucb-ind-ref", "kernel-ucb-pool-ref", "sup-kmtl-ucb",
    "oracle", "random",
)

_REGISTRY: Dict[str, PolicyFactory] = {
    "kmtl-ucb": lambda cfg, sim: KMTLUCBPolicy(cfg, "kmtl-ucb", "known", sim),
    "kmtl-ucb-est": lambda cfg, sim: KMTLUCBPolicy(cfg, "kmtl-ucb-est", "estimated"),
    "kernel-ucb-ind": lambda cfg, sim: KMTLUCBPolicy(cfg, "kernel-ucb-ind", "independent"),
    "kernel-ucb-pool": lambda cfg, sim: KMTLUCBPolicy(cfg, "kernel-ucb-pool", "pooled"),
    "kernel-ucb-ind-ref": lambda cfg, sim: KernelUCBReference(cfg, pooled=False),
    "kernel-ucb-pool-ref": lambda cfg, sim: KernelUCBReference(cfg, pooled=True),
    "sup-kmtl-ucb": lambda cfg, sim: SupKMTLUCBPolicy(
        cfg, "sup-kmtl-ucb", "known" if sim is not None else "estimated", sim
    ),
    "oracle": lambda cfg, sim: OraclePolicy(),
    "random": lambda cfg, sim: RandomPolicy(),
}


def is_known_policy(name: str) -> bool:
    """Whether ``name`` is a registered policy or a valid parameterised one."""
    try:
        _parse_parameterised(name)
    except ConfigurationError:
        return False
    return True


def _parse_parameterised(name: str) -> Tuple[str, Optional[float]]:
    if name in _REGISTRY:
        return name, None
    prefix, sep, value = name.partition(":")
    if sep and prefix in ("fixed", "kmtl-ucb-mu"):
        try:
            number = int(value) if prefix == "fixed" else float(value)
        except ValueError:
            raise ConfigurationError(f"invalid parameter in policy name '{name}'") from None
        if prefix == "fixed" and number < 1:
            raise ConfigurationError(f"fixed arm must be >= 1, got {number}")
        if prefix == "kmtl-ucb-mu" and not 0.0 <= number <= 1.0:
            raise ConfigurationError(f"mu must lie in [0, 1], got {number}")
        return prefix, number
    raise ConfigurationError(f"unknown policy '{name}'")


def make_policy(name: str, config: PolicyConfig, known_similarity: Optional[TaskSimilarity] = None) -> BanditPolicy:
    """Build a policy by registry name (``fixed:<a>`` and ``kmtl-ucb-mu:<mu>`` take a parameter)."""
    kind, parameter = _parse_parameterised(name)
    if kind == "fixed":
        return FixedArmPolicy(int(parameter))
    if kind == "kmtl-ucb-mu":
        return KMTLUCBPolicy(config.model_copy(update={"mu": parameter}), name, "parametric")
    if kind == "kmtl-ucb" and known_similarity is None:
        raise ConfigurationError("kmtl-ucb needs a known task similarity; this environment provides none")
    return _REGISTRY[kind](config, known_similarity)


# -------- Episodes --------

def config_fingerprint(*parts: object) -> str:
    """Short sha256 over the textual form of the configuration parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).hexdigest()
    return digest[:16]


def run_episode(env, policy: BanditPolicy, T: int, seed: int, run: int = 0, fingerprint: str = "") -> RegretTrace:
    """
    Play ``T`` rounds and record cumulative expected regret and the arms pulled.

    The environment and the policy get separate RNG streams derived from
    (seed, run) so changing one never perturbs the other.
    """
    if T < 1:
        raise DomainError(f"horizon must be >= 1, got {T}")
    env.reset(np.random.default_rng([seed, run, 0]))
    policy.reset(env.n_arms, np.random.default_rng([seed, run, 1]))

    cumulative = np.zeros(T)
    actions = np.zeros(T, dtype=int)
    total = 0.0
    for t in range(1, T + 1):
        observation = env.next_round()
        arm = policy.choose(t, observation)
        policy.update(t, arm, observation.reward(arm))
        total += observation.gap(arm)
        cumulative[t - 1] = total
        actions[t - 1] = arm

    policy.logger.debug("Episode finished", extra={"policy": policy.name, "run": run, "regret": round(total, 6)})

    if isinstance(policy, _KernelPolicy):
        return RegretTrace(
            policy=policy.name, run=run, cumulative=cumulative, actions=actions, fingerprint=fingerprint,
            max_width_sq=policy.max_width_sq, history=policy.history,
            similarity=policy.similarity, kernel=policy.config.context_kernel, lam=policy.config.lam,
        )
    return RegretTrace(policy=policy.name, run=run, cumulative=cumulative, actions=actions,
                       fingerprint=fingerprint)
