"""
Theory diagnostics suite.

Each check builds small seeded instances, evaluates a bound or structural
property and returns DiagnosticRecord rows. run_diagnostics() collects the
rows, writes diagnostics.csv and reports exit code 4 when any row failed.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from analysis import (
    g_mu_monotonicity_check,
    is_majorized,
    rearranged_gram,
    run_bound_checks,
    schur_width_sq,
    symmetric_eigenvalues,
    width_bounds_check,
)
from bandit_policies import SupKMTLUCBPolicy, level_count, make_policy, run_episode
from environments import SyntheticNewsEnvironment
from experiment_runner import write_diagnostics
from kernel_core import (
    AugmentedContext,
    ArmDescriptor,
    context_gram,
    gaussian_task_matrix,
    gram_matrix,
    kernel_bound,
    parametric_task_matrix,
)
from models import DiagnosticRecord, ExperimentConfig, KernelSpec, PolicyConfig, SyntheticNewsConfig

logger = logging.getLogger(__name__)

EXIT_DIAGNOSTICS_FAILED = 4
MU_GRID = tuple(round(0.1 * i, 1) for i in range(11))
WidthSqFn = Callable[[np.ndarray, float], float]


@dataclass(frozen=True)
class CheckContext:
    seed: int
    width_sq_fn: WidthSqFn = schur_width_sq


DiagnosticCheck = Callable[[CheckContext], List[DiagnosticRecord]]


@dataclass
class DiagnosticsReport:
    records: List[DiagnosticRecord]
    exit_code: int
    path: Optional[Path] = None

    @property
    def failed(self) -> List[DiagnosticRecord]:
        return [r for r in self.records if not r.passed]


def _record(name: str, lhs: float, rhs: float, passed: bool, detail: str = "") -> DiagnosticRecord:
    return DiagnosticRecord(name=name, lhs=float(lhs), rhs=float(rhs), passed=bool(passed), detail=detail)


def check_width_bounds(ctx: CheckContext) -> List[DiagnosticRecord]:
    """Width upper/lower bounds on random parametric instances plus the two positive-L instances."""
    rng = np.random.default_rng([ctx.seed, 10])
    kernel = KernelSpec.gaussian(1.0)
    lam = 0.5
    records: List[DiagnosticRecord] = []

    # No history: s^2 = k / lam sits exactly on the upper bound
    fresh = parametric_task_matrix(0.0, 3)
    records.extend(width_bounds_check(np.array([[1.0]]), fresh.matrix, lam, 1.0, 1,
                                      width_sq_fn=ctx.width_sq_fn, label="fresh_query"))

    for instance in range(6):
        n_arms = int(rng.integers(2, 5))
        mu = float(rng.choice(MU_GRID))
        similarity = parametric_task_matrix(mu, n_arms)
        size = int(rng.integers(1, 12))
        arms = rng.integers(1, n_arms + 1, size=size + 1)
        points = [AugmentedContext(ArmDescriptor(int(a)), rng.normal(size=2)) for a in arms]
        gram = gram_matrix(similarity, kernel, points)
        n = int(np.max(np.bincount(arms)))
        c_k = kernel_bound(similarity, kernel)
        records.extend(width_bounds_check(
            gram, similarity.matrix, lam, c_k, n, width_sq_fn=ctx.width_sq_fn,
            mu_grid=MU_GRID, n_arms=n_arms, label=f"random{instance}",
        ))

    # Positive lower bounds: orthogonal pair, and a duplicated point
    records.extend(width_bounds_check(np.eye(2), np.eye(2), 1.0, 1.0, 1,
                                      width_sq_fn=ctx.width_sq_fn, label="orthogonal_pair"))
    records.extend(width_bounds_check(np.ones((2, 2)), np.ones((1, 1)), 1.0, 1.0, 2,
                                      width_sq_fn=ctx.width_sq_fn, label="duplicate_point"))
    return records


def check_similarity_monotonicity(ctx: CheckContext) -> List[DiagnosticRecord]:
    """log g(mu) nonincreasing on balanced instances, eigenvalue majorization, rearrangement identity."""
    rng = np.random.default_rng([ctx.seed, 11])
    kernel = KernelSpec.gaussian(1.0)
    lam = 1.0
    records: List[DiagnosticRecord] = []

    for instance in range(5):
        n_arms = int(rng.integers(2, 6))
        n = int(rng.integers(1, 7))
        X = rng.normal(size=(n_arms * n, 2))
        report = g_mu_monotonicity_check(context_gram(kernel, X, X), n, n_arms, lam, MU_GRID)
        worst = max((b - a for a, b in zip(report.log_g, report.log_g[1:])), default=0.0)
        records.append(_record(f"g_mu_monotone{instance}", worst, 1e-9, report.passed, f"N={n_arms} n={n}"))

        similarity = parametric_task_matrix(float(rng.choice(MU_GRID)), n_arms)
        arms = np.repeat(np.arange(1, n_arms + 1), n)
        order = rng.permutation(arms.size)
        points = [AugmentedContext(ArmDescriptor(int(arms[i])), X[i]) for i in order]
        shuffled = symmetric_eigenvalues(gram_matrix(similarity, kernel, points))
        arranged = symmetric_eigenvalues(rearranged_gram(similarity.matrix, n, context_gram(kernel, X, X)))
        gap = float(np.max(np.abs(shuffled - arranged)))
        records.append(_record(f"rearrangement{instance}", gap, 1e-8, gap <= 1e-8))

    for n_arms in (3, 5):
        for mu_low, mu_high in ((0.2, 0.8), (0.0, 0.5), (0.5, 1.0)):
            low = symmetric_eigenvalues(parametric_task_matrix(mu_low, n_arms).matrix)
            high = symmetric_eigenvalues(parametric_task_matrix(mu_high, n_arms).matrix)
            excess = float(np.max(np.cumsum(low) - np.cumsum(high)))
            records.append(_record(f"majorization_N{n_arms}_{mu_low}_{mu_high}", excess, 0.0,
                                   is_majorized(low, high)))
    return records


def _synthetic_policy_config(horizon: int) -> PolicyConfig:
    return PolicyConfig(similarity="known", lam=1.0, horizon=horizon,
                        context_kernel=KernelSpec.gaussian(0.5), embedding_kernel=KernelSpec.gaussian(0.5, "embedding"))


def check_run_bounds(ctx: CheckContext) -> List[DiagnosticRecord]:
    """Spectral and regret bounds on short synthetic episodes."""
    env = SyntheticNewsEnvironment(SyntheticNewsConfig(n_arms=3))
    horizon = 60
    config = _synthetic_policy_config(horizon)
    similarity = gaussian_task_matrix(env.arm_features(), 0.5)
    records: List[DiagnosticRecord] = []
    for name in ("kmtl-ucb", "kmtl-ucb-est", "kernel-ucb-ind"):
        trace = run_episode(env, make_policy(name, config, similarity), horizon, ctx.seed)
        records.extend(run_bound_checks(trace, env.n_arms, config.delta, config.c))
    return records


def check_sup_structure(ctx: CheckContext) -> List[DiagnosticRecord]:
    """Disjoint level sets, sound filters and explore-only membership for SupKMTL-UCB."""
    horizon = 32
    env = SyntheticNewsEnvironment(SyntheticNewsConfig(n_arms=3))
    config = _synthetic_policy_config(horizon)
    policy = SupKMTLUCBPolicy(config, known_similarity=gaussian_task_matrix(env.arm_features(), 0.5),
                              similarity_mode="known")
    run_episode(env, policy, horizon, ctx.seed)
    state = policy.sup_state

    levels = level_count(horizon)
    records = [_record("sup_level_count", 2.0 ** (-levels), 1.0 / math.sqrt(horizon),
                       2.0 ** (-levels) <= 1.0 / math.sqrt(horizon), f"Q={levels}")]

    members = [t for psi in state.psi for t in psi]
    overlap = len(members) - len(set(members))
    records.append(_record("sup_psi_disjoint", overlap, 0, overlap == 0))

    explored = {r.round for r in state.log if r.branch == "explore"}
    stray = len(set(members) - explored)
    records.append(_record("sup_psi_from_explore", stray, 0, stray == 0))

    worst_gap = 0.0
    for record in state.log:
        if record.branch != "filter":
            continue
        best = max(record.ucbs)
        kept = {a: u for a, u in zip(record.active, record.ucbs) if a in record.survivors}
        worst_gap = max(worst_gap, max(best - u for u in kept.values()) - 2.0 ** (1 - record.level))
    records.append(_record("sup_filter_sound", worst_gap, 0.0, worst_gap <= 1e-12))

    rounds = [r.round for r in state.log if r.branch != "filter"]
    records.append(_record("sup_one_decision_per_round", len(rounds), horizon,
                           sorted(rounds) == list(range(1, horizon + 1))))
    return records


DEFAULT_CHECKS: Dict[str, DiagnosticCheck] = {
    "width_bounds": check_width_bounds,
    "similarity_monotonicity": check_similarity_monotonicity,
    "run_bounds": check_run_bounds,
    "sup_structure": check_sup_structure,
}


def run_diagnostics(
    config: ExperimentConfig,
    checks: Optional[Sequence[DiagnosticCheck]] = None,
    width_sq_fn: WidthSqFn = schur_width_sq,
    write: bool = True,
) -> DiagnosticsReport:
    """
    Run ``checks`` (default: DEFAULT_CHECKS) seeded by ``config.seed``.

    An empty check list is valid and passes.
    """
    selected = list(DEFAULT_CHECKS.values()) if checks is None else list(checks)
    ctx = CheckContext(seed=config.seed, width_sq_fn=width_sq_fn)

    records: List[DiagnosticRecord] = []
    for check in selected:
        records.extend(check(ctx))

    path = None
    if write:
        output_dir = Path(config.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        path = write_diagnostics(records, output_dir)

    report = DiagnosticsReport(records=records, exit_code=0, path=path)
    if report.failed:
        report.exit_code = EXIT_DIAGNOSTICS_FAILED
        logger.error("❌ Diagnostics failed", extra={"failed": ",".join(r.name for r in report.failed)})
    else:
        logger.info("✅ Diagnostics passed", extra={"checks": len(selected), "records": len(records)})
    return report
