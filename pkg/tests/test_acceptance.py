"""
Full-scale reproductions of the headline behaviour.

These take minutes; they run only with KMTL_RUN_SLOW=1.
"""

import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

from analysis import g_mu_monotonicity_check, is_majorized, run_bound_checks, symmetric_eigenvalues
from bandit_policies import SupKMTLUCBPolicy, level_count, make_policy, run_episode
from environments import SyntheticNewsEnvironment
from experiment_config import ExperimentConfigFile, build_config
from experiment_runner import run_experiment
from kernel_core import ArmDescriptor, AugmentedContext, context_gram, gaussian_task_matrix, parametric_task_matrix
from models import KernelSpec, PolicyConfig, SyntheticNewsConfig
from mtl_regressor import History, fit, predict_many, width_many

RUN_SLOW = os.getenv("KMTL_RUN_SLOW") == "1"
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _shipped_config(name, output_dir, **extra):
    """A config from configs/ with the output redirected."""
    data = ExperimentConfigFile(str(CONFIG_DIR / name)).read()
    data.update(output_dir=str(output_dir), **extra)
    return build_config(data)


def _final_regrets(result, policy):
    return np.array([t.final_regret for t in result.traces if t.policy == policy])


@pytest.mark.slow
@unittest.skipUnless(RUN_SLOW, "set KMTL_RUN_SLOW=1 to run acceptance reproductions")
class TestAcceptance(unittest.TestCase):
    """Scaled reproductions on the synthetic and bundled multiclass environments."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.synthetic_config = _shipped_config("synthetic.json", cls.dir / "synthetic", diagnostics=True)
        cls.synthetic = run_experiment(cls.synthetic_config)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_dense_oracle_equivalence(self):
        """Test that the Cholesky solver matches a dense inverse on random histories."""
        rng = np.random.default_rng(0)
        kernel = KernelSpec.gaussian(1.0)
        for _ in range(200):
            n_arms = int(rng.integers(1, 6))
            similarity = parametric_task_matrix(float(rng.uniform()), n_arms)
            history = History(n_arms)
            for t in range(1, int(rng.integers(1, 26)) + 1):
                arm = int(rng.integers(1, n_arms + 1))
                history.append(t, arm, AugmentedContext(ArmDescriptor(arm), rng.normal(size=2)), rng.uniform())
            mode = "weighted" if rng.uniform() < 0.5 else "unweighted"
            state = fit(history, similarity, kernel, 1.0, mode)
            query = [AugmentedContext(ArmDescriptor(int(rng.integers(1, n_arms + 1))), rng.normal(size=2))]

            points = history.points()
            K = np.array([[similarity.matrix[p.arm - 1, q.arm - 1] * math.exp(-np.sum((p.x - q.x) ** 2) / 2)
                           for q in points] for p in points])
            k = np.array([similarity.matrix[query[0].arm - 1, p.arm - 1] * math.exp(-np.sum((query[0].x - p.x) ** 2) / 2)
                          for p in points])
            eta = np.diag(history.weights() if mode == "weighted" else np.ones(len(points)))
            inverse = np.linalg.inv(eta @ K + np.eye(len(points)))
            estimate = k @ inverse @ eta @ history.rewards
            width = math.sqrt(max(1.0 - k @ inverse @ eta @ k, 0.0))
            np.testing.assert_allclose(predict_many(state, query)[0], estimate, rtol=1e-8, atol=1e-12)
            np.testing.assert_allclose(width_many(state, query)[0], width, rtol=1e-8, atol=1e-12)

    def test_specialisation_equivalence(self):
        """Test that the fast baselines play the same arms as the dense references."""
        env = SyntheticNewsEnvironment(SyntheticNewsConfig(n_arms=5))
        config = PolicyConfig(lam=1.0, horizon=200, context_kernel=KernelSpec.gaussian(0.5))
        for seed in range(20):
            for fast, reference in (("kernel-ucb-pool", "kernel-ucb-pool-ref"), ("kernel-ucb-ind", "kernel-ucb-ind-ref")):
                a = run_episode(env, make_policy(fast, config), 200, seed)
                b = run_episode(env, make_policy(reference, config), 200, seed)
                with self.subTest(seed=seed, policy=fast):
                    np.testing.assert_allclose(a.cumulative, b.cumulative, atol=1e-9)
                    np.testing.assert_array_equal(a.actions, b.actions)
                    self.assertLessEqual(a.max_width_sq, 1.0 / config.lam + 1e-12)

    def test_synthetic_ordering(self):
        """Test that known-similarity KMTL-UCB beats every baseline in most runs."""
        self.assertEqual(self.synthetic_config.policies, ["kernel-ucb-pool", "kernel-ucb-ind", "kmtl-ucb", "kmtl-ucb-est"])
        kmtl = _final_regrets(self.synthetic, "kmtl-ucb")
        pooled = _final_regrets(self.synthetic, "kernel-ucb-pool")
        self.assertLess(kmtl.mean(), pooled.mean())
        for other in ("kernel-ucb-pool", "kernel-ucb-ind", "kmtl-ucb-est"):
            wins = int(np.sum(kmtl <= _final_regrets(self.synthetic, other)))
            with self.subTest(other=other):
                self.assertGreaterEqual(wins, 8)

    def test_synthetic_bounds(self):
        """Test that every bound check passes on the synthetic runs."""
        self.assertTrue(self.synthetic.records)
        failed = [r.name for r in self.synthetic.records if not r.passed]
        self.assertEqual(failed, [])

    def test_synthetic_determinism(self):
        """Test that a rerun writes a byte-identical regret.csv."""
        rerun = run_experiment(self.synthetic_config.model_copy(update={"output_dir": str(self.dir / "rerun")}))
        self.assertEqual(self.synthetic.paths["regret"].read_bytes(), rerun.paths["regret"].read_bytes())

    def test_multiclass_sanity(self):
        """Test that estimated similarity is no worse than independent arms on the fixture."""
        config = _shipped_config("mini_digits.json", self.dir / "mini", policies=["kernel-ucb-ind", "kmtl-ucb-est"])
        result = run_experiment(config)
        estimated = _final_regrets(result, "kmtl-ucb-est").mean()
        independent = _final_regrets(result, "kernel-ucb-ind").mean()
        self.assertLessEqual(estimated, 1.1 * independent)
        self.assertTrue(all(t.max_width_sq <= 1.0 / config.lam + 1e-12 for t in result.traces))

    def test_similarity_monotonicity(self):
        """Test that the information gain grows with the shared-similarity weight."""
        rng = np.random.default_rng(1)
        grid = [round(0.1 * i, 1) for i in range(11)]
        for _ in range(50):
            n_arms = int(rng.integers(2, 6))
            n = int(rng.integers(1, 7))
            X = rng.normal(size=(n_arms * n, 2))
            report = g_mu_monotonicity_check(context_gram(KernelSpec.gaussian(1.0), X, X), n, n_arms, 1.0, grid)
            self.assertTrue(report.passed, report.violations)
            low, high = sorted(rng.choice(grid, size=2))
            self.assertTrue(is_majorized(symmetric_eigenvalues(parametric_task_matrix(low, n_arms).matrix),
                                         symmetric_eigenvalues(parametric_task_matrix(high, n_arms).matrix)))

    def test_sup_structure(self):
        """Test that SupKMTL-UCB keeps level sets disjoint and decides each round once."""
        horizon = 128
        self.assertEqual(level_count(horizon), 5)
        self.assertLessEqual(2.0 ** -level_count(horizon), 1 / math.sqrt(horizon))
        env = SyntheticNewsEnvironment(SyntheticNewsConfig(n_arms=5))
        config = PolicyConfig(lam=1.0, horizon=horizon, context_kernel=KernelSpec.gaussian(0.5))
        similarity = gaussian_task_matrix(env.arm_features(), 0.5)
        for seed in range(20):
            policy = SupKMTLUCBPolicy(config, known_similarity=similarity, similarity_mode="known")
            trace = run_episode(env, policy, horizon, seed)
            state = policy.sup_state
            members = [t for psi in state.psi for t in psi]
            with self.subTest(seed=seed):
                self.assertEqual(len(members), len(set(members)))
                for record in state.log:
                    if record.branch == "filter":
                        best = max(record.ucbs)
                        kept = [u for a, u in zip(record.active, record.ucbs) if a in record.survivors]
                        self.assertTrue(all(best - u <= 2.0 ** (1 - record.level) + 1e-12 for u in kept))
                decisions = sorted(r.round for r in state.log if r.branch != "filter")
                self.assertEqual(decisions, list(range(1, horizon + 1)))
                self.assertTrue(all(r.passed for r in run_bound_checks(trace, 5, config.delta, config.c)))


if __name__ == "__main__":
    unittest.main()
