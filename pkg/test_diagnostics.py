"""
Tests for the theory diagnostics suite.
"""

import tempfile
import unittest
from pathlib import Path

import pandas as pd

from analysis import schur_width_sq
from diagnostics import (
    DEFAULT_CHECKS,
    EXIT_DIAGNOSTICS_FAILED,
    CheckContext,
    check_sup_structure,
    check_width_bounds,
    run_diagnostics,
)
from models import ExperimentConfig


class TestDiagnostics(unittest.TestCase):
    """Default suite, mutation sanity and edge cases."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = ExperimentConfig(output_dir=str(Path(self.tmp.name) / "diag"), seed=0)

    def tearDown(self):
        self.tmp.cleanup()

    def test_default_suite_passes(self):
        """Test that the default suite passes and writes diagnostics.csv."""
        report = run_diagnostics(self.config)
        self.assertEqual(report.exit_code, 0, [r.name for r in report.failed])
        frame = pd.read_csv(report.path)
        self.assertEqual(list(frame.columns), ["name", "lhs", "rhs", "passed", "detail"])
        self.assertTrue(frame["passed"].all())
        names = set(frame["name"])
        for expected in ("fresh_query:width_upper_bound", "orthogonal_pair:width_lower_bound",
                         "duplicate_point:width_lower_bound", "sup_psi_disjoint", "g_mu_monotone0"):
            self.assertIn(expected, names)

    def test_off_by_lambda_width_is_caught(self):
        """Test that a faulty width formula fails the suite."""
        faulty = lambda gram, lam: schur_width_sq(gram, lam) / lam
        report = run_diagnostics(self.config, checks=[check_width_bounds], width_sq_fn=faulty, write=False)
        self.assertEqual(report.exit_code, EXIT_DIAGNOSTICS_FAILED)
        self.assertIn("fresh_query:width_upper_bound", [r.name for r in report.failed])
        self.assertIsNone(report.path)

    def test_empty_check_list(self):
        """Test that no checks means no records."""
        report = run_diagnostics(self.config, checks=[], write=False)
        self.assertEqual(report.exit_code, 0)
        self.assertEqual(report.records, [])

    def test_seeded_checks_are_reproducible(self):
        """Test that seeded checks repeat exactly."""
        ctx = CheckContext(seed=5)
        for check in (check_width_bounds, check_sup_structure):
            with self.subTest(check=check.__name__):
                first = [r.model_dump() for r in check(ctx)]
                second = [r.model_dump() for r in check(ctx)]
                self.assertEqual(first, second)

    def test_registered_checks(self):
        """Test the names of the default checks."""
        self.assertEqual(set(DEFAULT_CHECKS), {"width_bounds", "similarity_monotonicity", "run_bounds", "sup_structure"})


if __name__ == "__main__":
    unittest.main()
