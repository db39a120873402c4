"""
Unit tests for bandwidth selection.
"""

import math
import unittest

import numpy as np

from bandwidth import (
    FALLBACK_BANDWIDTH,
    GRID_FACTORS,
    grid_cv_bandwidth,
    median_bandwidth,
    select_bandwidth,
    select_sigma_z,
)
from errors import ConfigurationError
from models import KernelSpec


class TestMedianBandwidth(unittest.TestCase):
    """Test the median heuristic."""

    def test_two_points(self):
        """Test the median heuristic on two points."""
        sigma = median_bandwidth(np.array([[0.0, 0.0], [2.0, 0.0]]))
        self.assertAlmostEqual(sigma, 2.0 / math.sqrt(2.0), places=12)
        self.assertAlmostEqual(sigma, 1.41421, places=5)

    def test_identical_points_fall_back(self):
        """Test the fallback when every distance is zero."""
        with self.assertLogs("bandwidth", level="WARNING"):
            self.assertEqual(median_bandwidth(np.ones((4, 3))), FALLBACK_BANDWIDTH)

    def test_single_point_falls_back(self):
        """Test the fallback for a single point."""
        with self.assertLogs("bandwidth", level="WARNING"):
            self.assertEqual(median_bandwidth(np.array([[1.0, 2.0]])), FALLBACK_BANDWIDTH)

    def test_one_dimensional_input(self):
        """Test that a flat array is read as one feature."""
        self.assertAlmostEqual(median_bandwidth(np.array([0.0, 1.0, 3.0])), 2.0 / math.sqrt(2.0), places=12)


class TestGridCV(unittest.TestCase):
    """Test cross-validated bandwidth selection."""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.data = rng.uniform(-2, 2, size=(60, 1))
        self.targets = np.sin(3 * self.data[:, 0]) + 0.05 * rng.normal(size=60)

    def test_result_on_grid(self):
        """Test that grid search returns a grid point."""
        center = median_bandwidth(self.data)
        sigma = grid_cv_bandwidth(self.data, self.targets, lam=0.1, seed=0)
        self.assertTrue(any(math.isclose(sigma, center * f) for f in GRID_FACTORS))

    def test_deterministic(self):
        """Test that grid search is seeded."""
        first = grid_cv_bandwidth(self.data, self.targets, lam=0.1, seed=3)
        second = grid_cv_bandwidth(self.data, self.targets, lam=0.1, seed=3)
        self.assertEqual(first, second)

    def test_too_few_points_use_median(self):
        """Test that tiny samples use the median heuristic."""
        data, targets = self.data[:4], self.targets[:4]
        self.assertEqual(grid_cv_bandwidth(data, targets), median_bandwidth(data))

    def test_mismatched_targets(self):
        """Test that targets must match the data rows."""
        with self.assertRaises(ConfigurationError):
            grid_cv_bandwidth(self.data, self.targets[:10])


class TestSelectBandwidth(unittest.TestCase):
    """Test strategy dispatch."""

    def test_strategies(self):
        """Test strategy dispatch."""
        data = np.array([[0.0], [2.0]])
        self.assertAlmostEqual(select_bandwidth(data), math.sqrt(2.0), places=12)
        with self.assertRaises(ConfigurationError):
            select_bandwidth(data, strategy="grid-cv")
        with self.assertRaises(ConfigurationError):
            select_bandwidth(np.zeros((0, 2)))

    def test_sigma_z(self):
        """Test sigma_Z from embedding distances."""
        kernel = KernelSpec.gaussian(1.0, "embedding")
        groups = [np.array([[0.0]]), np.array([[2.0]]), np.zeros((0, 1))]
        expected = math.sqrt(2.0 - 2.0 * math.exp(-2.0)) / math.sqrt(2.0)
        self.assertAlmostEqual(select_sigma_z(groups, kernel), expected, places=12)
        with self.assertLogs("bandwidth", level="WARNING"):
            self.assertEqual(select_sigma_z(groups[:1], kernel), FALLBACK_BANDWIDTH)


if __name__ == "__main__":
    unittest.main()
