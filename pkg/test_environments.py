"""
Unit tests for bandit environments and dataset loading.
"""

import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from errors import ConfigurationError, DatasetParseError, DatasetValidationError, DomainError, EnvironmentExhaustedError
from environments import (
    MulticlassDataset,
    MulticlassEnvironment,
    RoundObservation,
    SyntheticNewsEnvironment,
    arm_angles,
    build_environment,
    load_dataset,
    multiclass_round,
    parse_libsvm_line,
    rotate,
    split_dataset,
    synth_round,
    synthetic_reward,
)
from models import SyntheticNewsConfig


def _dataset(labels, dim=2, seed=0):
    labels = np.asarray(labels, dtype=int)
    features = np.random.default_rng(seed).normal(size=(labels.size, dim))
    return MulticlassDataset("toy", features, labels, classes=np.arange(labels.max()))


class TestSyntheticNews(unittest.TestCase):
    """Test the rotated-ellipse news environment."""

    def setUp(self):
        self.config = SyntheticNewsConfig(n_arms=5)

    def test_reward_examples(self):
        """Test the synthetic reward at hand-computed points."""
        self.assertEqual(synthetic_reward(0.0, 1, 2), 1.0)
        self.assertEqual(synthetic_reward(-0.5, 2, 2), 0.0)

    def test_rotation(self):
        """Test that rotation preserves the norm."""
        x = np.array([0.3, -0.8])
        np.testing.assert_allclose(rotate(x, 0.0), x)
        np.testing.assert_allclose(rotate(np.array([1.0, 0.0]), math.pi / 2), [0.0, 1.0], atol=1e-15)
        for theta in np.linspace(0, math.pi / 2, 7):
            with self.subTest(theta=theta):
                self.assertAlmostEqual(np.linalg.norm(rotate(x, theta)), np.linalg.norm(x), places=12)

    def test_default_angles(self):
        """Test that arm angles span [0, pi/2] evenly."""
        np.testing.assert_allclose(arm_angles(self.config), np.linspace(0, math.pi / 2, 5))

    def test_round_shape_and_rewards(self):
        """Test the shapes and rewards of one synthetic round."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            observation = synth_round(self.config, rng)
            self.assertEqual(observation.n_arms, 5)
            self.assertTrue(np.all(observation.expected_rewards >= 0))
            self.assertTrue(np.all(observation.expected_rewards <= 1))
            np.testing.assert_array_equal(observation.realized_rewards, observation.expected_rewards)
            norms = [np.linalg.norm(x) for x in observation.contexts]
            np.testing.assert_allclose(norms, norms[0])

    def test_seeded_stream_is_reproducible(self):
        """Test that equal seeds give equal rounds."""
        env = SyntheticNewsEnvironment(self.config)
        env.reset(np.random.default_rng([3, 0, 0]))
        first = [env.next_round().contexts[0] for _ in range(5)]
        env.reset(np.random.default_rng([3, 0, 0]))
        second = [env.next_round().contexts[0] for _ in range(5)]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_noise_changes_realized_only(self):
        """Test that noise leaves expected rewards alone."""
        rng = np.random.default_rng(1)
        observation = synth_round(SyntheticNewsConfig(n_arms=3, noise_std=0.1), rng)
        self.assertFalse(np.array_equal(observation.realized_rewards, observation.expected_rewards))
        self.assertEqual(observation.gap(int(np.argmax(observation.expected_rewards)) + 1), 0.0)

    def test_used_before_reset(self):
        """Test that drawing before reset fails."""
        with self.assertRaises(RuntimeError):
            SyntheticNewsEnvironment(self.config).next_round()

    def test_invalid_expected_reward(self):
        """Test that expected rewards outside [0, 1] are rejected."""
        with self.assertRaises(DomainError):
            RoundObservation((np.zeros(2), np.zeros(2)), [0.5, 1.5], [0.5, 1.5])


class TestMulticlass(unittest.TestCase):
    """Test the classification-as-bandit environment."""

    def test_one_hot_reward(self):
        """Test the one-hot reward of a multiclass round."""
        dataset = _dataset([1, 2, 3, 2])
        observation = multiclass_round(dataset, 1)
        np.testing.assert_array_equal(observation.expected_rewards, [0.0, 1.0, 0.0])
        self.assertEqual(observation.reward(2), 1.0)
        self.assertEqual(observation.reward(1), 0.0)
        self.assertEqual(observation.gap(3), 1.0)
        for x in observation.contexts:
            np.testing.assert_array_equal(x, dataset.features[1])

    def test_index_out_of_range(self):
        """Test that a row index past the data fails."""
        with self.assertRaises(IndexError):
            multiclass_round(_dataset([1, 2]), 2)

    def test_exhaustion(self):
        """Test that the stream ends after the test rows."""
        env = MulticlassEnvironment(_dataset([1, 2, 1]))
        env.reset(np.random.default_rng(0))
        for _ in range(3):
            env.next_round()
        with self.assertRaises(EnvironmentExhaustedError):
            env.next_round()

    def test_each_run_sees_every_row_once(self):
        """Test that a run permutes the test rows."""
        dataset = _dataset([1, 2, 3, 1, 2, 3])
        env = MulticlassEnvironment(dataset)
        env.reset(np.random.default_rng(7))
        seen = [env.next_round().contexts[0] for _ in range(6)]
        rows = sorted(tuple(x) for x in seen)
        self.assertEqual(rows, sorted(tuple(x) for x in dataset.features))

    def test_build_environment(self):
        """Test environment construction from names."""
        self.assertIsInstance(build_environment("synthetic-news"), SyntheticNewsEnvironment)
        self.assertIsInstance(build_environment("multiclass", dataset=_dataset([1, 2])), MulticlassEnvironment)
        with self.assertRaises(ConfigurationError):
            build_environment("multiclass")
        with self.assertRaises(ConfigurationError):
            build_environment("bandit-casino")


class TestParsing(unittest.TestCase):
    """Test libsvm and CSV ingestion."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, name, text):
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_libsvm_line(self):
        """Test parsing one libsvm line."""
        label, features = parse_libsvm_line("3 1:0.5 7:1.2")
        self.assertEqual(label, 3.0)
        self.assertEqual(features, {1: 0.5, 7: 1.2})

    def test_libsvm_line_errors(self):
        """Test that malformed libsvm lines are rejected."""
        for line in ("x 1:0.5", "1 0:0.5", "1 3-0.5", "1 2:abc"):
            with self.subTest(line=line):
                with self.assertRaises(DatasetParseError):
                    parse_libsvm_line(line, 4)

    def test_empty_files(self):
        """Test that empty files are rejected."""
        for name, fmt in (("empty.libsvm", "libsvm-sparse"), ("empty.csv", "csv-dense")):
            with self.subTest(format=fmt):
                with self.assertRaises(DatasetParseError):
                    load_dataset(self._write(name, ""), fmt)

    def test_segment_shape_accepted(self):
        """Test that a 7-class, 19-feature file matches its shape."""
        lines = [f"{label} 1:0.{label} 19:1.0" for label in range(1, 8)] * 2
        dataset = load_dataset(self._write("segment.scale", "\n".join(lines) + "\n"), "libsvm-sparse", name="segment")
        self.assertEqual(dataset.n_classes, 7)
        self.assertEqual(dataset.n_features, 19)
        self.assertEqual(dataset.features.shape, (14, 19))
        np.testing.assert_array_equal(dataset.classes, np.arange(1, 8, dtype=float))

    def test_shape_mismatch_rejected(self):
        """Test that too few classes are rejected."""
        lines = [f"{label} 1:0.5" for label in range(1, 7)]
        with self.assertRaises(DatasetValidationError):
            load_dataset(self._write("segment.scale", "\n".join(lines)), "libsvm-sparse", name="segment")

    def test_feature_index_beyond_shape(self):
        """Test that a feature index past d is rejected."""
        with self.assertRaises(DatasetValidationError):
            load_dataset(self._write("x.libsvm", "1 20:1.0\n2 1:1.0\n"), "libsvm-sparse", shape=(2, 19))

    def test_csv_bad_row_line_number(self):
        """Test that CSV errors carry the line number."""
        path = self._write("bad.csv", "label,f1,f2\n0,1.0,2.0\n1,x,2.0\n")
        with self.assertRaises(DatasetParseError) as ctx:
            load_dataset(path, "csv-dense")
        self.assertEqual(ctx.exception.line_number, 3)

    def test_csv_bad_header(self):
        """Test that a CSV without a label column is rejected."""
        with self.assertRaises(DatasetParseError) as ctx:
            load_dataset(self._write("bad.csv", "y,a,b\n0,1,2\n"), "csv-dense")
        self.assertEqual(ctx.exception.line_number, 1)

    def test_labels_remapped(self):
        """Test that labels are remapped to 1..N in sorted order."""
        dataset = load_dataset(self._write("ok.csv", "label,f1\n7,0.1\n3,0.2\n7,0.3\n"), "csv-dense")
        np.testing.assert_array_equal(dataset.labels, [2, 1, 2])
        np.testing.assert_array_equal(dataset.classes, [3.0, 7.0])

    def test_missing_file(self):
        """Test that a missing file raises DatasetParseError."""
        with self.assertRaises(DatasetParseError):
            load_dataset(self.dir / "nope.csv", "csv-dense")


class TestSplit(unittest.TestCase):
    """Test the seeded validation/test split."""

    def setUp(self):
        self.dataset = _dataset(np.repeat([1, 2, 3, 4], 25))

    def test_sizes_and_partition(self):
        """Test split sizes and that the split partitions the rows."""
        split = split_dataset(self.dataset, 0.2, seed=0)
        self.assertEqual(split.validation_indices.size, 20)
        self.assertEqual(split.test_indices.size, 80)
        combined = np.sort(np.concatenate([split.validation_indices, split.test_indices]))
        np.testing.assert_array_equal(combined, np.arange(100))

    def test_deterministic(self):
        """Test that equal seeds give equal splits."""
        a = split_dataset(self.dataset, 0.2, seed=5)
        b = split_dataset(self.dataset, 0.2, seed=5)
        np.testing.assert_array_equal(a.validation_indices, b.validation_indices)
        np.testing.assert_array_equal(a.test_indices, b.test_indices)

    def test_stratified(self):
        """Test that each class appears in the validation split."""
        split = split_dataset(self.dataset, 0.2, seed=1)
        counts = np.bincount(split.validation_labels, minlength=5)[1:]
        np.testing.assert_array_equal(counts, [5, 5, 5, 5])

    def test_invalid_fraction(self):
        """Test that fractions leaving an empty side are rejected."""
        for fraction in (0.0, 1.0, 0.001):
            with self.subTest(fraction=fraction):
                with self.assertRaises(DomainError):
                    split_dataset(self.dataset, fraction, seed=0)


if __name__ == "__main__":
    unittest.main()
