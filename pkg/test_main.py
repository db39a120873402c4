"""
Tests for the command-line entry point and its exit codes.
"""

import io
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path
from unittest.mock import patch

from main import EXIT_CONFIG, EXIT_DATASET, EXIT_OK, main


class TestMain(unittest.TestCase):
    """Exit codes for each subcommand."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.env = patch.dict(os.environ, {"KMTL_DATA_DIR": str(self.dir / "data")})
        self.env.start()

    def tearDown(self):
        self.env.stop()
        self.tmp.cleanup()

    def test_info(self):
        """Test that info lists policies and datasets."""
        buffer = io.StringIO()
        with redirect_stdout(buffer):
            self.assertEqual(main(["info"]), EXIT_OK)
        output = buffer.getvalue()
        self.assertIn("kmtl-ucb-est", output)
        self.assertIn("mini-digits", output)
        self.assertIn("available", output)

    def test_run_synthetic(self):
        """Test a short synthetic run from the command line."""
        out = self.dir / "out"
        code = main(["run", "--env", "synthetic-news", "--policy", "oracle,kmtl-ucb",
                     "--T", "10", "--runs", "1", "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((out / "regret.csv").exists())
        self.assertTrue((out / "summary.csv").exists())

    def test_configuration_errors(self):
        """Test that bad flags exit with code 2."""
        for argv in (["run", "--T", "0"], ["run", "--policy", "linucb"], ["run", "--env", "cifar"],
                     ["run", "--config", str(self.dir / "missing.json")], ["bogus"]):
            with self.subTest(argv=argv):
                with redirect_stdout(io.StringIO()):
                    self.assertEqual(main(argv), EXIT_CONFIG)

    def test_missing_dataset(self):
        """Test that a missing dataset exits with code 3."""
        code = main(["run", "--env", "multiclass:segment", "--policy", "oracle", "--T", "5",
                     "--runs", "1", "--out", str(self.dir / "seg")])
        self.assertEqual(code, EXIT_DATASET)

    def test_diagnose(self):
        """Test that diagnose writes diagnostics.csv and exits 0."""
        out = self.dir / "diag"
        self.assertEqual(main(["diagnose", "--out", str(out)]), EXIT_OK)
        self.assertTrue((out / "diagnostics.csv").exists())


if __name__ == "__main__":
    unittest.main()
