"""
Tests for dataset fetching that need no network access.
"""

import asyncio
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from data_fetcher import (
    CHECKSUMS_FILE,
    DatasetFetcher,
    export_sklearn,
    recorded_checksums,
    sha256_of,
    verify_checksum,
)
from errors import DatasetValidationError
from experiment_runner import load_manifest
from models import DatasetManifestEntry


class TestDatasetFetcher(unittest.TestCase):
    """Local fetch paths: present files, sklearn exports, checksums."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _entry(self, name, path, **extra):
        return DatasetManifestEntry(name=name, format="csv-dense", n_classes=10, n_features=64,
                                    path=str(self.dir / path), **extra)

    def test_export_digits(self):
        """Test the CSV export of scikit-learn's digits."""
        entry = self._entry("digits", "digits.csv", source="sklearn:digits")
        export_sklearn(entry, Path(entry.path))
        frame = pd.read_csv(entry.path)
        self.assertEqual(frame.shape, (1797, 65))
        self.assertEqual(list(frame.columns[:3]), ["label", "f1", "f2"])
        self.assertEqual(sorted(frame["label"].unique().tolist()), list(range(10)))

    def test_checksum(self):
        """Test verification against a pinned sha256."""
        path = self.dir / "file.txt"
        path.write_bytes(b"abc")
        digest = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        self.assertEqual(sha256_of(path), digest)
        verify_checksum(self._entry("x", "file.txt", sha256=digest), path)
        with self.assertRaises(DatasetValidationError):
            verify_checksum(self._entry("x", "file.txt", sha256="0" * 64), path)

    def test_fetch_statuses(self):
        """Test the status of each local fetch path."""
        present = self._entry("present", "present.csv")
        Path(present.path).write_text("label,f1\n0,1\n", encoding="utf-8")
        entries = {
            "present": present,
            "digits": self._entry("digits", "digits.csv", source="sklearn:digits"),
            "orphan": self._entry("orphan", "orphan.csv"),
        }
        results = asyncio.run(DatasetFetcher(entries).fetch())
        statuses = {r.name: r.status for r in results}
        self.assertEqual(statuses, {"digits": "exported", "orphan": "failed", "present": "present"})
        self.assertFalse(next(r for r in results if r.name == "orphan").ok)

    def test_first_fetch_records_checksum(self):
        """Test that a first fetch records a checksum and later fetches enforce it."""
        entry = self._entry("digits", "digits.csv", source="sklearn:digits")
        results = asyncio.run(DatasetFetcher({"digits": entry}).fetch())
        self.assertEqual(results[0].status, "exported")
        recorded = recorded_checksums(self.dir)
        self.assertEqual(recorded, {"digits": sha256_of(Path(entry.path))})

        with open(entry.path, "a", encoding="utf-8") as f:
            f.write("0" + ",0" * 64 + "\n")
        results = asyncio.run(DatasetFetcher({"digits": entry}).fetch())
        self.assertEqual(results[0].status, "failed")
        self.assertIn("sha256 mismatch", results[0].detail)

    def test_verify_without_record_leaves_no_ledger(self):
        """Test that plain verification never writes a checksum file."""
        path = self.dir / "file.txt"
        path.write_bytes(b"abc")
        verify_checksum(self._entry("x", "file.txt"), path)
        self.assertFalse((self.dir / CHECKSUMS_FILE).exists())
        verify_checksum(self._entry("x", "file.txt"), path, record=True)
        self.assertEqual(recorded_checksums(self.dir)["x"], sha256_of(path))
        path.write_bytes(b"abd")
        with self.assertRaises(DatasetValidationError):
            verify_checksum(self._entry("x", "file.txt"), path)

    def test_unknown_name(self):
        """Test that unknown dataset names are rejected."""
        with self.assertRaises(DatasetValidationError):
            asyncio.run(DatasetFetcher({}).fetch(["nope"]))


class TestBundledChecksums(unittest.TestCase):
    """The bundled fixture is pinned in the manifest."""

    def test_fixture_matches_pin(self):
        """Test that the bundled fixture matches its pinned sha256."""
        entry = load_manifest()["mini-digits"]
        self.assertIsNotNone(entry.sha256)
        self.assertEqual(sha256_of(Path(entry.path)), entry.sha256)


if __name__ == "__main__":
    unittest.main()
