"""
Dataset download per the manifest.

Handles:
- libsvm files served over HTTP (optionally bz2-compressed)
- scikit-learn's bundled digits, exported as dense CSV
- sha256 verification against the manifest pin, or against the digest
  recorded in checksums.json on first fetch
"""

import asyncio
import bz2
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import aiohttp
import numpy as np
import pandas as pd
from sklearn.datasets import load_digits

from errors import DatasetValidationError
from models import DatasetManifestEntry

logger = logging.getLogger(__name__)

DOWNLOAD_TIMEOUT_SECONDS = 300
SKLEARN_SOURCES = {"sklearn:digits": load_digits}
CHECKSUMS_FILE = "checksums.json"


@dataclass(frozen=True)
class FetchResult:
    name: str
    path: Path
    status: str  # "downloaded", "exported", "present", "bundled", "failed"
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "failed"


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def recorded_checksums(folder: Path) -> Dict[str, str]:
    """Digests recorded by earlier fetches into ``folder``, keyed by dataset name."""
    ledger = folder / CHECKSUMS_FILE
    if not ledger.exists():
        return {}
    with open(ledger, "r", encoding="utf-8") as f:
        return json.load(f)


def record_checksum(entry: DatasetManifestEntry, path: Path, digest: str) -> None:
    recorded = recorded_checksums(path.parent)
    recorded[entry.name] = digest
    with open(path.parent / CHECKSUMS_FILE, "w", encoding="utf-8", newline="\n") as f:
        json.dump(recorded, f, indent=2, sort_keys=True)
        f.write("\n")


def expected_checksum(entry: DatasetManifestEntry, path: Path) -> Optional[str]:
    """The manifest's pinned digest, else the one recorded on first fetch."""
    return entry.sha256 or recorded_checksums(path.parent).get(entry.name)


def verify_checksum(entry: DatasetManifestEntry, path: Path, record: bool = False) -> str:
    """
    Check ``path`` against the expected sha256 and return its digest.

    With nothing pinned or recorded yet, ``record=True`` stores the digest
    next to the file so later fetches and loads are verified against it.
    """
    actual = sha256_of(path)
    expected = expected_checksum(entry, path)
    if expected is None:
        if record:
            record_checksum(entry, path, actual)
            logger.info("🔏 Recorded checksum on first fetch", extra={"dataset": entry.name, "sha256": actual})
        else:
            logger.warning("No checksum pinned or recorded; skipping verification", extra={"dataset": entry.name})
        return actual
    if actual != expected:
        raise DatasetValidationError(f"{entry.name}: sha256 mismatch (expected {expected}, got {actual})")
    return actual


def export_sklearn(entry: DatasetManifestEntry, target: Path) -> None:
    """Write a scikit-learn dataset as label,f1..fd CSV."""
    bunch = SKLEARN_SOURCES[entry.source]()
    features = np.asarray(bunch.data, dtype=float)
    frame = pd.DataFrame(features, columns=[f"f{i}" for i in range(1, features.shape[1] + 1)])
    frame.insert(0, "label", np.asarray(bunch.target, dtype=int))
    target.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(target, index=False, lineterminator="\n", float_format="%.10g")


async def download(session: aiohttp.ClientSession, entry: DatasetManifestEntry, target: Path) -> None:
    async with session.get(entry.url) as response:
        if response.status != 200:
            raise DatasetValidationError(f"{entry.name}: HTTP {response.status} from {entry.url}")
        payload = await response.read()

    if entry.compression == "bz2":
        payload = bz2.decompress(payload)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(payload)


class DatasetFetcher:
    """Fetches manifest entries into their target paths."""

    def __init__(self, entries: Dict[str, DatasetManifestEntry], force: bool = False):
        self.entries = entries
        self.force = force
        self.logger = logging.getLogger(self.__class__.__name__)

    async def fetch(self, names: Optional[Iterable[str]] = None) -> List[FetchResult]:
        selected = list(names) if names else sorted(self.entries)
        unknown = [n for n in selected if n not in self.entries]
        if unknown:
            raise DatasetValidationError(f"unknown datasets: {', '.join(unknown)}")

        timeout = aiohttp.ClientTimeout(total=DOWNLOAD_TIMEOUT_SECONDS)
        async with aiohttp.ClientSession(timeout=timeout) as session:
            results = await asyncio.gather(*(self._fetch_one(session, self.entries[n]) for n in selected))
        return list(results)

    async def _fetch_one(self, session: aiohttp.ClientSession, entry: DatasetManifestEntry) -> FetchResult:
        target = Path(entry.path)
        try:
            if target.exists() and not self.force:
                verify_checksum(entry, target)
                return FetchResult(entry.name, target, "present")

            if entry.source in SKLEARN_SOURCES:
                export_sklearn(entry, target)
                status = "exported"
            elif entry.url:
                await download(session, entry, target)
                status = "downloaded"
            elif target.exists():
                verify_checksum(entry, target)
                return FetchResult(entry.name, target, "bundled")
            else:
                return FetchResult(entry.name, target, "failed", "no url or source in manifest")
            verify_checksum(entry, target, record=True)
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError, DatasetValidationError) as e:
            self.logger.error("Error fetching dataset %s: %s", entry.name, e)
            return FetchResult(entry.name, target, "failed", str(e))

        self.logger.info("📥 Dataset ready", extra={"dataset": entry.name, "path": str(target), "status": status})
        return FetchResult(entry.name, target, status)
