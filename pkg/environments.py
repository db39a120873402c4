"""
Bandit environments and dataset ingestion.

Two environments:
- SyntheticNewsEnvironment: users drawn from an ellipse, articles at fixed
  angles, arm contexts are the user context rotated by the article angle
- MulticlassEnvironment: a classification test split streamed as a bandit
  (each class is an arm, reward 1 for the true class)

Environments emit plain per-arm context vectors; policies attach their own
arm descriptors. Expected rewards are exposed to the harness for regret only.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from errors import (
    ConfigurationError,
    DatasetParseError,
    DatasetValidationError,
    DomainError,
    EnvironmentExhaustedError,
)
from kernel_core import AugmentedContext, as_context, augment
from models import DatasetFormat, SimilarityMode, SyntheticNewsConfig

logger = logging.getLogger(__name__)


# (n_classes, n_features) for every dataset the harness knows by name
DATASET_SHAPES: Dict[str, Tuple[int, int]] = {
    "digits": (10, 64),
    "letter": (26, 16),
    "mnist": (10, 780),
    "pendigits": (10, 16),
    "segment": (7, 19),
    "usps": (10, 256),
    "mini-digits": (3, 8),
}


@dataclass(frozen=True, eq=False)
class RoundObservation:
    """
    One round as the harness sees it.

    ``contexts[a - 1]`` is arm a's context. ``expected_rewards`` is hidden
    from policies; ``realized_rewards`` holds what pulling each arm pays.
    """

    contexts: Tuple[np.ndarray, ...]
    expected_rewards: np.ndarray
    realized_rewards: np.ndarray

    def __post_init__(self):
        contexts = tuple(as_context(x) for x in self.contexts)
        expected = np.array(self.expected_rewards, dtype=float)
        realized = np.array(self.realized_rewards, dtype=float)
        if not (len(contexts) == expected.size == realized.size):
            raise DomainError("round needs exactly one context and reward per arm")
        if np.any(expected < 0.0) or np.any(expected > 1.0):
            raise DomainError(f"expected rewards must lie in [0, 1], got {expected}")
        expected.setflags(write=False)
        realized.setflags(write=False)
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "expected_rewards", expected)
        object.__setattr__(self, "realized_rewards", realized)

    @property
    def n_arms(self) -> int:
        return len(self.contexts)

    @property
    def best_expected(self) -> float:
        return float(np.max(self.expected_rewards))

    def reward(self, arm: int) -> float:
        if not 1 <= arm <= self.n_arms:
            raise IndexError(f"arm {arm} outside [1..{self.n_arms}]")
        return float(self.realized_rewards[arm - 1])

    def gap(self, arm: int) -> float:
        """Expected-reward shortfall of ``arm`` against the round's best arm."""
        if not 1 <= arm <= self.n_arms:
            raise IndexError(f"arm {arm} outside [1..{self.n_arms}]")
        return self.best_expected - float(self.expected_rewards[arm - 1])

    def candidates(self, mode: SimilarityMode = "known") -> List[AugmentedContext]:
        return augment(self.contexts, mode)


# -------- Synthetic news recommendation --------

def arm_angles(config: SyntheticNewsConfig) -> np.ndarray:
    """Article angles theta_a; evenly spaced on [0, pi/2] unless configured."""
    if config.angles is not None:
        return np.array(config.angles, dtype=float)
    return np.linspace(0.0, math.pi / 2.0, config.n_arms)


def rotate(x: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]]) @ x


def synthetic_reward(user_minor: float, arm: int, n_arms: int) -> float:
    """r_a = 1 - (x_u[minor] - a/N + 0.5)^2."""
    return 1.0 - (user_minor - arm / n_arms + 0.5) ** 2


def synth_round(config: SyntheticNewsConfig, rng: np.random.Generator) -> RoundObservation:
    """Draw one user from the ellipse boundary and build every arm's context."""
    phi = rng.uniform(0.0, 2.0 * math.pi)
    user = np.array([config.minor_axis * math.sin(phi), config.major_axis * math.cos(phi)])
    angles = arm_angles(config)

    contexts = tuple(rotate(user, theta) for theta in angles)
    expected = np.array([synthetic_reward(user[0], a, config.n_arms) for a in range(1, config.n_arms + 1)])
    realized = expected
    if config.noise_std > 0:
        realized = expected + rng.normal(0.0, config.noise_std, size=config.n_arms)

    return RoundObservation(contexts, expected, realized)


class SyntheticNewsEnvironment:
    """Endless stream of synthetic news rounds."""

    kind = "synthetic-news"

    def __init__(self, config: Optional[SyntheticNewsConfig] = None):
        self.config = config or SyntheticNewsConfig()
        self.n_arms = self.config.n_arms
        self._rng: Optional[np.random.Generator] = None

    def arm_features(self) -> np.ndarray:
        """Per-arm descriptors for a known task kernel: the article angles."""
        return arm_angles(self.config)[:, None]

    def reset(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def next_round(self) -> RoundObservation:
        if self._rng is None:
            raise RuntimeError("environment used before reset()")
        return synth_round(self.config, self._rng)

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Row-stacked arm contexts from ``n`` fresh rounds (for bandwidth selection)."""
        rows = [x for _ in range(n) for x in synth_round(self.config, rng).contexts]
        return np.vstack(rows)


# -------- Multiclass datasets --------

@dataclass(frozen=True, eq=False)
class MulticlassDataset:
    """
    Features with labels remapped to 1..N.

    ``classes[k]`` is the original label now called k + 1. The validation and
    test index sets partition the rows; an unsplit dataset uses every row
    for testing.
    """

    name: str
    features: np.ndarray
    labels: np.ndarray
    classes: np.ndarray
    validation_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    test_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=int)
        if features.ndim != 2 or features.shape[0] != labels.size or labels.size == 0:
            raise DatasetValidationError("features must be an n x d matrix matching the labels")
        if not np.all(np.isfinite(features)):
            raise DatasetValidationError(f"{self.name}: features contain non-finite values")
        n_classes = len(self.classes)
        if set(np.unique(labels)) != set(range(1, n_classes + 1)):
            raise DatasetValidationError(f"{self.name}: labels must cover 1..{n_classes}")

        validation = np.asarray(self.validation_indices, dtype=int)
        test = np.arange(labels.size) if self.test_indices is None else np.asarray(self.test_indices, dtype=int)
        combined = np.concatenate([validation, test])
        if combined.size != labels.size or not np.array_equal(np.sort(combined), np.arange(labels.size)):
            raise DatasetValidationError(f"{self.name}: validation/test split must be disjoint and exhaustive")

        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "validation_indices", validation)
        object.__setattr__(self, "test_indices", test)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def validation_features(self) -> np.ndarray:
        return self.features[self.validation_indices]

    @property
    def validation_labels(self) -> np.ndarray:
        return self.labels[self.validation_indices]


def multiclass_round(dataset: MulticlassDataset, index: int) -> RoundObservation:
    """Round built from the ``index``-th test example: shared context, one-hot rewards."""
    if not 0 <= index < dataset.test_indices.size:
        raise IndexError(f"test index {index} outside [0..{dataset.test_indices.size - 1}]")
    row = dataset.test_indices[index]
    x = dataset.features[row]
    rewards = np.zeros(dataset.n_classes)
    rewards[dataset.labels[row] - 1] = 1.0
    return RoundObservation(tuple(x for _ in range(dataset.n_classes)), rewards, rewards)


class MulticlassEnvironment:
    """Streams the test split in a per-run random order."""

    kind = "multiclass"

    def __init__(self, dataset: MulticlassDataset):
        self.dataset = dataset
        self.n_arms = dataset.n_classes
        self._order: Optional[np.ndarray] = None
        self._position = 0

    def reset(self, rng: np.random.Generator) -> None:
        self._order = rng.permutation(self.dataset.test_indices.size)
        self._position = 0

    def next_round(self) -> RoundObservation:
        if self._order is None:
            raise RuntimeError("environment used before reset()")
        if self._position >= self._order.size:
            raise EnvironmentExhaustedError(
                f"{self.dataset.name}: test split has only {self._order.size} rounds"
            )
        observation = multiclass_round(self.dataset, int(self._order[self._position]))
        self._position += 1
        return observation


# -------- Parsing --------

def parse_libsvm_line(line: str, line_number: Optional[int] = None) -> Tuple[float, Dict[int, float]]:
    """
    Parse ``<label> <index>:<value> ...`` with 1-based feature indices.

    Returns the label and a {index: value} mapping.
    """
    tokens = line.split()
    if not tokens:
        raise DatasetParseError("empty libsvm line", line_number)
    try:
        label = float(tokens[0])
    except ValueError:
        raise DatasetParseError(f"invalid label '{tokens[0]}'", line_number) from None

    features: Dict[int, float] = {}
    for token in tokens[1:]:
        index_str, sep, value_str = token.partition(":")
        if not sep:
            raise DatasetParseError(f"expected index:value, got '{token}'", line_number)
        try:
            index = int(index_str)
            value = float(value_str)
        except ValueError:
            raise DatasetParseError(f"invalid feature '{token}'", line_number) from None
        if index < 1:
            raise DatasetParseError(f"feature indices are 1-based, got {index}", line_number)
        if not math.isfinite(value):
            raise DatasetParseError(f"non-finite feature value '{value_str}'", line_number)
        features[index] = value
    return label, features


def _read_libsvm(path: Path, n_features: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    labels: List[float] = []
    rows: List[Dict[int, float]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            label, features = parse_libsvm_line(stripped, line_number)
            labels.append(label)
            rows.append(features)

    if not rows:
        raise DatasetParseError(f"{path}: no examples found")

    width = max((max(r) for r in rows if r), default=0)
    if n_features is not None:
        if width > n_features:
            raise DatasetValidationError(f"{path}: feature index {width} exceeds the expected {n_features}")
        width = n_features
    if width == 0:
        raise DatasetParseError(f"{path}: examples have no features")

    dense = np.zeros((len(rows), width))
    for i, features in enumerate(rows):
        for index, value in features.items():
            dense[i, index - 1] = value
    return dense, np.array(labels)


def _read_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DatasetParseError(f"{path}: empty file") from None
    except pd.errors.ParserError as exc:
        raise DatasetParseError(f"{path}: {exc}") from None

    columns = list(frame.columns)
    expected = ["label"] + [f"f{i}" for i in range(1, len(columns))]
    if len(columns) < 2 or columns != expected:
        raise DatasetParseError(f"header must be label,f1,...,fd; got {','.join(columns)}", 1)
    if frame.empty:
        raise DatasetParseError(f"{path}: no examples found")

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DatasetParseError("non-numeric or missing value", row + 2)

    values = numeric.to_numpy(dtype=float)
    return values[:, 1:], values[:, 0]


def load_dataset(
    path: Union[str, Path],
    format: DatasetFormat,
    name: Optional[str] = None,
    shape: Optional[Tuple[int, int]] = None,
) -> MulticlassDataset:
    """
    Load a multiclass dataset and validate it against its known shape.

    ``shape`` is (n_classes, n_features); it defaults to DATASET_SHAPES[name]
    when the name is registered. Labels are remapped to 1..N in sorted order.
    """
    path = Path(path)
    name = name or path.stem
    if shape is None:
        shape = DATASET_SHAPES.get(name)
    if not path.exists():
        raise DatasetParseError(f"{path}: file not found")

    if format == "libsvm-sparse":
        features, raw_labels = _read_libsvm(path, shape[1] if shape else None)
    elif format == "csv-dense":
        features, raw_labels = _read_csv(path)
    else:
        raise DatasetParseError(f"unknown dataset format '{format}'")

    classes, labels = np.unique(raw_labels, return_inverse=True)
    labels = labels.reshape(-1) + 1

    if shape is not None:
        n_classes, n_features = shape
        if len(classes) != n_classes or features.shape[1] != n_features:
            raise DatasetValidationError(
                f"{name}: expected {n_classes} classes and {n_features} features, "
                f"got {len(classes)} and {features.shape[1]}"
            )

    logger.info(
        "📦 Loaded dataset",
        extra={"dataset": name, "rows": features.shape[0], "classes": len(classes), "features": features.shape[1]}
    )
    return MulticlassDataset(name=name, features=features, labels=labels, classes=classes)


def _missing_classes(labels: np.ndarray, indices: np.ndarray, n_classes: int) -> List[int]:
    present = set(labels[indices].tolist())
    return [c for c in range(1, n_classes + 1) if c not in present]


def _repair_split(labels: np.ndarray, validation: np.ndarray, test: np.ndarray, n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Swap single examples so every class with at least two rows appears on
    both sides. Part sizes are unchanged.
    """
    validation, test = list(validation), list(test)
    for into, out_of in ((validation, test), (test, validation)):
        for cls in _missing_classes(labels, np.array(into, dtype=int), n_classes):
            donors = [i for i in out_of if labels[i] == cls]
            if len(donors) < 2:
                continue
            counts = np.bincount(labels[np.array(into, dtype=int)], minlength=n_classes + 1)
            spare = [i for i in into if counts[labels[i]] >= 2]
            if not spare:
                continue
            give, take = donors[0], spare[0]
            out_of.remove(give)
            into.remove(take)
            into.append(give)
            out_of.append(take)
    return np.sort(np.array(validation, dtype=int)), np.sort(np.array(test, dtype=int))


def split_dataset(dataset: MulticlassDataset, validation_fraction: float, seed: int) -> MulticlassDataset:
    """
    Seeded validation/test split, stratified by class when feasible.

    The validation part holds floor(fraction * n) rows.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise DomainError(f"validation fraction must lie in (0, 1), got {validation_fraction}")

    indices = np.arange(dataset.labels.size)
    n_validation = int(math.floor(validation_fraction * indices.size))
    if n_validation < 1 or n_validation >= indices.size:
        raise DomainError(f"fraction {validation_fraction} leaves an empty part for n={indices.size}")

    try:
        validation, test = train_test_split(
            indices, train_size=n_validation, stratify=dataset.labels, random_state=seed
        )
    except ValueError as exc:
        logger.warning("Stratified split infeasible; using a plain split", extra={"reason": str(exc)})
        validation, test = train_test_split(indices, train_size=n_validation, random_state=seed)

    validation, test = _repair_split(dataset.labels, np.sort(validation), np.sort(test), dataset.n_classes)
    return dataclasses.replace(dataset, validation_indices=validation, test_indices=test)


def build_environment(kind: str, synthetic: Optional[SyntheticNewsConfig] = None,
                      dataset: Optional[MulticlassDataset] = None):
    """Environment factory used by the experiment runner."""
    if kind == "synthetic-news":
        return SyntheticNewsEnvironment(synthetic)
    if kind == "multiclass":
        if dataset is None:
            raise ConfigurationError("multiclass environment needs a dataset")
        return MulticlassEnvironment(dataset)
    raise ConfigurationError(f"unknown environment kind '{kind}'")

