"""
Shared Pydantic models for the KMTL bandit harness.

Configuration objects and report records live here so every module (and
the JSON config files) validates against the same definitions. Numerical
state (histories, Gram matrices, fitted regressors) uses plain dataclasses
in the modules that own it.
"""

import math
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Type aliases for clarity
KernelFamily = Literal["gaussian", "linear"]
KernelRole = Literal["context", "embedding", "task"]
SimilarityMode = Literal["independent", "pooled", "known", "parametric", "estimated"]
BandwidthStrategy = Literal["median", "grid-cv"]
DatasetFormat = Literal["libsvm-sparse", "csv-dense"]
EnvironmentKind = Literal["synthetic-news", "multiclass"]
Bandwidth = Union[float, Literal["auto"]]


class KernelSpec(BaseModel):
    """A kernel family plus the role it plays (k_X, k'_X or k_Z)."""

    model_config = ConfigDict(frozen=True)

    family: KernelFamily = "gaussian"
    bandwidth: Optional[float] = 1.0
    role: KernelRole = "context"

    @model_validator(mode="after")
    def _check_bandwidth(self) -> "KernelSpec":
        if self.family == "gaussian":
            if self.bandwidth is None or not self.bandwidth > 0 or not math.isfinite(self.bandwidth):
                raise ValueError(f"gaussian bandwidth must be finite and > 0, got {self.bandwidth}")
        return self

    @classmethod
    def gaussian(cls, bandwidth: float, role: KernelRole = "context") -> "KernelSpec":
        return cls(family="gaussian", bandwidth=bandwidth, role=role)

    @classmethod
    def linear(cls, role: KernelRole = "context") -> "KernelSpec":
        return cls(family="linear", bandwidth=None, role=role)


class PolicyConfig(BaseModel):
    """Hyperparameters shared by the KMTL-UCB family of policies."""

    model_config = ConfigDict(frozen=True)

    similarity: SimilarityMode = "known"
    # None means the theoretical multiplier alpha + c*sqrt(lam)
    beta: Optional[float] = Field(default=None, ge=0)
    lam: float = Field(default=1.0, gt=0)
    delta: float = Field(default=0.05, gt=0, lt=1)
    c: float = Field(default=1.0, ge=0)
    horizon: int = Field(default=1000, ge=1)
    estimate_period: int = Field(default=1, ge=1)
    mu: float = Field(default=0.5, ge=0, le=1)
    weighted: bool = True
    incremental: bool = False
    context_kernel: KernelSpec = KernelSpec()
    embedding_kernel: KernelSpec = KernelSpec(role="embedding")
    sigma_z: float = Field(default=1.0, gt=0)


class SyntheticNewsConfig(BaseModel):
    """Rotated-ellipse news recommendation environment."""

    model_config = ConfigDict(frozen=True)

    n_arms: int = Field(default=5, ge=2)
    major_axis: float = Field(default=1.0, gt=0)
    minor_axis: float = Field(default=0.5, gt=0)
    # None -> evenly spaced on [0, pi/2]
    angles: Optional[List[float]] = None
    noise_std: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check_angles(self) -> "SyntheticNewsConfig":
        if self.angles is not None:
            if len(self.angles) != self.n_arms:
                raise ValueError(f"expected {self.n_arms} angles, got {len(self.angles)}")
            if list(self.angles) != sorted(self.angles):
                raise ValueError("arm angles must be sorted")
            if any(a < 0 or a > math.pi / 2 for a in self.angles):
                raise ValueError("arm angles must lie in [0, pi/2]")
        return self


class EnvironmentSpec(BaseModel):
    """Which environment to run and where its data comes from."""

    kind: EnvironmentKind = "synthetic-news"
    synthetic: SyntheticNewsConfig = Field(default_factory=SyntheticNewsConfig)
    dataset: Optional[str] = None
    dataset_path: Optional[str] = None
    dataset_format: DatasetFormat = "csv-dense"
    validation_fraction: float = Field(default=0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_dataset(self) -> "EnvironmentSpec":
        if self.kind == "multiclass" and not (self.dataset or self.dataset_path):
            raise ValueError("multiclass environment needs a dataset name or path")
        return self


class ExperimentConfig(BaseModel):
    """A complete, reproducible experiment description."""

    environment: EnvironmentSpec = Field(default_factory=EnvironmentSpec)
    policies: List[str] = Field(
        default_factory=lambda: ["kernel-ucb-pool", "kernel-ucb-ind", "kmtl-ucb", "kmtl-ucb-est"]
    )
    horizon: int = Field(default=1000, ge=1)
    runs: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    lam: float = Field(default=1.0, gt=0)
    beta: Optional[float] = Field(default=None, ge=0)
    delta: float = Field(default=0.05, gt=0, lt=1)
    c: float = Field(default=1.0, ge=0)
    weighted: bool = True
    incremental: bool = False
    mu: float = Field(default=0.5, ge=0, le=1)
    context_bandwidth: Bandwidth = "auto"
    embedding_bandwidth: Bandwidth = "auto"
    task_bandwidth: Bandwidth = "auto"
    bandwidth_strategy: BandwidthStrategy = "median"
    estimate_period: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)
    output_dir: str = "results"
    diagnostics: bool = False

    @field_validator("policies")
    @classmethod
    def _non_empty(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one policy is required")
        return value

    @field_validator("context_bandwidth", "embedding_bandwidth", "task_bandwidth")
    @classmethod
    def _positive_bandwidth(cls, value: Bandwidth) -> Bandwidth:
        if value != "auto" and not value > 0:
            raise ValueError(f"bandwidth must be 'auto' or > 0, got {value}")
        return value


class DatasetManifestEntry(BaseModel):
    """One dataset in the fetch manifest."""

    name: str
    format: DatasetFormat
    n_classes: int = Field(ge=2)
    n_features: int = Field(ge=1)
    path: str
    url: Optional[str] = None
    source: Optional[str] = None
    sha256: Optional[str] = None
    compression: Optional[Literal["bz2"]] = None


class DiagnosticRecord(BaseModel):
    """One assertion of the diagnostics suite: ``lhs <= rhs`` style checks."""

    name: str
    lhs: float
    rhs: float
    passed: bool
    detail: str = ""
