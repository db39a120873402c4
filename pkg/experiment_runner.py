"""
Seeded multi-run experiment orchestration.

run_experiment() resolves bandwidths on validation data, runs every
(policy, run) pair in a process pool, and writes:
- regret.csv: policy,run,t,cum_regret
- summary.csv: policy,t,mean,std,ci_lo,ci_hi
- summary_metadata.json: the resolved hyperparameters behind summary.csv
- diagnostics.csv: bound checks per run (only when diagnostics are enabled)

Run r of every policy uses RNG streams derived from (seed, r), so results
do not depend on the number of runs, the worker count or completion order.
"""

import asyncio
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from analysis import RegretSummary, RegretTrace, aggregate_runs, run_bound_checks
from bandit_policies import config_fingerprint, make_policy, run_episode
from bandwidth import median_bandwidth, select_bandwidth, select_sigma_z
from data_fetcher import verify_checksum
from environments import (
    MulticlassDataset,
    MulticlassEnvironment,
    SyntheticNewsEnvironment,
    load_dataset,
    split_dataset,
    synth_round,
)
from errors import ConfigurationError, DatasetParseError
from kernel_core import TaskSimilarity, gaussian_task_matrix
from models import (
    DatasetManifestEntry,
    DiagnosticRecord,
    EnvironmentSpec,
    ExperimentConfig,
    KernelSpec,
    PolicyConfig,
)

logger = logging.getLogger(__name__)

DATA_DIR_ENV_VAR = "KMTL_DATA_DIR"
BUNDLED_DATA_DIR = Path(__file__).resolve().parent / "data"
MANIFEST_FILE = "manifest.json"

FLOAT_FORMAT = "%.10g"
VALIDATION_STREAM = 2
SYNTHETIC_VALIDATION_ROUNDS = 200
# Fields that never change the written numbers
UNFINGERPRINTED_FIELDS = {"output_dir", "workers", "diagnostics"}

Environment = Union[SyntheticNewsEnvironment, MulticlassEnvironment]


def data_dir() -> Path:
    """Dataset directory: $KMTL_DATA_DIR, else the bundled data/ directory."""
    env_path = os.getenv(DATA_DIR_ENV_VAR)
    return Path(env_path) if env_path else BUNDLED_DATA_DIR


def load_manifest(directory: Optional[Path] = None) -> Dict[str, DatasetManifestEntry]:
    """
    Manifest entries by name. Entries in the bundled manifest are used for
    names the data directory's own manifest does not list.
    """
    entries: Dict[str, DatasetManifestEntry] = {}
    for folder in (BUNDLED_DATA_DIR, directory or data_dir()):
        manifest = folder / MANIFEST_FILE
        if not manifest.exists():
            continue
        with open(manifest, "r", encoding="utf-8") as f:
            raw = json.load(f)
        for item in raw.get("datasets", []):
            entry = DatasetManifestEntry(**item)
            entries[entry.name] = entry.model_copy(update={"path": str(folder / entry.path)})
    return entries


def resolve_dataset(spec: EnvironmentSpec, seed: int) -> MulticlassDataset:
    """Load and split the dataset named (or pointed to) by ``spec``."""
    if spec.dataset_path:
        dataset = load_dataset(spec.dataset_path, spec.dataset_format, name=spec.dataset)
    else:
        entry = load_manifest().get(spec.dataset)
        if entry is None:
            raise DatasetParseError(f"dataset '{spec.dataset}' is not in the manifest")
        if not Path(entry.path).exists():
            raise DatasetParseError(f"{entry.path}: file not found (run fetch-data {entry.name})")
        verify_checksum(entry, Path(entry.path))
        dataset = load_dataset(entry.path, entry.format, name=entry.name,
                               shape=(entry.n_classes, entry.n_features))
    return split_dataset(dataset, spec.validation_fraction, seed)


@dataclass(frozen=True, eq=False)
class PreparedExperiment:
    """Everything a worker needs to play one (policy, run) pair."""

    config: ExperimentConfig
    environment: Environment
    policy_config: PolicyConfig
    known_similarity: Optional[TaskSimilarity]
    metadata: Dict[str, object]
    fingerprint: str


@dataclass
class ExperimentResult:
    traces: List[RegretTrace]
    summaries: List[RegretSummary]
    records: List[DiagnosticRecord] = field(default_factory=list)
    paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def diagnostics_passed(self) -> bool:
        return all(r.passed for r in self.records)


def _resolve(value, compute) -> float:
    return float(compute()) if value == "auto" else float(value)


def _validation_sample(config: ExperimentConfig, env: Environment):
    """(contexts, regression targets, per-arm context groups) from validation data."""
    if isinstance(env, SyntheticNewsEnvironment):
        rng = np.random.default_rng([config.seed, 0, VALIDATION_STREAM])
        rounds = [synth_round(env.config, rng) for _ in range(SYNTHETIC_VALIDATION_ROUNDS)]
        contexts = np.vstack([x for r in rounds for x in r.contexts])
        targets = np.concatenate([r.expected_rewards for r in rounds])
        groups = [np.vstack([r.contexts[a] for r in rounds]) for a in range(env.n_arms)]
        return contexts, targets, groups

    dataset = env.dataset
    contexts = dataset.validation_features
    labels = dataset.validation_labels
    targets = np.eye(dataset.n_classes)[labels - 1]
    groups = [contexts[labels == a] for a in range(1, dataset.n_classes + 1)]
    return contexts, targets, groups


def prepare_experiment(config: ExperimentConfig) -> PreparedExperiment:
    """Build the environment, resolve 'auto' bandwidths and check every policy."""
    spec = config.environment
    if spec.kind == "synthetic-news":
        env: Environment = SyntheticNewsEnvironment(spec.synthetic)
    else:
        env = MulticlassEnvironment(resolve_dataset(spec, config.seed))
        if config.horizon > env.dataset.test_indices.size:
            raise ConfigurationError(
                f"horizon {config.horizon} exceeds the {env.dataset.test_indices.size} test rounds of {env.dataset.name}"
            )

    contexts, targets, groups = _validation_sample(config, env)
    strategy = config.bandwidth_strategy
    context_bw = _resolve(config.context_bandwidth, lambda: select_bandwidth(
        contexts, "context", strategy, targets=targets, lam=config.lam, seed=config.seed))
    embedding_bw = _resolve(config.embedding_bandwidth, lambda: select_bandwidth(
        contexts, "embedding", strategy, targets=targets, lam=config.lam, seed=config.seed))
    embedding_kernel = KernelSpec.gaussian(embedding_bw, role="embedding")
    sigma_z = _resolve(config.task_bandwidth, lambda: select_sigma_z(groups, embedding_kernel))

    known_similarity = None
    task_bw = None
    if isinstance(env, SyntheticNewsEnvironment):
        features = env.arm_features()
        task_bw = _resolve(config.task_bandwidth, lambda: median_bandwidth(features, "task"))
        known_similarity = gaussian_task_matrix(features, task_bw)

    policy_config = PolicyConfig(
        similarity="known",
        beta=config.beta,
        lam=config.lam,
        delta=config.delta,
        c=config.c,
        horizon=config.horizon,
        estimate_period=config.estimate_period,
        mu=config.mu,
        weighted=config.weighted,
        incremental=config.incremental,
        context_kernel=KernelSpec.gaussian(context_bw),
        embedding_kernel=embedding_kernel,
        sigma_z=sigma_z,
    )
    for name in config.policies:
        make_policy(name, policy_config, known_similarity)

    metadata = {
        "environment": spec.kind,
        "dataset": env.dataset.name if isinstance(env, MulticlassEnvironment) else None,
        "n_arms": env.n_arms,
        "horizon": config.horizon,
        "runs": config.runs,
        "seed": config.seed,
        "lam": config.lam,
        "beta": config.beta,
        "beta_rule": "fixed" if config.beta is not None else "alpha + c*sqrt(lam)",
        "delta": config.delta,
        "c": config.c,
        "weighted": config.weighted,
        "incremental": config.incremental,
        "mu": config.mu,
        "estimate_period": config.estimate_period,
        "bandwidth_strategy": strategy,
        "context_bandwidth": context_bw,
        "embedding_bandwidth": embedding_bw,
        "sigma_z": sigma_z,
        "task_bandwidth": task_bw,
        "validation_fraction": spec.validation_fraction if spec.kind == "multiclass" else None,
    }
    fingerprint = config_fingerprint(config.model_dump_json(exclude=UNFINGERPRINTED_FIELDS),
                                     policy_config.model_dump_json())
    logger.info("Resolved hyperparameters", extra={"context_bw": round(context_bw, 6), "sigma_z": round(sigma_z, 6), "fingerprint": fingerprint})
    return PreparedExperiment(config, env, policy_config, known_similarity, metadata, fingerprint)


def run_one(prepared: PreparedExperiment, policy_name: str, run: int, keep_model: bool = False) -> RegretTrace:
    """Play one run of one policy; module-level so worker processes can import it."""
    policy = make_policy(policy_name, prepared.policy_config, prepared.known_similarity)
    trace = run_episode(prepared.environment, policy, prepared.config.horizon,
                        prepared.config.seed, run, prepared.fingerprint)
    if not keep_model:
        trace.history = None
    return trace


async def run_all(prepared: PreparedExperiment, workers: int) -> List[RegretTrace]:
    """All (policy, run) pairs, ordered by policy then run regardless of completion order."""
    config = prepared.config
    jobs = [(name, run) for name in config.policies for run in range(config.runs)]
    keep_model = config.diagnostics

    if workers <= 1:
        traces = []
        for name, run in jobs:
            traces.append(run_one(prepared, name, run, keep_model))
            logger.info("Run finished", extra={"policy": name, "run": run, "final_regret": round(traces[-1].final_regret, 6)})
        return traces

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, run_one, prepared, name, run, keep_model) for name, run in jobs]
        traces = await asyncio.gather(*futures)
    for trace in traces:
        logger.info("Run finished", extra={"policy": trace.policy, "run": trace.run, "final_regret": round(trace.final_regret, 6)})
    return list(traces)


def regret_frame(traces: List[RegretTrace]) -> pd.DataFrame:
    frames = [
        pd.DataFrame({
            "policy": trace.policy,
            "run": trace.run,
            "t": np.arange(1, trace.horizon + 1),
            "cum_regret": trace.cumulative,
        })
        for trace in traces
    ]
    return pd.concat(frames, ignore_index=True)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n", float_format=FLOAT_FORMAT, encoding="utf-8")
    return path


def write_diagnostics(records: List[DiagnosticRecord], output_dir: Path) -> Path:
    columns = ["name", "lhs", "rhs", "passed", "detail"]
    frame = pd.DataFrame([r.model_dump() for r in records], columns=columns)
    return write_csv(frame, output_dir / "diagnostics.csv")


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every policy for ``config.runs`` seeded runs and write the CSV outputs."""
    start_time = datetime.utcnow()
    logger.info(
        "🚀 Starting experiment",
        extra={"policies": ",".join(config.policies), "runs": config.runs,
               "horizon": config.horizon, "output_dir": config.output_dir}
    )

    prepared = prepare_experiment(config)
    traces = asyncio.run(run_all(prepared, config.workers))
    summaries = [aggregate_runs([t for t in traces if t.policy == name]) for name in config.policies]

    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "regret": write_csv(regret_frame(traces), output_dir / "regret.csv"),
        "summary": write_csv(pd.concat([s.to_frame() for s in summaries], ignore_index=True), output_dir / "summary.csv"),
    }
    metadata_path = output_dir / "summary_metadata.json"
    with open(metadata_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({**prepared.metadata, "fingerprint": prepared.fingerprint}, f, indent=2, sort_keys=True)
        f.write("\n")
    paths["metadata"] = metadata_path

    records: List[DiagnosticRecord] = []
    if config.diagnostics:
        for trace in traces:
            if trace.history is not None:
                records.extend(run_bound_checks(trace, prepared.environment.n_arms, config.delta, config.c))
        paths["diagnostics"] = write_diagnostics(records, output_dir)
        failed = [r.name for r in records if not r.passed]
        if failed:
            logger.warning("Bound checks failed", extra={"failed": ",".join(failed)})

    duration = (datetime.utcnow() - start_time).total_seconds()
    logger.info(
        "✅ Experiment complete",
        extra={"traces": len(traces), "output_dir": str(output_dir), "duration_seconds": round(duration, 2)}
    )
    return ExperimentResult(traces=traces, summaries=summaries, records=records, paths=paths)
