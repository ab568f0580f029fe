"""End-to-end experiment runner: build data, run rounds, persist metrics.

Outputs per run: ``metrics.csv`` (appended and flushed after every round, so
an interrupted run leaves a valid prefix), ``config.txt`` (the resolved
configuration, archived verbatim), ``summary.json`` (final/best accuracy),
and ``checkpoint.json`` (the final global state).
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn, server
from .client import ClientState
from .config import ExperimentConfig, serialize_config
from .data import Dataset, PartitionResult, dirichlet_partition, gen_synthetic, load_idx
from .seeding import TAG_MODEL_INIT, TAG_TEST_DATA, TAG_TRAIN_DATA, derive_rng, derive_seed

METRICS_HEADER = (
    "round,algorithm,seed,test_accuracy,mean_d,mean_weight,wall_clock_seconds"
)


@dataclass(frozen=True, eq=False)
class ExperimentSetup:
    """Everything deterministic a run derives from its config before round 0."""

    spec: nn.MlpSpec
    train: Dataset
    test: Dataset
    partition: PartitionResult
    clients: list[ClientState]
    initial_state: server.GlobalState


def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train pool and test set for the configured source."""
    if cfg.dataset == "synthetic":
        train = gen_synthetic(
            cfg.synthetic_class_count,
            cfg.synthetic_per_class,
            cfg.synthetic_dim,
            cfg.synthetic_spread,
            derive_seed(cfg.seed, TAG_TRAIN_DATA),
        )
        test = gen_synthetic(
            cfg.synthetic_class_count,
            cfg.synthetic_test_per_class,
            cfg.synthetic_dim,
            cfg.synthetic_spread,
            derive_seed(cfg.seed, TAG_TEST_DATA),
        )
        return train, test

    train = load_idx(cfg.idx_train_images, cfg.idx_train_labels)
    if cfg.idx_train_subset > 0 and cfg.idx_train_subset < len(train):
        rng = derive_rng(cfg.seed, TAG_TRAIN_DATA)
        idx = rng.choice(len(train), size=cfg.idx_train_subset, replace=False)
        idx.sort()
        train = Dataset(train.features[idx], train.labels[idx], train.class_count)
    if cfg.idx_test_images and cfg.idx_test_labels:
        test = load_idx(cfg.idx_test_images, cfg.idx_test_labels)
    else:
        raise ValueError("idx dataset needs idx_test_images and idx_test_labels")
    return train, test


def build_setup(cfg: ExperimentConfig) -> ExperimentSetup:
    train, test = build_dataset(cfg)
    partition = dirichlet_partition(train, cfg.partition_spec())
    if partition.test is not None:
        test = partition.test
    clients = [ClientState(id=i, data=cd) for i, cd in enumerate(partition.clients)]
    spec = nn.MlpSpec((train.dim, *cfg.hidden_widths, train.class_count))
    params = nn.init_params(spec, derive_rng(cfg.seed, TAG_MODEL_INIT))
    state = server.GlobalState(
        seed=cfg.seed,
        round_index=0,
        params=params,
        client_sizes=tuple(c.sample_weight for c in clients),
    )
    return ExperimentSetup(spec, train, test, partition, clients, state)


def _metrics_row(cfg: ExperimentConfig, report: server.RoundReport, elapsed: float) -> list:
    return [
        report.round_index,
        cfg.algorithm,
        cfg.seed,
        report.test_accuracy,
        report.mean_reward,
        report.mean_weight,
        elapsed,
    ]


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    clock: Callable[[], float] = time.perf_counter,
    on_round: Callable[[server.GlobalState], None] | None = None,
) -> server.GlobalState:
    """Run all configured rounds, streaming metrics to disk as they complete.

    ``clock`` exists so tests can substitute a deterministic timer; everything
    else in the metrics file is bit-reproducible from the config alone.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))

    setup = build_setup(cfg)
    state = setup.initial_state
    hp = cfg.hyperparams()

    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER.split(","))
        fh.flush()
        start = clock()
        try:
            for _ in range(cfg.rounds):
                state = server.run_round(
                    state,
                    setup.clients,
                    setup.spec,
                    setup.test,
                    hp,
                    cfg.algorithm,
                    cfg.clients_per_round,
                    uniform_aggregation=cfg.uniform_aggregation,
                )
                writer.writerow(
                    _metrics_row(cfg, state.history[-1], clock() - start)
                )
                fh.flush()
                if on_round is not None:
                    on_round(state)
        finally:
            fh.flush()

    accuracies = [r.test_accuracy for r in state.history]
    best_index = int(np.argmax(accuracies))
    summary = {
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
        "rounds": len(state.history),
        "final_accuracy": accuracies[-1],
        "best_accuracy": accuracies[best_index],
        "best_round": state.history[best_index].round_index,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    server.save_checkpoint(out / "checkpoint.json", state, setup.clients)
    return state


@dataclass(frozen=True)
class ComparisonRow:
    algorithm: str
    runs: int
    mean_final_accuracy: float
    std_final_accuracy: float


def compare_runs(metrics_paths: list[str | Path]) -> list[ComparisonRow]:
    """Group metrics files by algorithm; mean and population std of final accuracy."""
    if not metrics_paths:
        raise ValueError("no metrics files given")
    finals: dict[str, list[float]] = {}
    for path in metrics_paths:
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRICS_HEADER.split(","):
                raise ValueError(
                    f"{path}: unexpected metrics schema {reader.fieldnames}"
                )
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path}: empty metrics file")
        last = max(rows, key=lambda r: int(r["round"]))
        finals.setdefault(last["algorithm"], []).append(float(last["test_accuracy"]))
    out = []
    for algorithm in sorted(finals):
        values = np.array(finals[algorithm])
        out.append(
            ComparisonRow(
                algorithm=algorithm,
                runs=len(values),
                mean_final_accuracy=float(values.mean()),
                std_final_accuracy=float(values.std()),
            )
        )
    return out


def format_comparison(rows: list[ComparisonRow]) -> str:
    lines = [f"{'algorithm':<20} {'runs':>4} {'final acc (mean ± std)':>24}"]
    for r in rows:
        lines.append(
            f"{r.algorithm:<20} {r.runs:>4} "
            f"{r.mean_final_accuracy:>12.4f} ± {r.std_final_accuracy:.4f}"
        )
    return "\n".join(lines)
