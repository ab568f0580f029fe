"""Command-line entry point: run experiments, emit partitions, compare metrics.

The default output directory comes from ``FEDSSL_OUT`` when set; everything
else is controlled by config files and flags (flags win over file values).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, get_preset, parse_config, presets
from .data import dirichlet_partition, imbalance_report
from .harness import build_dataset, compare_runs, format_comparison, run_experiment

ENV_OUTPUT_DIR = "FEDSSL_OUT"

_OVERRIDE_FLAGS = [
    ("--seed", "seed", int),
    ("--algorithm", "algorithm", str),
    ("--rounds", "rounds", int),
    ("--gamma", "gamma", float),
    ("--setting", "setting", str),
    ("--eta", "eta", float),
    ("--eta-s", "eta_s", float),
    ("--eta-w", "eta_w", float),
    ("--batch-size", "batch_size", int),
    ("--local-iters", "local_iters", int),
    ("--local-epochs", "local_epochs", int),
    ("--clients", "client_count", int),
    ("--clients-per-round", "clients_per_round", int),
    ("--labeled-per-class", "labeled_per_class", int),
    ("--tau", "tau", float),
    ("--meta-mode", "meta_mode", str),
    ("--optimizer", "optimizer", str),
]


def _add_config_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="config file path")
    p.add_argument(
        "--preset",
        type=str,
        default=None,
        help=f"named preset as the base config: {sorted(presets())}",
    )
    p.add_argument("--out", type=str, default=None, help="output directory")
    for flag, _, type_ in _OVERRIDE_FLAGS:
        p.add_argument(flag, type=type_, default=None)


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = get_preset(args.preset) if args.preset else None
    overrides = {}
    for flag, key, _ in _OVERRIDE_FLAGS:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is not None:
            overrides[key] = value
    out = args.out or os.environ.get(ENV_OUTPUT_DIR)
    if out is not None:
        overrides["out"] = out
    return parse_config(args.config, overrides=overrides, base=base)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    state = run_experiment(cfg)
    final = state.history[-1].test_accuracy if state.history else float("nan")
    print(
        f"{cfg.algorithm} seed={cfg.seed}: {len(state.history)} rounds, "
        f"final accuracy {final:.4f} -> {cfg.out}"
    )
    return 0


def _cmd_partition(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    train, _ = build_dataset(cfg)
    result = dirichlet_partition(train, cfg.partition_spec())
    report = imbalance_report(list(result.clients))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition_manifest.json").write_text(
        json.dumps(result.manifest, indent=2) + "\n"
    )
    (out / "imbalance_report.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n"
    )
    print(
        f"{cfg.setting}: {cfg.client_count} clients, "
        f"mean internal TV {report.mean_internal:.4f}, "
        f"mean external TV {report.mean_external:.4f} -> {out}"
    )
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    rows = compare_runs(args.metrics)
    print(format_comparison(rows))
    if args.out:
        payload = [
            {
                "algorithm": r.algorithm,
                "runs": r.runs,
                "mean_final_accuracy": r.mean_final_accuracy,
                "std_final_accuracy": r.std_final_accuracy,
            }
            for r in rows
        ]
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedssl",
        description="Federated semi-supervised learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    _add_config_arguments(run_p)
    run_p.set_defaults(func=_cmd_run)

    part_p = sub.add_parser(
        "partition", help="emit the partition manifest and imbalance report only"
    )
    _add_config_arguments(part_p)
    part_p.set_defaults(func=_cmd_partition)

    cmp_p = sub.add_parser("compare", help="summarize metrics files by algorithm")
    cmp_p.add_argument("metrics", nargs="+", help="metrics.csv paths")
    cmp_p.add_argument("--out", type=str, default=None, help="optional JSON output")
    cmp_p.set_defaults(func=_cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
