"""Declarative experiment configuration: flat key-value files plus presets.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
Every key has a declared type; unknown keys are rejected with the offending
name. Defaults encode the reference hyperparameters (batch size 10, all
learning rates 5e-4, one local iteration, 5 clients per round, Dirichlet
coefficient 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .client import ALGORITHMS, Hyperparams
from .data import SETTINGS, AugmentSpec, PartitionSpec


class ConfigError(ValueError):
    """A config key is unknown, ill-typed, or violates an invariant."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete declarative description of one run."""

    # data source
    dataset: str = "synthetic"
    synthetic_class_count: int = 4
    synthetic_per_class: int = 500
    synthetic_dim: int = 2
    synthetic_spread: float = 0.8
    synthetic_test_per_class: int = 250
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    idx_train_subset: int = 0  # 0 = full training file
    # partition
    setting: str = "iid_iid"
    client_count: int = 10
    labeled_per_class: int = 5
    gamma: float = 0.5
    test_fraction: float = 0.0
    # model
    hidden_widths: tuple[int, ...] = (64, 64)
    freg_hidden: int = 128
    # algorithm & schedule
    algorithm: str = "feddure"
    rounds: int = 150
    clients_per_round: int = 5
    batch_size: int = 10
    eta: float = 5e-4
    eta_s: float = 5e-4
    eta_w: float = 5e-4
    local_iters: int = 1
    local_epochs: int = 0
    tau: float = 0.95
    meta_mode: str = "darts_fd"
    fd_epsilon_scale: float = 0.01
    optimizer: str = "sgd"
    # augmentation
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.15
    strong_dropout_prob: float = 0.1
    image_mode: bool = False
    # switches
    freg_reset_each_round: bool = False
    stop_grad_through_weight: bool = False
    force_unit_weights: bool = False
    force_zero_reward: bool = False
    uniform_aggregation: bool = False
    # run identity
    seed: int = 0
    out: str = "runs"

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        for key in ("eta", "eta_s", "eta_w"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be at least 1, got {self.rounds}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.clients_per_round < 1 or self.clients_per_round > self.client_count:
            raise ConfigError(
                f"clients_per_round must be in [1, {self.client_count}], "
                f"got {self.clients_per_round}"
            )
        if self.dataset == "idx" and not (self.idx_train_images and self.idx_train_labels):
            raise ConfigError("idx dataset needs idx_train_images and idx_train_labels")
        # Sub-spec constructors enforce their own invariants.
        self.partition_spec()
        self.augment_spec()
        self.hyperparams()
        return self

    def partition_spec(self) -> PartitionSpec:
        try:
            return PartitionSpec(
                setting=self.setting,
                client_count=self.client_count,
                labeled_per_class=self.labeled_per_class,
                dirichlet_gamma=self.gamma,
                seed=self.seed,
                test_fraction=self.test_fraction,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def augment_spec(self) -> AugmentSpec:
        try:
            return AugmentSpec(
                weak_noise_sigma=self.weak_noise_sigma,
                strong_noise_sigma=self.strong_noise_sigma,
                strong_dropout_prob=self.strong_dropout_prob,
                image_mode=self.image_mode,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hyperparams(self) -> Hyperparams:
        try:
            return Hyperparams(
                eta=self.eta,
                eta_s=self.eta_s,
                eta_w=self.eta_w,
                batch_size=self.batch_size,
                local_iters=self.local_iters,
                local_epochs=self.local_epochs,
                tau=self.tau,
                meta_mode=self.meta_mode,
                fd_epsilon_scale=self.fd_epsilon_scale,
                optimizer=self.optimizer,
                augment=self.augment_spec(),
                seed=self.seed,
                freg_hidden=self.freg_hidden,
                freg_reset_each_round=self.freg_reset_each_round,
                stop_grad_through_weight=self.stop_grad_through_weight,
                force_unit_weights=self.force_unit_weights,
                force_zero_reward=self.force_zero_reward,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_PARSERS = {
    str: lambda s: s,
    int: int,
    float: float,
    bool: _parse_bool,
    tuple: _parse_int_tuple,
}


def _field_types() -> dict[str, type]:
    types = {}
    for f in fields(ExperimentConfig):
        default = getattr(ExperimentConfig, f.name, None)
        if isinstance(default, bool):
            types[f.name] = bool
        elif isinstance(default, int):
            types[f.name] = int
        elif isinstance(default, float):
            types[f.name] = float
        elif isinstance(default, tuple):
            types[f.name] = tuple
        else:
            types[f.name] = str
    return types


FIELD_TYPES = _field_types()


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else ExperimentConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _PARSERS[FIELD_TYPES[key]](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return replace(cfg, **updates).validate()


def parse_config(
    path: str | Path | None = None,
    overrides: dict | None = None,
    base: ExperimentConfig | None = None,
) -> ExperimentConfig:
    """File values layered over defaults (or a preset), then explicit overrides."""
    cfg = base if base is not None else ExperimentConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), base=cfg)
    if overrides:
        unknown = set(overrides) - set(FIELD_TYPES)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


_PRESET_BASE = dict(
    dataset="synthetic",
    synthetic_class_count=4,
    synthetic_per_class=500,
    synthetic_dim=2,
    synthetic_spread=0.8,
    synthetic_test_per_class=250,
    client_count=10,
    clients_per_round=5,
    rounds=150,
    batch_size=10,
    hidden_widths=(32, 32),
    freg_hidden=16,
    eta=0.05,
    eta_s=0.05,
    eta_w=0.05,
    weak_noise_sigma=0.05,
    strong_noise_sigma=0.15,
    strong_dropout_prob=0.1,
)


def presets() -> dict[str, ExperimentConfig]:
    """Desk-scale experiments for the three heterogeneity settings.

    Labeled budgets: the iid settings give 5 labeled examples per class per
    client; dir_dir allocates 2% of the pool (10 per class in total) across
    clients by the Dirichlet draw.
    """
    out = {}
    for setting in SETTINGS:
        labeled = 5 if setting != "dir_dir" else 10
        out[f"{setting}_synthetic"] = ExperimentConfig(
            **_PRESET_BASE, setting=setting, labeled_per_class=labeled
        ).validate()
    return out


def get_preset(name: str) -> ExperimentConfig:
    table = presets()
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(table)}")
    return table[name]
