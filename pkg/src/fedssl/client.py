"""Per-client local training loops: the dual-regulator round and two baselines.

A local round receives the freshly broadcast global parameters, runs a fixed
number of mini-batch iterations, and returns the updated parameters plus a
per-iteration log. Every random decision comes from a stream derived from
(experiment seed, client id, round index), so rounds replay bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import regulators as reg
from .data import AugmentSpec, ClientData, augment
from .params import AdamState, ParamVector, adam_step, sgd_step
from .seeding import TAG_CLIENT_ROUND, TAG_FREG_INIT, derive_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ALGORITHMS = ("feddure", "fedavg_supervised", "fedavg_fixmatch")


class NonFiniteGradientError(RuntimeError):
    """A gradient term blew up; the message names the offending term."""


@dataclass(frozen=True)
class Hyperparams:
    """Everything a local round needs beyond data and parameters."""

    eta: float = 5e-4
    eta_s: float = 5e-4
    eta_w: float = 5e-4
    batch_size: int = 10
    local_iters: int = 1
    local_epochs: int = 0  # 0 = use local_iters; >0 converts per client size
    tau: float = 0.95
    meta_mode: str = "darts_fd"
    fd_epsilon_scale: float = 0.01
    optimizer: str = "sgd"
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    freg_hidden: int = 128
    freg_reset_each_round: bool = False
    stop_grad_through_weight: bool = False
    force_unit_weights: bool = False
    force_zero_reward: bool = False

    def __post_init__(self) -> None:
        if self.eta < 0 or self.eta_s < 0 or self.eta_w < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.local_iters < 1 and self.local_epochs < 1:
            raise ValueError("need at least one local iteration")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly between 0 and 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def meta_config(self) -> reg.MetaGradConfig:
        return reg.MetaGradConfig(
            mode=self.meta_mode,
            fd_epsilon_scale=self.fd_epsilon_scale,
            eta_s=self.eta_s,
            eta_w=self.eta_w,
        )


@dataclass
class ClientState:
    """Long-lived per-client context: data, persistent regulator, optimizer state."""

    id: int
    data: ClientData
    freg: reg.FineRegulator | None = None
    freg_adam: AdamState | None = None

    @property
    def sample_weight(self) -> int:
        return self.data.total_count


@dataclass(frozen=True)
class IterationLog:
    reward: float
    mean_weight: float
    loss_labeled: float
    loss_unlabeled: float
    grad_norm_labeled: float
    grad_norm_unlabeled: float
    grad_norm_reward: float
    grad_norm_total: float


@dataclass(frozen=True, eq=False)
class LocalRoundResult:
    updated_params: ParamVector
    sample_weight: int
    iteration_logs: tuple[IterationLog, ...]

    def __post_init__(self) -> None:
        if self.sample_weight <= 0:
            raise ValueError("sample_weight must be positive")


def _effective_iters(hp: Hyperparams, client_size: int) -> int:
    if hp.local_epochs > 0:
        return hp.local_epochs * max(1, math.ceil(client_size / hp.batch_size))
    return hp.local_iters


def _sample_batch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """Uniform batch indices; falls back to replacement when the pool is small.

    A full-pool draw is the whole set in canonical order, so full-batch runs
    are invariant to the client's stream.
    """
    if n == size:
        return np.arange(n)
    if n > size:
        return rng.choice(n, size=size, replace=False)
    return rng.choice(n, size=size, replace=True)


def _check_finite(vec: ParamVector, term: str, client_id: int) -> ParamVector:
    for name, arr in vec.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(
                f"non-finite gradient in term {term} (segment {name}) on client {client_id}"
            )
    return vec


class _Optimizer:
    """SGD or Adam step over a named slot, keeping Adam moments per slot."""

    def __init__(self, kind: str):
        self.kind = kind
        self.states: dict[str, AdamState] = {}

    def step(self, slot: str, params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
        if lr == 0.0:
            return params
        if self.kind == "sgd":
            return sgd_step(params, grad, lr)
        state = self.states.get(slot) or AdamState.fresh(params)
        new_params, new_state = adam_step(
            state, params, grad, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS
        )
        self.states[slot] = new_state
        return new_params


def _round_rng(hp: Hyperparams, client_id: int, round_index: int) -> np.random.Generator:
    return derive_rng(hp.seed, TAG_CLIENT_ROUND, round_index, client_id)


def _labeled_loss_and_grad(spec, params, x, y):
    logits, cache = nn.forward_cached(spec, params, x)
    loss, _ = nn.cross_entropy(logits, y)
    # Same floating-point expression as nn.grad, so oracle recompositions match bit-exactly.
    dlogits = np.full(x.shape[0], 1.0 / x.shape[0])[:, None] * nn.ce_logit_grad(logits, y)
    g, _ = nn.backward(spec, params, cache, dlogits)
    return loss, g


def feddure_local_round(
    state: ClientState,
    spec: nn.MlpSpec,
    global_params: ParamVector,
    hp: Hyperparams,
    round_index: int,
) -> LocalRoundResult:
    """Full dual-regulator local round.

    Per iteration: pseudo-label the unlabeled batch, meta-update the fine
    regulator through the coarse regulator's probe step, re-step the coarse
    regulator with the new weights, weight the unlabeled gradient per
    instance, scale a second unlabeled gradient by the labeled-loss reward,
    and descend the sum of both plus the supervised gradient. The coarse
    regulator and the local model both start the round at the global
    parameters. The force flags neutralize one regulator each (weights pinned
    to 1, reward pinned to 0) for ablations and reduction checks.
    """
    data = state.data
    if data.labeled_count < 1:
        raise ValueError(f"client {state.id} has no labeled data")
    rng = _round_rng(hp, state.id, round_index)
    optimizer = _Optimizer(hp.optimizer)
    if state.freg_adam is not None and not hp.freg_reset_each_round:
        optimizer.states["freg"] = state.freg_adam

    theta = global_params
    phi = global_params
    if state.freg is None or hp.freg_reset_each_round:
        state.freg = reg.init_fine_regulator(
            data.class_count, derive_rng(hp.seed, TAG_FREG_INIT, state.id), hp.freg_hidden
        )
    meta_cfg = hp.meta_config()

    logs = []
    for _ in range(_effective_iters(hp, data.total_count)):
        lab_idx = _sample_batch(rng, data.labeled_count, hp.batch_size)
        x_lab = data.labeled_features[lab_idx]
        y_lab = data.labeled_labels[lab_idx]

        reward = 0.0
        g_u = None
        g_d = None
        mean_weight = 0.0
        loss_unlabeled = 0.0

        if data.unlabeled_count > 0:
            unl_idx = _sample_batch(rng, data.unlabeled_count, hp.batch_size)
            u_batch = data.unlabeled_features[unl_idx]
            pseudo = reg.pseudo_label(spec, theta, u_batch, hp.augment, rng)
            # One strong draw per iteration, shared by the regulator updates,
            # the instance weights, and both unlabeled gradient terms.
            strong = augment(u_batch, hp.augment, "strong", rng)

            if hp.force_unit_weights:
                freg_now = None
                weights = np.ones(strong.shape[0])
                mean_weight = 1.0
            else:
                freg_result = reg.freg_update(
                    state.freg,
                    spec,
                    phi,
                    x_lab,
                    y_lab,
                    strong,
                    pseudo,
                    meta_cfg,
                    hp.stop_grad_through_weight,
                )
                if hp.optimizer == "adam" and not freg_result.skipped:
                    new_params = optimizer.step(
                        "freg", state.freg.params, freg_result.meta_grad, hp.eta_w
                    )
                    state.freg = state.freg.with_params(new_params)
                else:
                    state.freg = freg_result.regulator
                freg_now = state.freg

            if not hp.force_zero_reward:
                if hp.optimizer == "sgd":
                    phi_next = reg.creg_one_step(
                        spec, phi, freg_now, strong, pseudo, hp.eta_s,
                        hp.stop_grad_through_weight,
                    )
                else:
                    g_phi = reg.weighted_pseudo_grad(
                        spec, phi, freg_now, strong, pseudo,
                        hp.stop_grad_through_weight,
                    )
                    phi_next = optimizer.step("phi", phi, g_phi, hp.eta_s)
                signal = reg.entropy_difference(spec, phi, phi_next, x_lab, y_lab)
                reward = signal.value
                phi = phi_next

            if not hp.force_unit_weights:
                weights = reg.instance_weights(spec, theta, state.freg, strong)
                mean_weight = float(weights.mean())

            loss_unlabeled, _ = nn.cross_entropy(nn.forward(spec, theta, strong), pseudo)
            g_u = _check_finite(
                nn.grad(spec, theta, strong, pseudo, weights / strong.shape[0]),
                "g_u",
                state.id,
            )
            if reward != 0.0:
                g_d = _check_finite(
                    reward * nn.grad(spec, theta, strong, pseudo), "g_d", state.id
                )

        loss_labeled, g_s = _labeled_loss_and_grad(spec, theta, x_lab, y_lab)
        g_s = _check_finite(g_s, "g_s", state.id)

        total = g_s
        if g_u is not None:
            total = total + g_u
        if g_d is not None:
            total = total + g_d
        theta = optimizer.step("theta", theta, total, hp.eta)

        logs.append(
            IterationLog(
                reward=reward,
                mean_weight=mean_weight,
                loss_labeled=loss_labeled,
                loss_unlabeled=loss_unlabeled,
                grad_norm_labeled=g_s.norm(),
                grad_norm_unlabeled=g_u.norm() if g_u is not None else 0.0,
                grad_norm_reward=g_d.norm() if g_d is not None else 0.0,
                grad_norm_total=total.norm(),
            )
        )

    if hp.optimizer == "adam":
        state.freg_adam = optimizer.states.get("freg")
    return LocalRoundResult(theta, state.sample_weight, tuple(logs))


def supervised_local_round(
    state: ClientState,
    spec: nn.MlpSpec,
    global_params: ParamVector,
    hp: Hyperparams,
    round_index: int,
) -> LocalRoundResult:
    """Plain mini-batch cross-entropy descent on the labeled set only."""
    data = state.data
    if data.labeled_count < 1:
        raise ValueError(f"client {state.id} has no labeled data")
    rng = _round_rng(hp, state.id, round_index)
    optimizer = _Optimizer(hp.optimizer)
    theta = global_params

    logs = []
    for _ in range(_effective_iters(hp, data.total_count)):
        lab_idx = _sample_batch(rng, data.labeled_count, hp.batch_size)
        x_lab = data.labeled_features[lab_idx]
        y_lab = data.labeled_labels[lab_idx]
        loss_labeled, g_s = _labeled_loss_and_grad(spec, theta, x_lab, y_lab)
        g_s = _check_finite(g_s, "g_s", state.id)
        theta = optimizer.step("theta", theta, g_s, hp.eta)
        logs.append(
            IterationLog(
                reward=0.0,
                mean_weight=0.0,
                loss_labeled=loss_labeled,
                loss_unlabeled=0.0,
                grad_norm_labeled=g_s.norm(),
                grad_norm_unlabeled=0.0,
                grad_norm_reward=0.0,
                grad_norm_total=g_s.norm(),
            )
        )
    return LocalRoundResult(theta, state.sample_weight, tuple(logs))


def fixmatch_local_round(
    state: ClientState,
    spec: nn.MlpSpec,
    global_params: ParamVector,
    hp: Hyperparams,
    round_index: int,
) -> LocalRoundResult:
    """Supervised loss plus confidence-masked pseudo-label loss on strong views.

    An unlabeled example contributes only when the max softmax of its weakly
    augmented view reaches the threshold; both loss terms enter with unit
    coefficients.
    """
    data = state.data
    if data.labeled_count < 1:
        raise ValueError(f"client {state.id} has no labeled data")
    rng = _round_rng(hp, state.id, round_index)
    optimizer = _Optimizer(hp.optimizer)
    theta = global_params

    logs = []
    for _ in range(_effective_iters(hp, data.total_count)):
        lab_idx = _sample_batch(rng, data.labeled_count, hp.batch_size)
        x_lab = data.labeled_features[lab_idx]
        y_lab = data.labeled_labels[lab_idx]

        g_u = None
        mean_weight = 0.0
        loss_unlabeled = 0.0
        if data.unlabeled_count > 0:
            unl_idx = _sample_batch(rng, data.unlabeled_count, hp.batch_size)
            u_batch = data.unlabeled_features[unl_idx]
            weak = augment(u_batch, hp.augment, "weak", rng)
            weak_logits = nn.forward(spec, theta, weak)
            pseudo = weak_logits.argmax(axis=1)
            confidence = nn.softmax(weak_logits).max(axis=1)
            mask = (confidence >= hp.tau).astype(np.float64)
            strong = augment(u_batch, hp.augment, "strong", rng)
            mean_weight = float(mask.mean())
            if mask.any():
                loss_unlabeled, _ = nn.cross_entropy(
                    nn.forward(spec, theta, strong), pseudo
                )
                g_u = _check_finite(
                    nn.grad(spec, theta, strong, pseudo, mask / strong.shape[0]),
                    "g_u",
                    state.id,
                )

        loss_labeled, g_s = _labeled_loss_and_grad(spec, theta, x_lab, y_lab)
        g_s = _check_finite(g_s, "g_s", state.id)
        total = g_s if g_u is None else g_s + g_u
        theta = optimizer.step("theta", theta, total, hp.eta)
        logs.append(
            IterationLog(
                reward=0.0,
                mean_weight=mean_weight,
                loss_labeled=loss_labeled,
                loss_unlabeled=loss_unlabeled,
                grad_norm_labeled=g_s.norm(),
                grad_norm_unlabeled=g_u.norm() if g_u is not None else 0.0,
                grad_norm_reward=0.0,
                grad_norm_total=total.norm(),
            )
        )
    return LocalRoundResult(theta, state.sample_weight, tuple(logs))


def run_local_round(
    state: ClientState,
    spec: nn.MlpSpec,
    global_params: ParamVector,
    hp: Hyperparams,
    algorithm: str,
    round_index: int,
) -> LocalRoundResult:
    if algorithm == "feddure":
        return feddure_local_round(state, spec, global_params, hp, round_index)
    if algorithm == "fedavg_supervised":
        return supervised_local_round(state, spec, global_params, hp, round_index)
    if algorithm == "fedavg_fixmatch":
        return fixmatch_local_round(state, spec, global_params, hp, round_index)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
