"""Dual-regulator machinery for semi-supervised local training.

Two small networks steer each client's use of its unlabeled data. The
coarse regulator is a sibling of the local model: it takes one gradient step
on pseudo-labeled data and its before/after loss difference on labeled data
becomes a scalar reward. The fine regulator maps a model's class
probabilities to a per-example weight in (0, 1) and is trained through the
coarse regulator's probe step via a one-step-unrolled meta-gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import AugmentSpec, augment
from .params import ParamVector, ShapeError


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True, eq=False)
class FineRegulator:
    """Sigmoid-headed scorer: class probabilities -> hidden ReLU -> weight in (0, 1).

    Parameters: w0 (class_count x hidden), b0 (hidden), w1 (hidden), b1 (1).
    """

    class_count: int
    hidden: int
    params: ParamVector

    def __post_init__(self) -> None:
        expected = [
            ("w0", (self.class_count, self.hidden)),
            ("b0", (self.hidden,)),
            ("w1", (self.hidden,)),
            ("b1", (1,)),
        ]
        got = [(n, a.shape) for n, a in self.params.items()]
        if got != expected:
            raise ShapeError(f"fine regulator params: expected {expected}, got {got}")

    def with_params(self, params: ParamVector) -> "FineRegulator":
        return FineRegulator(self.class_count, self.hidden, params)


def init_fine_regulator(
    class_count: int, rng: np.random.Generator, hidden: int = 128
) -> FineRegulator:
    """Random hidden layer, zero output head: every weight starts at exactly 0.5."""
    params = ParamVector.from_pairs(
        [
            ("w0", rng.standard_normal((class_count, hidden)) * np.sqrt(2.0 / class_count)),
            ("b0", np.zeros(hidden)),
            ("w1", np.zeros(hidden)),
            ("b1", np.zeros(1)),
        ]
    )
    return FineRegulator(class_count, hidden, params)


def _fine_forward(freg: FineRegulator, probs: np.ndarray):
    p = freg.params
    x = nn.as_batch(probs, freg.class_count)
    z1 = x @ p.segment("w0") + p.segment("b0")
    a1 = np.maximum(z1, 0.0)
    logit = a1 @ p.segment("w1") + p.segment("b1")[0]
    h = sigmoid(logit)
    return h, (x, z1, a1, logit)


def fine_weights(freg: FineRegulator, probs: np.ndarray) -> np.ndarray:
    """Per-example weights in (0, 1) for a batch of probability rows."""
    h, _ = _fine_forward(freg, probs)
    return h


def fine_weight_param_grad(
    freg: FineRegulator, probs: np.ndarray, coefficients: np.ndarray
) -> ParamVector:
    """Gradient of sum_i coefficients_i * weight_i with respect to the regulator params."""
    h, (x, z1, a1, _) = _fine_forward(freg, probs)
    u = np.asarray(coefficients, dtype=np.float64) * h * (1.0 - h)
    dw1 = a1.T @ u
    db1 = np.array([u.sum()])
    dz1 = (u[:, None] * freg.params.segment("w1")[None, :]) * (z1 > 0.0)
    dw0 = x.T @ dz1
    db0 = dz1.sum(axis=0)
    return ParamVector.from_pairs([("w0", dw0), ("b0", db0), ("w1", dw1), ("b1", db1)])


def fine_weight_input_grad(freg: FineRegulator, probs: np.ndarray) -> np.ndarray:
    """Per-example gradient of weight_i with respect to its probability input."""
    h, (x, z1, a1, _) = _fine_forward(freg, probs)
    u = h * (1.0 - h)
    dz1 = (u[:, None] * freg.params.segment("w1")[None, :]) * (z1 > 0.0)
    return dz1 @ freg.params.segment("w0").T


def softmax_vjp(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Rowwise softmax Jacobian transpose applied to an upstream gradient."""
    inner = (probs * upstream).sum(axis=1, keepdims=True)
    return probs * (upstream - inner)


def pseudo_label(
    spec: nn.MlpSpec,
    params: ParamVector,
    batch: np.ndarray,
    augment_spec: AugmentSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Argmax prediction on the weakly augmented batch; ties go to the lowest class.

    No confidence filtering happens here — thresholding is a property of the
    FixMatch baseline, not of the regulated algorithm.
    """
    x = nn.as_batch(batch, spec.input_dim)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    weak = augment(x, augment_spec, "weak", rng)
    logits = nn.forward(spec, params, weak)
    return logits.argmax(axis=1)


@dataclass(frozen=True)
class RewardSignal:
    """Labeled-loss drop of the coarse regulator across one pseudo-label step."""

    value: float
    loss_before: float
    loss_after: float


def weighted_pseudo_objective(
    spec: nn.MlpSpec,
    phi: ParamVector,
    freg: FineRegulator | None,
    strong_batch: np.ndarray,
    pseudo: np.ndarray,
) -> float:
    """Scalar value of mean_i weight_i(phi) * ce_i(phi) on the strong batch.

    With ``freg`` None the weights are identically 1. This is the objective
    whose phi-gradient drives both coarse-regulator updates; it exists as a
    separate callable so the finite-difference oracle can probe it directly.
    """
    logits = nn.forward(spec, phi, strong_batch)
    _, per_example = nn.cross_entropy(logits, pseudo)
    if freg is None:
        return float(per_example.mean())
    h = fine_weights(freg, nn.softmax(logits))
    return float((h * per_example).mean())


def weighted_pseudo_grad(
    spec: nn.MlpSpec,
    phi: ParamVector,
    freg: FineRegulator | None,
    strong_batch: np.ndarray,
    pseudo: np.ndarray,
    stop_grad_through_weight: bool = False,
) -> ParamVector:
    """Exact phi-gradient of :func:`weighted_pseudo_objective`.

    The product rule runs through both factors: the per-example loss and the
    weight, which itself reads the regulator's own softmax output. Setting
    ``stop_grad_through_weight`` freezes the weights at their current values
    (ablation switch; off by default).
    """
    x = nn.as_batch(strong_batch, spec.input_dim)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    logits, cache = nn.forward_cached(spec, phi, x)
    _, per_example = nn.cross_entropy(logits, pseudo)
    ce_grad = nn.ce_logit_grad(logits, pseudo)

    if freg is None:
        # Same floating-point expression as the unweighted nn.grad path, so
        # the unit-weight reduction is bit-exact.
        dlogits = np.full(n, 1.0 / n)[:, None] * ce_grad
    else:
        probs = nn.softmax(logits)
        h = fine_weights(freg, probs)
        dlogits = (h[:, None] * ce_grad) / n
        if not stop_grad_through_weight:
            dh_dprobs = fine_weight_input_grad(freg, probs)
            dh_dlogits = softmax_vjp(probs, dh_dprobs)
            dlogits = dlogits + (per_example[:, None] * dh_dlogits) / n
    g, _ = nn.backward(spec, phi, cache, dlogits)
    return g


def creg_one_step(
    spec: nn.MlpSpec,
    phi: ParamVector,
    freg: FineRegulator | None,
    strong_batch: np.ndarray,
    pseudo: np.ndarray,
    eta_s: float,
    stop_grad_through_weight: bool = False,
) -> ParamVector:
    """One plain gradient step of the coarse regulator on weighted pseudo-labels.

    Always raw SGD, never an adaptive optimizer: the meta-gradient of the
    fine regulator differentiates through exactly this linear update.
    """
    if eta_s < 0:
        raise ValueError("eta_s must be non-negative")
    if eta_s == 0.0:
        return phi
    g = weighted_pseudo_grad(
        spec, phi, freg, strong_batch, pseudo, stop_grad_through_weight
    )
    return phi - eta_s * g


def entropy_difference(
    spec: nn.MlpSpec,
    phi_before: ParamVector,
    phi_after: ParamVector,
    labeled_features: np.ndarray,
    labeled_labels: np.ndarray,
) -> RewardSignal:
    """Labeled cross-entropy before minus after; positive means the step helped."""
    x = nn.as_batch(labeled_features, spec.input_dim)
    if x.shape[0] == 0:
        raise ValueError("empty labeled batch")
    loss_before, _ = nn.cross_entropy(nn.forward(spec, phi_before, x), labeled_labels)
    loss_after, _ = nn.cross_entropy(nn.forward(spec, phi_after, x), labeled_labels)
    return RewardSignal(
        value=loss_before - loss_after,
        loss_before=loss_before,
        loss_after=loss_after,
    )


@dataclass(frozen=True)
class MetaGradConfig:
    """How the fine regulator's meta-gradient is computed.

    ``darts_fd`` uses the two-sided finite-difference approximation of the
    mixed second derivative (cheap, the production path); ``exact_numeric``
    differentiates the full composed objective coordinate by coordinate
    (reference oracle, small nets only).
    """

    mode: str = "darts_fd"
    fd_epsilon_scale: float = 0.01
    eta_s: float = 5e-4
    eta_w: float = 5e-4
    exact_fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if self.mode not in ("darts_fd", "exact_numeric"):
            raise ValueError(f"unknown meta-gradient mode {self.mode!r}")
        if self.fd_epsilon_scale <= 0:
            raise ValueError("fd_epsilon_scale must be positive")
        if self.eta_s < 0 or self.eta_w < 0:
            raise ValueError("learning rates must be non-negative")
        if self.exact_fd_step <= 0:
            raise ValueError("exact_fd_step must be positive")


@dataclass(frozen=True, eq=False)
class FregUpdateResult:
    regulator: FineRegulator
    meta_grad: ParamVector
    skipped: bool


def freg_update(
    freg: FineRegulator,
    spec: nn.MlpSpec,
    phi: ParamVector,
    labeled_features: np.ndarray,
    labeled_labels: np.ndarray,
    strong_batch: np.ndarray,
    pseudo: np.ndarray,
    cfg: MetaGradConfig,
    stop_grad_through_weight: bool = False,
) -> FregUpdateResult:
    """One meta-gradient step of the fine regulator.

    The outer objective is the labeled loss of the coarse regulator after its
    probe step, seen as a function of the weighting parameters through that
    step. ``skipped`` is set when the labeled-loss gradient at the probed
    parameters vanishes, which leaves the two-point formula undefined.
    """
    x_lab = nn.as_batch(labeled_features, spec.input_dim)
    x_unl = nn.as_batch(strong_batch, spec.input_dim)
    if x_lab.shape[0] == 0 or x_unl.shape[0] == 0:
        raise ValueError("empty batch")

    zero = freg.params.zeros_like()
    if cfg.eta_s == 0.0 or cfg.eta_w == 0.0:
        # Probe step independent of the weights, or no step to take.
        return FregUpdateResult(freg, zero, skipped=False)

    def probe(weight_params: ParamVector) -> ParamVector:
        return creg_one_step(
            spec,
            phi,
            freg.with_params(weight_params),
            x_unl,
            pseudo,
            cfg.eta_s,
            stop_grad_through_weight,
        )

    def outer_loss(weight_params: ParamVector) -> float:
        phi_probe = probe(weight_params)
        loss, _ = nn.cross_entropy(nn.forward(spec, phi_probe, x_lab), labeled_labels)
        return loss

    if cfg.mode == "exact_numeric":
        meta = nn.numeric_grad(outer_loss, freg.params, step=cfg.exact_fd_step)
        new_params = freg.params - cfg.eta_w * meta
        return FregUpdateResult(freg.with_params(new_params), meta, skipped=False)

    phi_probe = probe(freg.params)
    v = nn.grad(spec, phi_probe, x_lab, labeled_labels)
    v_norm = v.norm()
    if v_norm == 0.0:
        return FregUpdateResult(freg, zero, skipped=True)
    eps = cfg.fd_epsilon_scale / v_norm

    def weight_grad_at(phi_shifted: ParamVector) -> ParamVector:
        logits = nn.forward(spec, phi_shifted, x_unl)
        _, per_example = nn.cross_entropy(logits, pseudo)
        coeffs = per_example / per_example.shape[0]
        return fine_weight_param_grad(freg, nn.softmax(logits), coeffs)

    g_plus = weight_grad_at(phi + eps * v)
    g_minus = weight_grad_at(phi - eps * v)
    meta = (-cfg.eta_s / (2.0 * eps)) * (g_plus - g_minus)
    new_params = freg.params - cfg.eta_w * meta
    return FregUpdateResult(freg.with_params(new_params), meta, skipped=False)


def instance_weights(
    spec: nn.MlpSpec,
    local_params: ParamVector,
    freg: FineRegulator,
    strong_batch: np.ndarray,
) -> np.ndarray:
    """Weight in (0, 1) per unlabeled example, from the local model's softmax.

    The batch must be the same strong-augmentation realization used for the
    local gradient in this iteration: one draw, reused everywhere.
    """
    x = nn.as_batch(strong_batch, spec.input_dim)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    probs = nn.softmax(nn.forward(spec, local_params, x))
    return fine_weights(freg, probs)
