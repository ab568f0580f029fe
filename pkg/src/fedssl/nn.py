"""Minimal dense feed-forward network with exact analytic gradients.

The whole simulator runs on one architecture family: fully connected layers
with ReLU on the hidden layers and a linear logits layer, all in float64.
Backpropagation is written out by hand so that every gradient used anywhere
in the protocol can be cross-checked against the central finite-difference
oracle in :func:`numeric_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .params import ParamVector, ShapeError


class NumericGradError(RuntimeError):
    """The finite-difference oracle hit a non-finite loss value."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of a fully connected net: input dim, hidden dims, class count.

    The final width is the number of classes; the final layer is linear.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive: {widths}")
        if widths[-1] < 2:
            raise ValueError("output width (class count) must be at least 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def class_count(self) -> int:
        return self.layer_widths[-1]

    @property
    def layer_count(self) -> int:
        return len(self.layer_widths) - 1

    def segment_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for i in range(self.layer_count):
            fan_in, fan_out = self.layer_widths[i], self.layer_widths[i + 1]
            shapes.append((f"w{i}", (fan_in, fan_out)))
            shapes.append((f"b{i}", (fan_out,)))
        return shapes


def init_params(spec: MlpSpec, rng: np.random.Generator, scale: float | None = None) -> ParamVector:
    """He-style random weights, zero biases. Deterministic per generator state."""
    pairs = []
    for i in range(spec.layer_count):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        std = scale if scale is not None else np.sqrt(2.0 / fan_in)
        pairs.append((f"w{i}", rng.standard_normal((fan_in, fan_out)) * std))
        pairs.append((f"b{i}", np.zeros(fan_out)))
    return ParamVector.from_pairs(pairs)


def check_params(spec: MlpSpec, params: ParamVector) -> None:
    expected = spec.segment_shapes()
    got = [(n, a.shape) for n, a in params.items()]
    if got != expected:
        raise ShapeError(f"params do not match spec: expected {expected}, got {got}")


def as_batch(batch: np.ndarray | Sequence, width: int | None = None) -> np.ndarray:
    """Validate a 2-d float64 batch, optionally checking its feature width."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-d, got shape {x.shape}")
    if width is not None and x.shape[1] != width:
        raise ShapeError(f"batch width {x.shape[1]} does not match expected {width}")
    return x


def forward(spec: MlpSpec, params: ParamVector, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (rows, class_count)."""
    logits, _ = forward_cached(spec, params, batch)
    return logits


def forward_cached(
    spec: MlpSpec, params: ParamVector, batch: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass that also returns the post-activation of every layer input.

    The cache holds [a0, a1, ..., a_{L-1}] where a0 is the input batch and
    a_i is the ReLU output feeding layer i; it is what backward() consumes.
    """
    check_params(spec, params)
    x = as_batch(batch, spec.input_dim)
    activations = [x]
    a = x
    for i in range(spec.layer_count):
        z = a @ params.segment(f"w{i}") + params.segment(f"b{i}")
        if i < spec.layer_count - 1:
            a = np.maximum(z, 0.0)
            activations.append(a)
        else:
            a = z
    return a, activations


def backward(
    spec: MlpSpec,
    params: ParamVector,
    activations: list[np.ndarray],
    dlogits: np.ndarray,
    need_input_grad: bool = False,
) -> tuple[ParamVector, np.ndarray | None]:
    """Backpropagate an upstream gradient on the logits.

    ``dlogits`` rows carry whatever per-example coefficients the objective
    uses (weights, 1/n factors, reward scalars); the result is the exact
    gradient of sum_n <dlogits_n, logits_n> with respect to every parameter.
    """
    delta = np.asarray(dlogits, dtype=np.float64)
    if delta.shape != (activations[0].shape[0], spec.class_count):
        raise ShapeError(
            f"dlogits shape {delta.shape} does not match "
            f"({activations[0].shape[0]}, {spec.class_count})"
        )
    grads: dict[str, np.ndarray] = {}
    for i in range(spec.layer_count - 1, -1, -1):
        a_in = activations[i]
        grads[f"w{i}"] = a_in.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0 or need_input_grad:
            delta = delta @ params.segment(f"w{i}").T
            if i > 0:
                delta = delta * (activations[i] > 0.0)
    dx = delta if need_input_grad else None
    grad_vec = ParamVector.from_pairs([(n, grads[n]) for n, _ in spec.segment_shapes()])
    return grad_vec, dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _as_targets(targets, class_count: int, rows: int) -> tuple[np.ndarray, bool]:
    t = np.asarray(targets)
    if t.ndim == 2:
        t = t.astype(np.float64)
        if t.shape != (rows, class_count):
            raise ShapeError(f"soft labels shape {t.shape} != ({rows}, {class_count})")
        return t, True
    t = t.astype(np.int64).reshape(-1)
    if t.shape[0] != rows:
        raise ShapeError(f"{t.shape[0]} targets for {rows} logit rows")
    if t.size and (t.min() < 0 or t.max() >= class_count):
        raise ValueError(f"class index out of range [0, {class_count})")
    return t, False


def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean and per-example cross-entropy of logits against hard or soft labels."""
    z = as_batch(logits)
    t, soft = _as_targets(targets, z.shape[1], z.shape[0])
    logp = log_softmax(z)
    if soft:
        per_example = -(t * logp).sum(axis=1)
    else:
        per_example = -logp[np.arange(z.shape[0]), t]
    return float(per_example.mean()), per_example


def ce_logit_grad(logits: np.ndarray, targets) -> np.ndarray:
    """Per-example d(cross-entropy)/d(logits), i.e. softmax minus target."""
    z = as_batch(logits)
    t, soft = _as_targets(targets, z.shape[1], z.shape[0])
    p = softmax(z)
    if soft:
        return p - t
    g = p.copy()
    g[np.arange(z.shape[0]), t] -= 1.0
    return g


def grad(
    spec: MlpSpec,
    params: ParamVector,
    batch: np.ndarray,
    targets,
    per_example_weights: np.ndarray | Sequence[float] | None = None,
) -> ParamVector:
    """Exact analytic gradient of the cross-entropy objective.

    Without weights the objective is the batch mean of per-example losses.
    Weights, when given, are the coefficients of each example's loss in the
    objective (the unweighted case is equivalent to weights of 1/n each), so
    the result is linear in the weights.
    """
    logits, cache = forward_cached(spec, params, batch)
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    if per_example_weights is None:
        coef = np.full(n, 1.0 / n)
    else:
        coef = np.asarray(per_example_weights, dtype=np.float64).reshape(-1)
        if coef.shape[0] != n:
            raise ShapeError(f"{coef.shape[0]} weights for {n} examples")
    dlogits = coef[:, None] * ce_logit_grad(logits, targets)
    g, _ = backward(spec, params, cache, dlogits)
    return g


def _with_coord(params: ParamVector, seg_index: int, flat_index: int, value: float) -> ParamVector:
    arrays = list(params.arrays)
    a = arrays[seg_index].copy()
    a.reshape(-1)[flat_index] = value
    arrays[seg_index] = a
    return ParamVector(params.names, tuple(arrays))


def numeric_grad(
    loss_fn: Callable[[ParamVector], float],
    params: ParamVector,
    step: float = 1e-5,
) -> ParamVector:
    """Central finite-difference gradient estimate, coordinate by coordinate."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    out = []
    for seg_index, (name, arr) in enumerate(params.items()):
        g = np.zeros_like(arr)
        g_flat = g.reshape(-1)
        base = arr.reshape(-1)
        for i in range(base.size):
            lp = float(loss_fn(_with_coord(params, seg_index, i, base[i] + step)))
            lm = float(loss_fn(_with_coord(params, seg_index, i, base[i] - step)))
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericGradError(
                    f"non-finite loss while perturbing coordinate {name}[{i}]"
                )
            g_flat[i] = (lp - lm) / (2.0 * step)
        out.append((name, g))
    return ParamVector.from_pairs(out)


def max_relative_error(analytic: ParamVector, numeric: ParamVector) -> float:
    """Largest coordinatewise |a - n| / max(1, |a|, |n|) between two gradients.

    The denominator floor of 1 keeps near-zero coordinates from amplifying
    finite-difference noise into spurious mismatches.
    """
    analytic._check_compatible(numeric)
    worst = 0.0
    for a, n in zip(analytic.arrays, numeric.arrays):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float((np.abs(a - n) / denom).max(initial=0.0)))
    return worst


@dataclass(frozen=True, eq=False)
class GradOracleReport:
    """Analytic gradient, finite-difference estimate, and their worst disagreement."""

    analytic_grad: ParamVector
    numeric_grad: ParamVector
    max_rel_error: float


def gradient_check(
    spec: MlpSpec,
    params: ParamVector,
    batch: np.ndarray,
    targets,
    per_example_weights: np.ndarray | None = None,
    step: float = 1e-5,
) -> GradOracleReport:
    """Compare the analytic cross-entropy gradient with the numeric oracle."""

    def loss_fn(p: ParamVector) -> float:
        _, per_example = cross_entropy(forward(spec, p, batch), targets)
        if per_example_weights is None:
            return float(per_example.mean())
        return float(np.dot(np.asarray(per_example_weights, dtype=np.float64), per_example))

    analytic = grad(spec, params, batch, targets, per_example_weights)
    numeric = numeric_grad(loss_fn, params, step)
    return GradOracleReport(analytic, numeric, max_relative_error(analytic, numeric))
