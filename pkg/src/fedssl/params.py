"""Flat named-parameter vectors and the optimizer steps that act on them.

A :class:`ParamVector` is the unit of everything the simulator moves around:
model weights, regulator weights, gradients, and server aggregates. Segments
are immutable float64 arrays, so vectors can be shared freely between clients
and the server without defensive copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np


class ShapeError(ValueError):
    """Tensor or parameter shapes do not line up."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Ordered collection of named float64 arrays treated as one flat vector.

    All arithmetic is elementwise segment-by-segment and requires both
    operands to carry identical segment names and shapes. Values must be
    finite on construction; segments are stored read-only.
    """

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.arrays):
            raise ShapeError("names and arrays must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ShapeError(f"duplicate segment names: {self.names}")
        frozen = tuple(_freeze(a) for a in self.arrays)
        for name, arr in zip(self.names, frozen):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in segment {name!r}")
        object.__setattr__(self, "arrays", frozen)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        pairs = list(pairs)
        return cls(tuple(n for n, _ in pairs), tuple(a for _, a in pairs))

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.names, self.arrays))

    def segment(self, name: str) -> np.ndarray:
        try:
            return self.arrays[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays])

    def _check_compatible(self, other: "ParamVector") -> None:
        if self.names != other.names:
            raise ShapeError(f"segment names differ: {self.names} vs {other.names}")
        for name, a, b in zip(self.names, self.arrays, other.arrays):
            if a.shape != b.shape:
                raise ShapeError(
                    f"segment {name!r} shape mismatch: {a.shape} vs {b.shape}"
                )

    def _map2(self, other: "ParamVector", fn: Callable) -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(
            self.names, tuple(fn(a, b) for a, b in zip(self.arrays, other.arrays))
        )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self._map2(other, np.add)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self._map2(other, np.subtract)

    def __mul__(self, scalar: float) -> "ParamVector":
        s = float(scalar)
        return ParamVector(self.names, tuple(a * s for a in self.arrays))

    __rmul__ = __mul__

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.names, tuple(np.zeros_like(a) for a in self.arrays))

    def dot(self, other: "ParamVector") -> float:
        self._check_compatible(other)
        return float(
            sum(np.dot(a.reshape(-1), b.reshape(-1)) for a, b in zip(self.arrays, other.arrays))
        )

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def equals(self, other: "ParamVector") -> bool:
        self._check_compatible(other)
        return all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))

    def allclose(self, other: "ParamVector", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        self._check_compatible(other)
        return all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.arrays, other.arrays)
        )


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """One plain gradient-descent step ``params - lr * grad``. Pure."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    params._check_compatible(grad)
    return ParamVector(
        params.names,
        tuple(p - lr * g for p, g in zip(params.arrays, grad.arrays)),
    )


@dataclass(frozen=True, eq=False)
class AdamState:
    """Per-parameter Adam moments plus the step counter."""

    step: int
    m: ParamVector
    v: ParamVector

    @classmethod
    def fresh(cls, params: ParamVector) -> "AdamState":
        return cls(step=0, m=params.zeros_like(), v=params.zeros_like())


def adam_step(
    state: AdamState,
    params: ParamVector,
    grad: ParamVector,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamVector, AdamState]:
    """Standard bias-corrected Adam update; returns new params and state."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    params._check_compatible(grad)
    state.m._check_compatible(grad)
    t = state.step + 1
    m = state.m._map2(grad, lambda m_, g: beta1 * m_ + (1.0 - beta1) * g)
    v = state.v._map2(grad, lambda v_, g: beta2 * v_ + (1.0 - beta2) * g * g)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_arrays = tuple(
        p - lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + eps)
        for p, m_, v_ in zip(params.arrays, m.arrays, v.arrays)
    )
    return ParamVector(params.names, new_arrays), AdamState(step=t, m=m, v=v)
