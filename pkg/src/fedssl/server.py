"""Round orchestration: client selection, weighted averaging, evaluation.

The server is synchronous: it selects a subset of clients, hands each the
current global parameters, waits for all local results, averages them by
sample count, and evaluates the new global model on the held-out test set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import client as client_mod
from . import nn
from .client import ClientState, Hyperparams, LocalRoundResult
from .data import Dataset
from .params import AdamState, ParamVector, ShapeError
from .seeding import TAG_SELECTION, derive_rng

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RoundReport:
    """Metrics of one completed round."""

    round_index: int
    selected_clients: tuple[int, ...]
    test_accuracy: float
    test_loss: float
    mean_reward: float
    mean_weight: float
    mean_grad_norm: float
    per_client_losses: dict[int, tuple[float, ...]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_clients"] = list(self.selected_clients)
        d["per_client_losses"] = {
            str(k): list(v) for k, v in self.per_client_losses.items()
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        return cls(
            round_index=int(d["round_index"]),
            selected_clients=tuple(int(i) for i in d["selected_clients"]),
            test_accuracy=float(d["test_accuracy"]),
            test_loss=float(d["test_loss"]),
            mean_reward=float(d["mean_reward"]),
            mean_weight=float(d["mean_weight"]),
            mean_grad_norm=float(d["mean_grad_norm"]),
            per_client_losses={
                int(k): tuple(float(x) for x in v)
                for k, v in d["per_client_losses"].items()
            },
        )


@dataclass(frozen=True, eq=False)
class GlobalState:
    """Server-side view of the run: parameters, registry, and history."""

    seed: int
    round_index: int
    params: ParamVector
    client_sizes: tuple[int, ...]
    history: tuple[RoundReport, ...] = ()


def select_clients(client_count: int, subset_size: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample of client ids without replacement, returned in id order."""
    if subset_size > client_count:
        raise ValueError(
            f"cannot select {subset_size} clients out of {client_count}"
        )
    if subset_size == client_count:
        return tuple(range(client_count))
    chosen = rng.choice(client_count, size=subset_size, replace=False)
    return tuple(sorted(int(i) for i in chosen))


def aggregate(results: list[LocalRoundResult], uniform: bool = False) -> ParamVector:
    """Sample-count-weighted average of client parameters.

    Computed as base + sum(w_k * (theta_k - base)) so that averaging
    identical inputs reproduces them bit-exactly.
    """
    if not results:
        raise ValueError("nothing to aggregate")
    if uniform:
        weights = np.full(len(results), 1.0 / len(results))
    else:
        counts = np.array([r.sample_weight for r in results], dtype=np.float64)
        weights = counts / counts.sum()
    base = results[0].updated_params
    out = base
    for w, r in zip(weights[1:], results[1:]):
        base._check_compatible(r.updated_params)
        out = out + float(w) * (r.updated_params - base)
    return out


def evaluate(spec: nn.MlpSpec, params: ParamVector, test: Dataset) -> tuple[float, float]:
    """Accuracy (argmax, ties to lowest class) and mean loss on a test set."""
    if len(test) == 0:
        raise ValueError("empty test set")
    logits = nn.forward(spec, params, test.features)
    predictions = logits.argmax(axis=1)
    accuracy = float((predictions == test.labels).mean())
    loss, _ = nn.cross_entropy(logits, test.labels)
    return accuracy, loss


def run_round(
    state: GlobalState,
    clients: list[ClientState],
    spec: nn.MlpSpec,
    test: Dataset,
    hp: Hyperparams,
    algorithm: str,
    clients_per_round: int,
    uniform_aggregation: bool = False,
) -> GlobalState:
    """One synchronous round; returns the successor global state.

    Deterministic given (seed, round_index) and the incoming client states.
    Client failures propagate with the client id attached.
    """
    rng = derive_rng(state.seed, TAG_SELECTION, state.round_index)
    selected = select_clients(len(clients), clients_per_round, rng)

    results: list[LocalRoundResult] = []
    for cid in selected:
        try:
            results.append(
                client_mod.run_local_round(
                    clients[cid], spec, state.params, hp, algorithm, state.round_index
                )
            )
        except Exception as exc:
            raise RuntimeError(
                f"round {state.round_index} aborted: client {cid} failed"
            ) from exc

    new_params = aggregate(results, uniform=uniform_aggregation)
    accuracy, test_loss = evaluate(spec, new_params, test)

    rewards = [log.reward for r in results for log in r.iteration_logs]
    weights_seen = [log.mean_weight for r in results for log in r.iteration_logs]
    norms = [log.grad_norm_total for r in results for log in r.iteration_logs]
    report = RoundReport(
        round_index=state.round_index,
        selected_clients=selected,
        test_accuracy=accuracy,
        test_loss=test_loss,
        mean_reward=float(np.mean(rewards)) if rewards else 0.0,
        mean_weight=float(np.mean(weights_seen)) if weights_seen else 0.0,
        mean_grad_norm=float(np.mean(norms)) if norms else 0.0,
        per_client_losses={
            cid: tuple(log.loss_labeled for log in r.iteration_logs)
            for cid, r in zip(selected, results)
        },
    )
    return GlobalState(
        seed=state.seed,
        round_index=state.round_index + 1,
        params=new_params,
        client_sizes=state.client_sizes,
        history=state.history + (report,),
    )


def _params_to_json(params: ParamVector) -> dict:
    return {name: arr.tolist() for name, arr in params.items()}


def _params_from_json(d: dict, shapes: dict[str, tuple[int, ...]] | None = None) -> ParamVector:
    pairs = []
    for name, values in d.items():
        arr = np.array(values, dtype=np.float64)
        pairs.append((name, arr))
    return ParamVector.from_pairs(pairs)


def save_checkpoint(path: str | Path, state: GlobalState, clients: list[ClientState]) -> None:
    """Versioned JSON snapshot: global params, history, persistent client state.

    Client datasets are not stored; they are rebuilt deterministically from
    the experiment configuration on resume.
    """
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": state.seed,
        "round_index": state.round_index,
        "params": _params_to_json(state.params),
        "client_sizes": list(state.client_sizes),
        "history": [r.to_dict() for r in state.history],
        "clients": [
            {
                "id": c.id,
                "freg": None
                if c.freg is None
                else {
                    "class_count": c.freg.class_count,
                    "hidden": c.freg.hidden,
                    "params": _params_to_json(c.freg.params),
                },
                "freg_adam": None
                if c.freg_adam is None
                else {
                    "step": c.freg_adam.step,
                    "m": _params_to_json(c.freg_adam.m),
                    "v": _params_to_json(c.freg_adam.v),
                },
            }
            for c in clients
        ],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path: str | Path) -> tuple[GlobalState, dict]:
    """Load a checkpoint; returns the global state and raw per-client entries."""
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    state = GlobalState(
        seed=int(payload["seed"]),
        round_index=int(payload["round_index"]),
        params=_params_from_json(payload["params"]),
        client_sizes=tuple(int(s) for s in payload["client_sizes"]),
        history=tuple(RoundReport.from_dict(r) for r in payload["history"]),
    )
    return state, {int(c["id"]): c for c in payload["clients"]}


def restore_clients(clients: list[ClientState], entries: dict) -> None:
    """Apply checkpointed regulator state onto freshly rebuilt clients."""
    from .regulators import FineRegulator

    for c in clients:
        entry = entries.get(c.id)
        if entry is None:
            continue
        if entry["freg"] is not None:
            f = entry["freg"]
            c.freg = FineRegulator(
                int(f["class_count"]), int(f["hidden"]), _params_from_json(f["params"])
            )
        if entry["freg_adam"] is not None:
            a = entry["freg_adam"]
            c.freg_adam = AdamState(
                step=int(a["step"]),
                m=_params_from_json(a["m"]),
                v=_params_from_json(a["v"]),
            )
