"""Scikit-learn-compatible front end for the federated trainer.

``FederatedSSLClassifier`` follows the semi-supervised convention of
scikit-learn: pass the full feature matrix with ``y == -1`` marking
unlabeled rows. Fitting simulates the configured federation internally and
keeps the final global model for prediction.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn, server
from .client import ClientState, Hyperparams, run_local_round
from .data import AugmentSpec, ClientData, _largest_remainder_counts
from .seeding import TAG_MODEL_INIT, TAG_PARTITION, TAG_SELECTION, derive_rng


class FederatedSSLClassifier(BaseEstimator, ClassifierMixin):
    """Classifier trained by simulated federated semi-supervised rounds.

    Parameters mirror the experiment config: the label/unlabeled pools are
    spread over ``client_count`` simulated clients (evenly or by a Dirichlet
    draw per class), then the selected algorithm runs for ``rounds`` rounds.
    """

    def __init__(
        self,
        algorithm: str = "feddure",
        rounds: int = 30,
        client_count: int = 5,
        clients_per_round: int = 5,
        setting: str = "iid_iid",
        gamma: float = 0.5,
        hidden_widths: tuple[int, ...] = (32, 32),
        freg_hidden: int = 16,
        eta: float = 0.05,
        eta_s: float = 0.05,
        eta_w: float = 0.05,
        batch_size: int = 10,
        local_iters: int = 1,
        tau: float = 0.95,
        weak_noise_sigma: float = 0.0,
        strong_noise_sigma: float = 0.0,
        strong_dropout_prob: float = 0.0,
        random_state: int = 0,
    ):
        self.algorithm = algorithm
        self.rounds = rounds
        self.client_count = client_count
        self.clients_per_round = clients_per_round
        self.setting = setting
        self.gamma = gamma
        self.hidden_widths = hidden_widths
        self.freg_hidden = freg_hidden
        self.eta = eta
        self.eta_s = eta_s
        self.eta_w = eta_w
        self.batch_size = batch_size
        self.local_iters = local_iters
        self.tau = tau
        self.weak_noise_sigma = weak_noise_sigma
        self.strong_noise_sigma = strong_noise_sigma
        self.strong_dropout_prob = strong_dropout_prob
        self.random_state = random_state

    def _allocate(self, indices: np.ndarray, rng: np.random.Generator, dirichlet: bool):
        """Spread an index pool over clients, evenly or by a Dirichlet draw."""
        k = self.client_count
        if dirichlet:
            p = rng.dirichlet(np.full(k, self.gamma))
        else:
            p = np.full(k, 1.0 / k)
        counts = _largest_remainder_counts(p, len(indices))
        return np.split(indices, np.cumsum(counts))[:k]

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        labeled_mask = y != -1
        if not labeled_mask.any():
            raise ValueError("need at least one labeled example (y != -1)")
        self.classes_ = np.unique(y[labeled_mask])
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two labeled classes")
        self.n_features_in_ = X.shape[1]
        class_index = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.array([class_index.get(v, -1) for v in y], dtype=np.int64)

        rng = derive_rng(self.random_state, TAG_PARTITION)
        labeled_dir = self.setting == "dir_dir"
        unlabeled_dir = self.setting in ("iid_dir", "dir_dir")

        lab_shards: list[list[np.ndarray]] = [[] for _ in range(self.client_count)]
        for c in range(len(self.classes_)):
            idx = np.flatnonzero(labeled_mask & (encoded == c))
            rng.shuffle(idx)
            for j, part in enumerate(self._allocate(idx, rng, labeled_dir)):
                lab_shards[j].append(part)
        unl_idx = np.flatnonzero(~labeled_mask)
        rng.shuffle(unl_idx)
        unl_shards = self._allocate(unl_idx, rng, unlabeled_dir)

        clients = []
        for j in range(self.client_count):
            li = np.concatenate(lab_shards[j]) if lab_shards[j] else np.empty(0, np.int64)
            if li.size == 0:
                continue
            clients.append(
                ClientState(
                    id=len(clients),
                    data=ClientData(
                        labeled_features=X[li],
                        labeled_labels=encoded[li],
                        unlabeled_features=X[unl_shards[j]],
                        hidden_unlabeled_labels=None,
                        class_count=len(self.classes_),
                    ),
                )
            )
        if not clients:
            raise ValueError("no client received labeled data")

        spec = nn.MlpSpec((X.shape[1], *self.hidden_widths, len(self.classes_)))
        hp = Hyperparams(
            eta=self.eta,
            eta_s=self.eta_s,
            eta_w=self.eta_w,
            batch_size=self.batch_size,
            local_iters=self.local_iters,
            tau=self.tau,
            augment=AugmentSpec(
                weak_noise_sigma=self.weak_noise_sigma,
                strong_noise_sigma=self.strong_noise_sigma,
                strong_dropout_prob=self.strong_dropout_prob,
            ),
            seed=self.random_state,
            freg_hidden=self.freg_hidden,
        )
        state = server.GlobalState(
            seed=self.random_state,
            round_index=0,
            params=nn.init_params(spec, derive_rng(self.random_state, TAG_MODEL_INIT)),
            client_sizes=tuple(c.sample_weight for c in clients),
        )
        per_round = min(self.clients_per_round, len(clients))
        for _ in range(self.rounds):
            selected = server.select_clients(
                len(clients),
                per_round,
                derive_rng(state.seed, TAG_SELECTION, state.round_index),
            )
            results = [
                run_local_round(
                    clients[cid], spec, state.params, hp, self.algorithm, state.round_index
                )
                for cid in selected
            ]
            state = server.GlobalState(
                seed=state.seed,
                round_index=state.round_index + 1,
                params=server.aggregate(results),
                client_sizes=state.client_sizes,
            )
        self.spec_ = spec
        self.global_params_ = state.params
        self.n_rounds_ = self.rounds
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "global_params_")
        X = check_array(X, dtype=np.float64)
        return nn.forward(self.spec_, self.global_params_, X)

    def predict_proba(self, X) -> np.ndarray:
        return nn.softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        indices = self.decision_function(X).argmax(axis=1)
        return self.classes_[indices]
