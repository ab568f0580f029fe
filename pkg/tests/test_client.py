import numpy as np
import pytest

import fedssl.client as client_mod
import fedssl.regulators as reg
from fedssl import nn
from fedssl.client import (
    ClientState,
    Hyperparams,
    NonFiniteGradientError,
    feddure_local_round,
    fixmatch_local_round,
    run_local_round,
    supervised_local_round,
)
from fedssl.data import AugmentSpec, ClientData, gen_synthetic
from fedssl.seeding import TAG_CLIENT_ROUND, TAG_FREG_INIT, TAG_MODEL_INIT, derive_rng

NO_AUGMENT = AugmentSpec()


def make_client(seed=0, class_count=3, dim=2, labeled=12, unlabeled=40):
    ds = gen_synthetic(class_count, (labeled + unlabeled) // class_count + 1, dim,
                       spread=0.5, seed=seed)
    idx = np.random.default_rng(seed).permutation(len(ds))
    li, ui = idx[:labeled], idx[labeled : labeled + unlabeled]
    data = ClientData(
        labeled_features=ds.features[li],
        labeled_labels=ds.labels[li],
        unlabeled_features=ds.features[ui],
        hidden_unlabeled_labels=ds.labels[ui],
        class_count=class_count,
    )
    return ClientState(id=0, data=data)


def make_spec_and_params(seed=0, class_count=3, dim=2):
    spec = nn.MlpSpec((dim, 6, class_count))
    params = nn.init_params(spec, derive_rng(seed, TAG_MODEL_INIT))
    return spec, params


def hp(**kw):
    defaults = dict(eta=0.05, eta_s=0.05, eta_w=0.05, batch_size=8,
                    local_iters=1, augment=NO_AUGMENT, seed=0, freg_hidden=4)
    defaults.update(kw)
    return Hyperparams(**defaults)


class TestFeddureRound:
    def test_zero_lr_returns_global_params(self):
        state = make_client()
        spec, theta = make_spec_and_params()
        result = feddure_local_round(state, spec, theta, hp(eta=0.0, local_iters=3), 0)
        assert result.updated_params.equals(theta)

    def test_empty_unlabeled_reduces_to_supervised(self):
        state = make_client(unlabeled=0)
        spec, theta = make_spec_and_params()
        r_fed = feddure_local_round(state, spec, theta, hp(local_iters=2), 0)
        r_sup = supervised_local_round(make_client(unlabeled=0), spec, theta,
                                       hp(local_iters=2), 0)
        assert r_fed.updated_params.equals(r_sup.updated_params)
        for log in r_fed.iteration_logs:
            assert log.grad_norm_unlabeled == 0.0
            assert log.grad_norm_reward == 0.0

    def test_one_iteration_matches_term_by_term_oracle(self):
        state = make_client(seed=3)
        spec, theta = make_spec_and_params(seed=3)
        params = hp()
        result = feddure_local_round(state, spec, theta, params, round_index=0)

        # Independent recomputation, following the published iteration order.
        data = state.data
        rng = derive_rng(params.seed, TAG_CLIENT_ROUND, 0, 0)
        lab_idx = rng.choice(data.labeled_count, size=params.batch_size, replace=False)
        unl_idx = rng.choice(data.unlabeled_count, size=params.batch_size, replace=False)
        x_lab = data.labeled_features[lab_idx]
        y_lab = data.labeled_labels[lab_idx]
        u = data.unlabeled_features[unl_idx]
        pseudo = reg.pseudo_label(spec, theta, u, params.augment, rng)
        from fedssl.data import augment

        strong = augment(u, params.augment, "strong", rng)
        freg0 = reg.init_fine_regulator(
            data.class_count, derive_rng(params.seed, TAG_FREG_INIT, 0), params.freg_hidden
        )
        step = reg.freg_update(freg0, spec, theta, x_lab, y_lab, strong, pseudo,
                               params.meta_config())
        phi1 = reg.creg_one_step(spec, theta, step.regulator, strong, pseudo, params.eta_s)
        m = reg.instance_weights(spec, theta, step.regulator, strong)
        g_u = nn.grad(spec, theta, strong, pseudo, m / len(m))
        d = reg.entropy_difference(spec, theta, phi1, x_lab, y_lab).value
        g_d = d * nn.grad(spec, theta, strong, pseudo)
        g_s = nn.grad(spec, theta, x_lab, y_lab)
        from fedssl.params import sgd_step

        expected = sgd_step(theta, g_s + g_u + g_d, params.eta)
        assert result.updated_params.equals(expected)
        assert result.iteration_logs[0].reward == d

    def test_round_start_initialization_bit_exact(self):
        # Both the local model (via pseudo-labeling) and the coarse regulator
        # (via the meta update) must see the global parameters untouched.
        state = make_client()
        spec, theta = make_spec_and_params()
        seen = {}
        original_pseudo = reg.pseudo_label
        original_update = reg.freg_update

        def spy_pseudo(spec_, params, *args, **kwargs):
            seen.setdefault("theta", params)
            return original_pseudo(spec_, params, *args, **kwargs)

        def spy_update(freg, spec_, phi, *args, **kwargs):
            seen.setdefault("phi", phi)
            return original_update(freg, spec_, phi, *args, **kwargs)

        reg.pseudo_label, reg.freg_update = spy_pseudo, spy_update
        try:
            feddure_local_round(state, spec, theta, hp(), 0)
        finally:
            reg.pseudo_label, reg.freg_update = original_pseudo, original_update
        assert seen["theta"] is theta
        assert seen["phi"] is theta

    def test_schedule_weight_update_before_creg_update(self):
        state = make_client()
        spec, theta = make_spec_and_params()
        calls = []
        original_update = reg.freg_update
        original_step = reg.creg_one_step

        def spy_update(*args, **kwargs):
            calls.append(("freg_update", None))
            return original_update(*args, **kwargs)

        def spy_step(spec_, phi, freg, *args, **kwargs):
            calls.append(("creg_one_step", freg))
            return original_step(spec_, phi, freg, *args, **kwargs)

        reg.freg_update, reg.creg_one_step = spy_update, spy_step
        try:
            result = feddure_local_round(state, spec, theta, hp(), 0)
        finally:
            reg.freg_update, reg.creg_one_step = original_update, original_step

        # One meta update, then the persistent step with the NEW weights.
        order = [name for name, _ in calls]
        assert order[0] == "freg_update"
        outer_steps = [f for name, f in calls if name == "creg_one_step"]
        # the outer persistent step (last creg call) received the updated regulator
        assert outer_steps[-1] is state.freg

    def test_deterministic_per_seed_client_round(self):
        spec, theta = make_spec_and_params()
        r1 = feddure_local_round(make_client(), spec, theta, hp(), round_index=2)
        r2 = feddure_local_round(make_client(), spec, theta, hp(), round_index=2)
        assert r1.updated_params.equals(r2.updated_params)
        assert r1.iteration_logs == r2.iteration_logs

    def test_different_rounds_differ(self):
        spec, theta = make_spec_and_params()
        r1 = feddure_local_round(make_client(), spec, theta, hp(), round_index=0)
        r2 = feddure_local_round(make_client(), spec, theta, hp(), round_index=1)
        assert not r1.updated_params.equals(r2.updated_params)

    def test_reduction_to_fixmatch_with_threshold_zero(self):
        # Weights pinned to 1 and reward pinned to 0 must reproduce the
        # fixmatch step with an always-passing threshold, bit for bit.
        spec, theta = make_spec_and_params(seed=5)
        forced = hp(force_unit_weights=True, force_zero_reward=True, local_iters=4)
        passthrough = hp(tau=1e-9, local_iters=4)
        r_fed = feddure_local_round(make_client(seed=5), spec, theta, forced, 0)
        r_fix = fixmatch_local_round(make_client(seed=5), spec, theta, passthrough, 0)
        assert r_fed.updated_params.equals(r_fix.updated_params)

    def test_freg_persists_across_rounds_by_default(self):
        spec, theta = make_spec_and_params()
        # default: round 1 continues training the regulator left by round 0
        persistent = make_client()
        feddure_local_round(persistent, spec, theta, hp(), 0)
        after_round_0 = persistent.freg.params
        feddure_local_round(persistent, spec, theta, hp(), 1)
        assert not persistent.freg.params.equals(after_round_0)

        # reset flag: round 1 starts from the seeded initializer again, so a
        # state that skipped round 0 ends up with the identical regulator
        resetting = make_client()
        feddure_local_round(resetting, spec, theta, hp(freg_reset_each_round=True), 0)
        feddure_local_round(resetting, spec, theta, hp(freg_reset_each_round=True), 1)
        fresh = make_client()
        feddure_local_round(fresh, spec, theta, hp(freg_reset_each_round=True), 1)
        assert resetting.freg.params.equals(fresh.freg.params)

    def test_adam_optimizer_runs_and_is_deterministic(self):
        spec, theta = make_spec_and_params()
        r1 = feddure_local_round(make_client(), spec, theta, hp(optimizer="adam"), 0)
        r2 = feddure_local_round(make_client(), spec, theta, hp(optimizer="adam"), 0)
        assert r1.updated_params.equals(r2.updated_params)
        assert not r1.updated_params.equals(theta)

    def test_empty_labeled_set_rejected(self):
        state = make_client()
        object.__setattr__(state.data, "labeled_features", np.zeros((0, 2)))
        object.__setattr__(state.data, "labeled_labels", np.zeros(0, dtype=np.int64))
        spec, theta = make_spec_and_params()
        with pytest.raises(ValueError, match="no labeled data"):
            feddure_local_round(state, spec, theta, hp(), 0)

    def test_nonfinite_gradient_names_term(self):
        state = make_client()
        spec, theta = make_spec_and_params()
        original = nn.grad

        def exploding_grad(spec_, params, batch, targets, per_example_weights=None):
            g = original(spec_, params, batch, targets, per_example_weights)
            if per_example_weights is not None:
                bad = {n: np.full_like(a, np.inf) for n, a in g.items()}
                broken = g.zeros_like()
                object.__setattr__(
                    broken, "arrays", tuple(bad[n] for n in broken.names)
                )
                return broken
            return g

        client_mod.nn.grad = exploding_grad
        try:
            with pytest.raises(NonFiniteGradientError, match="g_u"):
                feddure_local_round(state, spec, theta, hp(), 0)
        finally:
            client_mod.nn.grad = original


class TestSupervisedRound:
    def test_zero_lr_identity(self):
        state = make_client()
        spec, theta = make_spec_and_params()
        result = supervised_local_round(state, spec, theta, hp(eta=0.0), 0)
        assert result.updated_params.equals(theta)

    def test_learns_separable_blobs(self):
        ds = gen_synthetic(3, 60, 2, spread=0.2, seed=0)
        data = ClientData(
            labeled_features=ds.features,
            labeled_labels=ds.labels,
            unlabeled_features=np.zeros((0, 2)),
            hidden_unlabeled_labels=np.zeros(0, dtype=np.int64),
            class_count=3,
        )
        state = ClientState(id=0, data=data)
        spec, theta = make_spec_and_params()
        result = supervised_local_round(
            state, spec, theta, hp(eta=0.1, batch_size=20, local_iters=200), 0
        )
        logits = nn.forward(spec, result.updated_params, ds.features)
        accuracy = (logits.argmax(axis=1) == ds.labels).mean()
        assert accuracy >= 0.95

    def test_single_example_loss_strictly_decreases(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2))
        data = ClientData(
            labeled_features=np.repeat(x, 4, axis=0),
            labeled_labels=np.full(4, 1, dtype=np.int64),
            unlabeled_features=np.zeros((0, 2)),
            hidden_unlabeled_labels=np.zeros(0, dtype=np.int64),
            class_count=3,
        )
        state = ClientState(id=0, data=data)
        spec, theta = make_spec_and_params()
        result = supervised_local_round(
            state, spec, theta, hp(eta=0.05, batch_size=4, local_iters=5), 0
        )
        losses = [log.loss_labeled for log in result.iteration_logs]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_local_epochs_convert_to_iterations(self):
        state = make_client(labeled=12, unlabeled=40)  # 52 examples
        spec, theta = make_spec_and_params()
        result = supervised_local_round(
            state, spec, theta, hp(local_iters=1, local_epochs=2, batch_size=10), 0
        )
        assert len(result.iteration_logs) == 2 * 6  # ceil(52/10) = 6 per epoch


class TestFixmatchRound:
    def test_threshold_near_one_reduces_to_supervised(self):
        # zero params -> uniform softmax 1/3 < tau
        state = make_client(seed=2)
        spec, _ = make_spec_and_params(seed=2)
        theta = nn.init_params(spec, derive_rng(9, TAG_MODEL_INIT)).zeros_like()
        r_fix = fixmatch_local_round(state, spec, theta, hp(tau=0.999999), 0)
        assert all(log.mean_weight == 0.0 for log in r_fix.iteration_logs)
        assert all(log.grad_norm_unlabeled == 0.0 for log in r_fix.iteration_logs)

    def test_threshold_at_uniform_passes_everything(self):
        state = make_client(seed=2)
        spec, theta = make_spec_and_params(seed=2)
        result = fixmatch_local_round(state, spec, theta, hp(tau=1.0 / 3.0), 0)
        assert all(log.mean_weight == 1.0 for log in result.iteration_logs)

    def test_masked_loss_matches_hand_filtered_oracle(self):
        state = make_client(seed=4)
        spec, theta = make_spec_and_params(seed=4)
        params = hp(tau=0.5)
        result = fixmatch_local_round(state, spec, theta, params, 0)

        data = state.data
        rng = derive_rng(params.seed, TAG_CLIENT_ROUND, 0, 0)
        lab_idx = rng.choice(data.labeled_count, size=params.batch_size, replace=False)
        unl_idx = rng.choice(data.unlabeled_count, size=params.batch_size, replace=False)
        from fedssl.data import augment

        u = data.unlabeled_features[unl_idx]
        weak = augment(u, params.augment, "weak", rng)
        weak_logits = nn.forward(spec, theta, weak)
        pseudo = weak_logits.argmax(axis=1)
        conf = nn.softmax(weak_logits).max(axis=1)
        keep = np.flatnonzero(conf >= params.tau)
        strong = augment(u, params.augment, "strong", rng)
        assert 0 < len(keep) < len(u), "oracle should exercise a partial mask"

        x_lab = data.labeled_features[lab_idx]
        y_lab = data.labeled_labels[lab_idx]
        g_s = nn.grad(spec, theta, x_lab, y_lab)
        # hand-filtered: only kept indices contribute, scaled by 1/batch
        per_grads = [
            nn.grad(spec, theta, strong[i : i + 1], pseudo[i : i + 1])
            for i in keep
        ]
        g_u = per_grads[0] * (1.0 / len(u))
        for g in per_grads[1:]:
            g_u = g_u + g * (1.0 / len(u))
        from fedssl.params import sgd_step

        expected = sgd_step(theta, g_s + g_u, params.eta)
        assert result.updated_params.allclose(expected, rtol=1e-12, atol=1e-15)

    def test_dispatch_by_algorithm_name(self):
        spec, theta = make_spec_and_params()
        for name in ("feddure", "fedavg_supervised", "fedavg_fixmatch"):
            result = run_local_round(make_client(), spec, theta, hp(), name, 0)
            assert result.sample_weight == 52
        with pytest.raises(ValueError, match="unknown algorithm"):
            run_local_round(make_client(), spec, theta, hp(), "fedprox", 0)
