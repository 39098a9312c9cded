import math
import struct

import numpy as np
import pytest

from memgap.diffusion import Dataset, DiffusionSchedule, DomainError, alpha_sigma
from memgap.gap import dsm_loss_at_t
from memgap.net import (
    AdamState,
    CheckpointError,
    MlpScoreNet,
    NetworkScore,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    dsm_step_loss_and_grads,
    forward_eps,
    forward_score,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    score_vjp_x,
    time_features,
    trace_to_csv,
    train,
)
from memgap.scores import empirical_score


def random_batch(rs, m, d, sched):
    return rs.normal(size=(m, d)), rs.uniform(sched.t0, sched.T, m), rs.normal(size=(m, d))


def perturb_biases(net, rs, scale=0.3):
    # nonzero biases move ReLU kinks away from the origin and exercise bias grads
    for b in net.biases:
        b += scale * rs.normal(size=b.shape)
    return net


class TestInit:
    def test_dims_and_count(self):
        net = init_mlp(3, [16, 8], fourier_pairs=4, seed=0)
        assert net.layer_dims == [3 + 9, 16, 8, 3]
        assert net.param_count == sum((a + 1) * b for a, b in zip(net.layer_dims[:-1], net.layer_dims[1:]))

    def test_no_hidden_layers(self, sched):
        net = init_mlp(2, [], fourier_pairs=2, seed=0)
        assert net.layer_dims == [7, 2] and net.n_hidden_units == 0
        assert forward_score(net, np.ones(2), 0.5, sched).shape == (2,)

    def test_deterministic(self):
        a, b = init_mlp(2, [32, 32], seed=4), init_mlp(2, [32, 32], seed=4)
        assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))

    def test_he_scale(self):
        net = init_mlp(2, [2000], seed=1)
        W = net.weights[1]
        assert abs(W.var() * 2000 / 2.0 - 1.0) < 0.05
        assert all(np.all(b == 0) for b in net.biases)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            init_mlp(2, [0])


class TestForward:
    def test_time_features(self, sched):
        tf = time_features(np.array([1.25]), sched, 2, 1)
        u = 1.25 / sched.T
        ref = [math.sin(math.pi * u), math.sin(2 * math.pi * u), math.cos(math.pi * u), math.cos(2 * math.pi * u), math.sqrt(alpha_sigma(sched, 1.25)[1])]
        assert np.allclose(tf[0], ref, atol=1e-15)

    def test_zero_params(self, sched):
        net = init_mlp(2, [8, 8], seed=0)
        for p in net.params():
            p[...] = 0
        x = np.random.default_rng(0).normal(size=(10, 2))
        assert np.all(forward_score(net, x, 0.3, sched) == 0)

    def test_eps_parameterization(self, sched):
        net = init_mlp(2, [8], seed=0)
        x = np.random.default_rng(1).normal(size=(5, 2))
        t = 0.7
        assert np.allclose(forward_score(net, x, t, sched), -forward_eps(net, x, t, sched) / math.sqrt(alpha_sigma(sched, t)[1]), atol=1e-14)

    def test_full_layer_mask_is_bias_propagation(self, sched):
        rs = np.random.default_rng(2)
        net = perturb_biases(init_mlp(2, [6, 5], seed=2), rs)
        net.masks[0][:] = 0
        x = rs.normal(size=(4, 2))
        h1 = np.maximum(net.biases[1], 0) * net.masks[1]
        ref = h1 @ net.weights[2] + net.biases[2]
        assert np.allclose(forward_eps(net, x, 0.4, sched), np.broadcast_to(ref, (4, 2)), atol=1e-14)

    def test_mask_linearity(self, sched):
        rs = np.random.default_rng(3)
        net = perturb_biases(init_mlp(2, [10, 7], seed=3), rs)
        net.masks[0][[1, 4]] = 0
        net.masks[1][[0]] = 0
        zeroed = net.copy()
        for layer, m in enumerate(zeroed.masks):
            zeroed.weights[layer][:, m == 0] = 0
            zeroed.biases[layer][m == 0] = 0
            zeroed.weights[layer + 1][m == 0, :] = 0
            zeroed.masks[layer][:] = 1
        x = rs.normal(size=(20, 2))
        assert np.allclose(forward_eps(net, x, 0.2, sched), forward_eps(zeroed, x, 0.2, sched), atol=1e-14)

    def test_domain(self, sched):
        net = init_mlp(2, [4], seed=0)
        with pytest.raises(DomainError):
            forward_score(net, np.zeros(2), 1e-4, sched)
        with pytest.raises(DomainError):
            forward_score(net, np.zeros(3), 0.5, sched)

    def test_input_gradient_fd(self, sched):
        rs = np.random.default_rng(4)
        for trial in range(10):
            net = perturb_biases(init_mlp(2, [8, 8], seed=trial), rs)
            x, t = rs.normal(size=2), float(rs.uniform(0.05, 3.0))
            s = forward_score(net, x, t, sched)
            analytic = 2 * score_vjp_x(net, x, t, sched, s)
            h = 1e-6
            fd = np.array([(np.sum(forward_score(net, x + h * e, t, sched) ** 2) - np.sum(forward_score(net, x - h * e, t, sched) ** 2)) / (2 * h) for e in np.eye(2)])
            assert np.max(np.abs(analytic - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))

    def test_network_field_chunks(self, sched):
        net = init_mlp(2, [8], seed=0)
        x = np.random.default_rng(5).normal(size=(50, 2))
        # BLAS blocking may differ by batch shape, so agreement is to rounding
        assert np.allclose(NetworkScore(net, sched, chunk=7).score(x, 0.5), forward_score(net, x, 0.5, sched), rtol=1e-13, atol=1e-14)


class TestLossAndGrads:
    def test_zero_network_loss(self, sched):
        net = init_mlp(2, [8], seed=0)
        for p in net.params():
            p[...] = 0
        rs = np.random.default_rng(0)
        x0, t, z = random_batch(rs, 16, 2, sched)
        loss, _ = dsm_step_loss_and_grads(net, x0, t, z, sched)
        assert loss == pytest.approx(np.mean(np.sum(z * z, axis=1)), rel=1e-14)

    def test_eq1_raw_identity(self, sched):
        net = init_mlp(2, [8], seed=1)
        rs = np.random.default_rng(1)
        x0, _, z = random_batch(rs, 16, 2, sched)
        t = np.full(16, 0.3)
        a, _ = dsm_step_loss_and_grads(net, x0, t, z, sched, "eps_matching")
        b, _ = dsm_step_loss_and_grads(net, x0, t, z, sched, "eq1_raw")
        assert b == pytest.approx(a / alpha_sigma(sched, 0.3)[1], rel=1e-13)

    def test_eq1_raw_matches_score_form(self, sched):
        net = init_mlp(2, [8], seed=2)
        rs = np.random.default_rng(2)
        x0, t, z = random_batch(rs, 8, 2, sched)
        a, s2 = alpha_sigma(sched, t)
        xt = a[:, None] * x0 + np.sqrt(s2)[:, None] * z
        s = np.stack([forward_score(net, xt[i], t[i], sched) for i in range(8)])
        ref = np.mean(np.sum((-z / np.sqrt(s2)[:, None] - s) ** 2, axis=1))
        loss, _ = dsm_step_loss_and_grads(net, x0, t, z, sched, "eq1_raw")
        assert loss == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("case", range(50))
    def test_gradients_fd(self, sched, case):
        rs = np.random.default_rng(100 + case)
        hidden = [[8], [8, 8], [8, 6, 5]][case % 3]
        net = perturb_biases(init_mlp(2, hidden, fourier_pairs=2, seed=case), rs)
        if case % 5 == 0:
            net.masks[0][0] = 0
        x0, t, z = random_batch(rs, 6, 2, sched)
        weighting = "eq1_raw" if case % 4 == 0 else "eps_matching"
        _, grads = dsm_step_loss_and_grads(net, x0, t, z, sched, weighting)
        h = 1e-6
        for p, g in zip(net.params(), grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                lp, _ = dsm_step_loss_and_grads(net, x0, t, z, sched, weighting)
                flat[k] = old - h
                lm, _ = dsm_step_loss_and_grads(net, x0, t, z, sched, weighting)
                flat[k] = old
                fd = (lp - lm) / (2 * h)
                assert abs(gflat[k] - fd) <= 1e-5 * max(abs(fd), 1e-2 * max(1.0, np.max(np.abs(gflat)))), (k, gflat[k], fd)

    def test_masked_units_get_zero_gradient(self, sched):
        net = init_mlp(2, [6, 6], seed=3)
        net.masks[0][2] = 0
        rs = np.random.default_rng(3)
        _, grads = dsm_step_loss_and_grads(net, *random_batch(rs, 10, 2, sched), sched)
        assert np.all(grads[0][:, 2] == 0) and grads[1][2] == 0 and np.all(grads[2][2, :] == 0)

    def test_shape_errors(self, sched):
        net = init_mlp(2, [4], seed=0)
        with pytest.raises(ValueError):
            dsm_step_loss_and_grads(net, np.zeros((3, 2)), np.full(2, 0.5), np.zeros((3, 2)), sched)
        with pytest.raises(ValueError):
            dsm_step_loss_and_grads(net, np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), sched)


class TestAdamW:
    def test_decoupled_decay_exact(self):
        params = [np.array([[1.0, -2.0]]), np.array([3.0])]
        state = AdamState.zeros_like(params)
        cfg = TrainConfig(lr=0.01, weight_decay=0.1)
        adamw_step(params, [np.zeros((1, 2)), np.zeros(1)], state, cfg, decay_flags=[True, False])
        assert np.array_equal(params[0], np.array([[1.0, -2.0]]) * (1 - 0.001))
        assert params[1][0] == 3.0

    def test_geometric_norm_decay(self):
        W = np.random.default_rng(0).normal(size=(4, 4))
        params = [W.copy()]
        state = AdamState.zeros_like(params)
        cfg = TrainConfig(lr=0.05, weight_decay=0.2)
        for _ in range(10):
            adamw_step(params, [np.zeros((4, 4))], state, cfg)
        assert np.allclose(params[0], W * (1 - 0.01) ** 10, rtol=1e-14)

    def test_unit_step_property(self):
        params = [np.array([0.0])]
        state = AdamState.zeros_like(params)
        cfg = TrainConfig(lr=1e-3)
        prev = 0.0
        for _ in range(2000):
            adamw_step(params, [np.array([0.37])], state, cfg)
            step = prev - params[0][0]
            prev = params[0][0]
        assert abs(step - 1e-3) < 1e-9

    def test_frozen_entries(self):
        params = [np.ones((2, 2))]
        state = AdamState.zeros_like(params)
        frozen = [np.array([[1.0, 0.0], [1.0, 0.0]])]
        adamw_step(params, [np.ones((2, 2))], state, TrainConfig(lr=0.1, weight_decay=0.5), frozen=frozen)
        assert np.all(params[0][:, 1] == 1.0) and np.all(params[0][:, 0] < 1.0)
        assert np.all(state.m[0][:, 1] == 0) and np.all(state.v[0][:, 1] == 0)

    def test_cosine_schedule(self):
        cfg = TrainConfig(steps=100, lr=1e-2, lr_schedule="cosine")
        assert cfg.lr_at(1) == pytest.approx(1e-2)
        assert cfg.lr_at(51) == pytest.approx(5e-3)
        assert TrainConfig(lr=1e-2).lr_at(77) == 1e-2

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"weight_decay": -1}, {"batch": 0}, {"t_sampling": "x"}, {"loss_weighting": "x"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrain:
    def test_overfit_single_point(self, sched):
        data = Dataset.from_points([[0.8]])
        net = init_mlp(1, [32], seed=0)
        cfg = TrainConfig(steps=2000, seed=0)
        trained, trace = train(net, data, cfg, sched)
        assert trace[-1][1] <= 1.2
        probes = np.linspace(-1.5, 1.5, 31)[:, None]
        errs = []
        for t in (0.5, 1.0, 2.0):
            ref = empirical_score(data, probes, t, sched)[0]
            errs.append(np.mean((forward_score(trained, probes, t, sched) - ref) ** 2))
        assert math.sqrt(np.mean(errs)) <= 0.1

    def test_zero_steps(self, sched, data64):
        net = init_mlp(2, [8], seed=0)
        out, trace = train(net, data64, TrainConfig(steps=0), sched)
        assert trace == [] and all(np.array_equal(p, q) for p, q in zip(net.params(), out.params()))

    def test_deterministic(self, sched, data64):
        cfg = TrainConfig(steps=150, seed=3, log_every=50)
        a, ta = train(init_mlp(2, [16], seed=0), data64, cfg, sched)
        b, tb = train(init_mlp(2, [16], seed=0), data64, cfg, sched)
        assert ta == tb and all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
        assert [s for s, _ in ta] == [50, 100, 150]

    def test_input_not_modified(self, sched, data64):
        net = init_mlp(2, [8], seed=0)
        before = [p.copy() for p in net.params()]
        train(net, data64, TrainConfig(steps=10), sched)
        assert all(np.array_equal(p, q) for p, q in zip(before, net.params()))

    def test_masked_units_stay_frozen(self, sched, data64):
        net = init_mlp(2, [8, 8], seed=0)
        net.masks[0][[1, 3]] = 0
        out, _ = train(net, data64, TrainConfig(steps=50, weight_decay=0.1), sched)
        assert np.array_equal(out.weights[0][:, [1, 3]], net.weights[0][:, [1, 3]])
        assert np.array_equal(out.weights[1][[1, 3], :], net.weights[1][[1, 3], :])
        assert np.array_equal(out.masks[0], net.masks[0])

    def test_divergence_guard(self, sched, data64):
        net = init_mlp(2, [8], seed=0)
        net.weights[0][...] = np.nan
        with pytest.raises(TrainingDiverged):
            train(net, data64, TrainConfig(steps=5), sched)

    def test_beta_time_sampling_runs(self, sched, data64):
        _, trace = train(init_mlp(2, [8], seed=0), data64, TrainConfig(steps=20, t_sampling="beta", t_beta=(0.8, 2.0), log_every=10), sched)
        assert len(trace) == 2

    def test_loss_decreases_over_checkpoints(self, sched, data64):
        net = init_mlp(2, [32, 32], seed=0)
        losses = []
        for steps in (100, 200, 400):
            trained, _ = train(net, data64, TrainConfig(steps=steps, seed=1, lr=3e-3), sched)
            ests = [dsm_loss_at_t(NetworkScore(trained, sched), data64, t, sched, 20_000, 5) for t in (0.3, 1.0)]
            losses.append(sum(e.mean for e in ests))
        assert losses[0] > losses[1] > losses[2]

    def test_trace_csv(self):
        assert trace_to_csv([(100, 1.5)]) == "step,loss\n100,1.5\n"


class TestCheckpoint:
    def test_roundtrip_bitwise(self, sched, tmp_path):
        net = init_mlp(2, [16, 8], seed=3)
        net.masks[1][2] = 0
        net.meta = {"step": 7, "final_loss": 1.25}
        p = tmp_path / "m.ckpt"
        save_checkpoint(net, p)
        back = load_checkpoint(p)
        x = np.random.default_rng(0).normal(size=(100, 2))
        assert forward_eps(net, x, 0.3, sched).tobytes() == forward_eps(back, x, 0.3, sched).tobytes()
        assert back.meta == net.meta and np.array_equal(back.masks[1], net.masks[1])
        assert p.read_bytes()[:8] == b"MEMGAP01"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(init_mlp(2, [4], seed=0), p)
        p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_version_bump(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(init_mlp(2, [4], seed=0), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:8] + struct.pack("<I", 2) + raw[12:])
        with pytest.raises(CheckpointError, match="version 2"):
            load_checkpoint(p)

    def test_truncation(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(init_mlp(2, [4], seed=0), p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
