"""Tests for the loss functions, their gradients, buffers, and training."""

import math

import numpy as np
import pytest

from reachcert.certificate import CertMode, Spec
from reachcert.learner import (
    LossConfig,
    LossTraceRow,
    SampleBuffers,
    k_prime,
    loss_and_gradients,
    loss_decrease,
    loss_init,
    loss_unsafe,
    sample_noise,
    train_iteration,
)
from reachcert.nets import Layer, Network, forward, make_network, mlp
from reachcert.systems import get_system

from conftest import random_net

TOY = get_system("toy-1d")
LOG_SPEC = Spec(0.9, CertMode.LOG_RASM)
PLAIN_SPEC = Spec(0.9, CertMode.RASM)


def const_net(in_dim, c):
    return make_network([np.zeros((1, in_dim))], [np.array([c])], ["id"])


def vee_net(slope=4.5, bias=-1.4):
    return make_network(
        [np.array([[1.0], [-1.0]]), np.array([[slope, slope]])],
        [np.zeros(2), np.array([bias])],
        ["relu", "id"],
    )


def zero_policy(in_dim, out_dim):
    return make_network(
        [np.zeros((out_dim, in_dim))], [np.zeros(out_dim)], ["id"]
    )


def scaled_net(rng, dims, scale):
    net = random_net(rng, dims=dims)
    layers = [Layer(l.A * scale, l.b * scale, l.act) for l in net.layers]
    return Network(tuple(layers))


# --------------------------------------------------------------------------
# loss values


class TestLossInit:
    def test_below_margin_is_zero(self):
        V = const_net(1, -0.2)
        assert loss_init(V, np.array([[0.1]]), LOG_SPEC, eps=0.1) == 0.0

    def test_above_margin(self):
        V = const_net(1, 0.05)
        out = loss_init(V, np.array([[0.1]]), LOG_SPEC, eps=0.1)
        assert out == pytest.approx(0.15, abs=1e-12)

    def test_deeply_negative_batch(self):
        V = vee_net(bias=-5.0)
        pts = np.linspace(-0.2, 0.2, 7)[:, None]
        assert loss_init(V, pts, LOG_SPEC) == 0.0

    def test_empty_batch(self):
        V = const_net(1, 10.0)
        assert loss_init(V, np.empty((0, 1)), LOG_SPEC) == 0.0

    def test_plain_mode_shifts_by_one(self):
        V = const_net(1, 1.05)
        out = loss_init(V, np.array([[0.0]]), PLAIN_SPEC, eps=0.1)
        assert out == pytest.approx(0.15, abs=1e-12)

    def test_max_semantics(self):
        V = vee_net(slope=1.0, bias=0.0)
        pts = np.array([[0.0], [0.2], [0.05]])
        solo = loss_init(V, pts[1:2], LOG_SPEC)
        assert loss_init(V, pts, LOG_SPEC) == pytest.approx(solo, abs=1e-12)


class TestLossUnsafe:
    def test_worked_value(self):
        V = const_net(1, 2.0)
        out = loss_unsafe(V, np.array([[0.95]]), LOG_SPEC, eps=0.1)
        t = math.log(10.0)
        assert out == pytest.approx((t - 2.0 + 0.1) / t, abs=1e-12)
        assert out == pytest.approx(0.17485, abs=1e-4)

    def test_exactly_at_margin_is_zero(self):
        V = const_net(1, LOG_SPEC.threshold + 0.1)
        assert loss_unsafe(V, np.array([[0.95]]), LOG_SPEC, eps=0.1) == 0.0

    def test_only_worst_point_matters(self):
        V = vee_net(slope=1.0, bias=0.0)
        pts = np.array([[0.9], [0.95], [1.0]])
        solo = loss_unsafe(V, pts[:1], LOG_SPEC)  # lowest value: worst
        assert loss_unsafe(V, pts, LOG_SPEC) == pytest.approx(solo, abs=1e-12)

    def test_plain_mode_scaling(self):
        spec = Spec(0.5, CertMode.RASM)
        V = const_net(1, 1.5)
        out = loss_unsafe(V, np.array([[0.95]]), spec, eps=0.1)
        assert out == pytest.approx(0.5 * (2.0 - 1.5 + 0.1), abs=1e-12)

    def test_empty_batch(self):
        V = const_net(1, 0.0)
        assert loss_unsafe(V, np.empty((0, 1)), LOG_SPEC) == 0.0


class TestLossDecrease:
    def test_constant_certificate_gives_eps_prime(self):
        # aggregate equals the constant, K' vanishes with L_V = 0, so only
        # the strictness margin remains
        V = const_net(1, 1.3)
        pi = zero_policy(1, 1)
        cfg = LossConfig(tau=0.01, eps_prime=0.01, n_noise=8)
        rng = np.random.default_rng(0)
        pts = np.array([[0.5], [0.7], [-0.4]])
        for spec in (LOG_SPEC, PLAIN_SPEC):
            out = loss_decrease(V, pi, TOY, pts, spec, cfg, rng)
            assert out == pytest.approx(0.01, abs=1e-12)

    def test_zero_on_decreasing_fixture(self):
        from dataclasses import replace

        det = replace(TOY, f_raw=lambda xs, us, ws: 0.5 * xs)
        V = vee_net()
        pi = zero_policy(1, 1)
        cfg = LossConfig(tau=0.001, eps_prime=0.01, n_noise=4)
        rng = np.random.default_rng(1)
        pts = np.array([[0.5], [0.9], [-0.7], [0.3]])
        out = loss_decrease(V, pi, det, pts, LOG_SPEC, cfg, rng)
        assert out == 0.0

    def test_empty_batch(self):
        V = const_net(1, 0.0)
        pi = zero_policy(1, 1)
        cfg = LossConfig()
        rng = np.random.default_rng(2)
        assert loss_decrease(V, pi, TOY, np.empty((0, 1)), LOG_SPEC, cfg, rng) == 0.0


class TestKPrime:
    def test_toy_vee_value(self):
        V = vee_net()
        pi = zero_policy(1, 1)
        kp, L_V, L_pi = k_prime(V, pi, TOY)
        assert L_V == pytest.approx(9.0)  # product bound: 2 * 4.5
        assert L_pi == 0.0
        assert kp == pytest.approx(9.0 * (0.5 * 1.0 + 1.0))

    def test_split_not_larger_on_linear_sys(self):
        sys = get_system("linear-sys")
        rng = np.random.default_rng(3)
        V = random_net(rng, dims=[2, 6, 1])
        pi = random_net(rng, dims=[2, 4, 1])
        kp_joint, L_V, L_pi = k_prime(V, pi, sys, split=False)
        kp_split, _, _ = k_prime(V, pi, sys, split=True)
        assert L_pi > 0.0
        assert kp_split <= kp_joint
        assert kp_split == pytest.approx(L_V * (1.0 + 0.95 * L_pi + 1.0))


# --------------------------------------------------------------------------
# gradients against finite differences


def _with_layer(net, k, layer):
    layers = list(net.layers)
    layers[k] = layer
    return Network(tuple(layers))


def fd_grads(objective, net, h=1e-6):
    dA, db = [], []
    for k, layer in enumerate(net.layers):
        gA = np.zeros_like(layer.A)
        for idx in np.ndindex(layer.A.shape):
            Ap, Am = layer.A.copy(), layer.A.copy()
            Ap[idx] += h
            Am[idx] -= h
            gA[idx] = (
                objective(_with_layer(net, k, Layer(Ap, layer.b, layer.act)))
                - objective(_with_layer(net, k, Layer(Am, layer.b, layer.act)))
            ) / (2 * h)
        gb = np.zeros_like(layer.b)
        for i in range(layer.b.shape[0]):
            bp, bm = layer.b.copy(), layer.b.copy()
            bp[i] += h
            bm[i] -= h
            gb[i] = (
                objective(_with_layer(net, k, Layer(layer.A, bp, layer.act)))
                - objective(_with_layer(net, k, Layer(layer.A, bm, layer.act)))
            ) / (2 * h)
        dA.append(gA)
        db.append(gb)
    return dA, db


def _grad_close(analytic, numeric, rel=1e-3, atol=1e-7):
    for a, n in zip(analytic, numeric):
        assert np.allclose(a, n, rtol=rel, atol=atol), (a, n)


class TestLossGradients:
    def _setup(self, seed, mode, split):
        sys = get_system("linear-sys")
        spec = Spec(0.9, mode)
        rng = np.random.default_rng(seed)
        V = scaled_net(rng, [2, 4, 1], 0.4)
        pi = scaled_net(rng, [2, 3, 1], 0.1)
        cfg = LossConfig(
            tau=0.02, eps=0.1, eps_prime=0.05, n_noise=6, alpha=10.0, split_k=split
        )
        p0 = sys.X0.sample(rng, 6)
        pu = sys.XU.sample(rng, 6)
        pe = rng.uniform(-0.5, 0.5, (8, 2))
        ws = sample_noise(sys, rng, len(pe) * cfg.n_noise)
        # regenerate when a hinge or clamp sits too close to its kink for
        # central differences to be trustworthy
        values, gV, gPi = loss_and_gradients(V, pi, sys, spec, cfg, p0, pu, pe, ws)
        raw_u = forward(pi, pe)
        clear = (
            np.min(np.abs(raw_u - sys.U.lo)) > 1e-3
            and np.min(np.abs(raw_u - sys.U.hi)) > 1e-3
        )
        return sys, spec, cfg, V, pi, p0, pu, pe, ws, values, gV, gPi, clear

    @pytest.mark.parametrize("mode", [CertMode.LOG_RASM, CertMode.RASM])
    @pytest.mark.parametrize("split", [False, True])
    def test_matches_finite_differences(self, mode, split):
        matched = 0
        for seed in range(8):
            out = self._setup(seed, mode, split)
            sys, spec, cfg, V, pi, p0, pu, pe, ws, values, gV, gPi, clear = out
            if not clear or values.total == 0.0:
                continue

            def total_v(net):
                vals, _, _ = loss_and_gradients(
                    net, pi, sys, spec, cfg, p0, pu, pe, ws
                )
                return vals.total

            def total_pi(net):
                vals, _, _ = loss_and_gradients(
                    V, net, sys, spec, cfg, p0, pu, pe, ws
                )
                return vals.total

            fa, fb = fd_grads(total_v, V)
            _grad_close(gV.dA, fa)
            _grad_close(gV.db, fb)
            fa, fb = fd_grads(total_pi, pi)
            _grad_close(gPi.dA, fa)
            _grad_close(gPi.db, fb)
            matched += 1
        assert matched >= 4

    def test_policy_gradient_nonzero_through_dynamics(self):
        # at least one fixture must push loss into the policy
        found = False
        for seed in range(8):
            out = self._setup(seed, CertMode.LOG_RASM, False)
            gPi = out[11]
            if any(np.any(g != 0.0) for g in gPi.dA):
                found = True
                break
        assert found

    def test_zero_loss_zero_gradients(self):
        # a comfortable certificate has zero loss and therefore no updates
        sys = TOY
        V = vee_net()
        pi = zero_policy(1, 1)
        cfg = LossConfig(tau=1e-4, eps=0.1, eps_prime=0.001, n_noise=8)
        rng = np.random.default_rng(11)
        p0 = sys.X0.sample(rng, 16)
        pu = sys.XU.sample(rng, 16)
        pe = np.concatenate(
            [rng.uniform(0.3, 0.8, (8, 1)), rng.uniform(-0.8, -0.3, (8, 1))]
        )
        ws = sample_noise(sys, rng, len(pe) * cfg.n_noise)
        values, gV, gPi = loss_and_gradients(
            V, pi, sys, LOG_SPEC, cfg, p0, pu, pe, ws
        )
        assert values.total == 0.0
        assert all(np.all(g == 0.0) for g in gV.dA)
        assert all(np.all(g == 0.0) for g in gV.db)
        assert all(np.all(g == 0.0) for g in gPi.dA)

    def test_zero_loss_implies_sampled_margins(self):
        # zero loss certifies the strict sampled conditions with margins
        sys = TOY
        V = vee_net()
        pi = zero_policy(1, 1)
        cfg = LossConfig(tau=1e-4, eps=0.1, eps_prime=0.001, n_noise=16)
        rng = np.random.default_rng(12)
        p0 = sys.X0.sample(rng, 64)
        pu = sys.XU.sample(rng, 64)
        pe = np.concatenate(
            [rng.uniform(0.25, 0.9, (32, 1)), rng.uniform(-0.9, -0.25, (32, 1))]
        )
        ws = sample_noise(sys, rng, len(pe) * cfg.n_noise)
        values, _, _ = loss_and_gradients(V, pi, sys, LOG_SPEC, cfg, p0, pu, pe, ws)
        assert values.total == 0.0
        v0 = forward(V, p0)[:, 0]
        assert np.all(v0 <= -cfg.eps + 1e-12)
        vu = forward(V, pu)[:, 0]
        assert np.all(vu >= LOG_SPEC.threshold + cfg.eps - 1e-12)


# --------------------------------------------------------------------------
# buffers


class TestSampleBuffers:
    def test_refresh_random_membership(self):
        rng = np.random.default_rng(4)
        buf = SampleBuffers(random_capacity=500, cex_capacity=100)
        buf.refresh_random(TOY, rng)
        assert len(buf.p_init) == 500
        assert np.all(TOY.X0.contains_batch(buf.p_init))
        assert np.all(TOY.XU.contains_batch(buf.p_unsafe))
        assert not np.any(TOY.XT.contains_batch(buf.p_decrease))
        assert np.all(buf.p_decrease >= TOY.X.lo) and np.all(
            buf.p_decrease <= TOY.X.hi
        )

    def test_merge_fills_then_replaces_exact_fraction(self):
        rng = np.random.default_rng(5)
        buf = SampleBuffers(random_capacity=10, cex_capacity=8)
        old = np.full((8, 1), 0.95)
        buf.c_unsafe = old.copy()
        incoming = np.full((20, 1), 0.99)
        buf.merge_counterexamples(
            TOY,
            np.empty((0, 1)),
            incoming,
            np.empty((0, 1)),
            rng,
            fraction=0.5,
        )
        assert len(buf.c_unsafe) == 8
        replaced = int(np.sum(buf.c_unsafe == 0.99))
        assert replaced == 4  # exactly half the slots hold new points

    def test_merge_fills_free_capacity_first(self):
        rng = np.random.default_rng(6)
        buf = SampleBuffers(cex_capacity=10)
        buf.c_init = np.full((4, 1), 0.1)
        incoming = np.full((3, 1), 0.2)
        buf.merge_counterexamples(
            TOY, incoming, np.empty((0, 1)), np.empty((0, 1)), rng
        )
        assert len(buf.c_init) == 7
        assert int(np.sum(buf.c_init == 0.2)) == 3

    def test_merge_filters_regions(self):
        rng = np.random.default_rng(7)
        buf = SampleBuffers(cex_capacity=10)
        init_in = np.array([[0.1], [0.9]])  # 0.9 is outside the initial set
        dec_in = np.array([[0.05], [0.5]])  # 0.05 is inside the target
        buf.merge_counterexamples(
            TOY, init_in, np.empty((0, 1)), dec_in, rng
        )
        assert buf.c_init.tolist() == [[0.1]]
        assert buf.c_decrease.tolist() == [[0.5]]

    def test_merge_empty_incoming_keeps_store(self):
        rng = np.random.default_rng(8)
        buf = SampleBuffers(cex_capacity=10)
        buf.c_unsafe = np.array([[0.95]])
        buf.merge_counterexamples(
            TOY, np.empty((0, 1)), np.empty((0, 1)), np.empty((0, 1)), rng
        )
        assert buf.c_unsafe.tolist() == [[0.95]]


# --------------------------------------------------------------------------
# training loop


def small_cfg(**kw):
    base = dict(
        tau=0.001,
        n_noise=4,
        batch_size=128,
        epochs=3,
        eps=0.1,
        eps_prime=0.01,
        alpha=10.0,
    )
    base.update(kw)
    return LossConfig(**base)


class TestTrainIteration:
    def test_zero_learning_rates_keep_parameters(self):
        rng = np.random.default_rng(9)
        V = mlp([1, 8, 1], rng)
        pi = mlp([1, 4, 1], rng)
        buf = SampleBuffers(random_capacity=256, cex_capacity=64)
        cfg = small_cfg(lr_v=0.0, lr_pi=0.0, resample_each_epoch=False)
        V2, pi2, trace = train_iteration(
            V, pi, TOY, LOG_SPEC, buf, cfg, np.random.default_rng(10)
        )
        for a, b in zip(V.layers, V2.layers):
            assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)
        for a, b in zip(pi.layers, pi2.layers):
            assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)
        assert len(trace) == cfg.epochs
        # batches are drawn with replacement each step, so rows vary even
        # with frozen nets; they must still be finite and nonnegative
        assert all(math.isfinite(r.total) and r.total >= 0.0 for r in trace)

    def test_loss_trends_down_on_toy(self):
        rng = np.random.default_rng(20)
        V = mlp([1, 16, 1], rng, out_bias=1.0)
        pi = mlp([1, 4, 1], rng)
        buf = SampleBuffers(random_capacity=1024, cex_capacity=128)
        cfg = small_cfg(epochs=6, batch_size=256)
        V2, pi2, trace = train_iteration(
            V, pi, TOY, LOG_SPEC, buf, cfg, np.random.default_rng(21)
        )
        assert trace[-1].total < trace[0].total
        assert all(math.isfinite(r.total) for r in trace)

    def test_nonfinite_loss_raises(self):
        # weights overflow the forward pass, producing a non-finite loss
        rng = np.random.default_rng(22)
        V = make_network(
            [np.array([[1e200]]), np.array([[1e200]])],
            [np.zeros(1), np.zeros(1)],
            ["relu", "id"],
        )
        pi = mlp([1, 4, 1], rng)
        buf = SampleBuffers(random_capacity=128, cex_capacity=32)
        with pytest.raises(ArithmeticError), np.errstate(all="ignore"):
            train_iteration(
                V, pi, TOY, LOG_SPEC, buf, small_cfg(), np.random.default_rng(23)
            )

    def test_trace_row_csv(self):
        row = LossTraceRow(3, 0.1, 0.2, 0.3, 3.3, 0.001, 12.5)
        assert LossTraceRow.CSV_HEADER.startswith("epoch,")
        cells = row.csv_row().split(",")
        assert cells[0] == "3"
        assert float(cells[4]) == 3.3
