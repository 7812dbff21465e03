"""Tests for pretraining, the synthesis loop, and Monte-Carlo validation."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from reachcert.certificate import CertMode, Cond, Spec
from reachcert.learner import _product_norms, loss_init, loss_unsafe, sample_noise
from reachcert.nets import forward, make_network
from reachcert.orchestrator import (
    Outcome,
    RunConfig,
    cegis,
    desk_profile,
    paper_profile,
    pretrain_policy,
    run_manifest,
    simulate_reach_avoid,
)
from reachcert.systems import Box, RectSet, get_system, make_partition, step_batch
from reachcert.verifier import Verdict, verify

TOY = get_system("toy-1d")


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


def const_net(in_dim, c):
    return make_network([np.zeros((1, in_dim))], [np.array([c])], ["id"])


def toy_cfg(**kw):
    base = dict(
        seed=3,
        v_hidden=(32, 32),
        pi_hidden=(16,),
        pretrain_steps=50,
        epochs=5,
        random_capacity=4096,
        cex_capacity=1024,
        batch_size=512,
        max_iterations=30,
        sim_episodes=2000,
        mesh=0.01,
    )
    base.update(kw)
    return desk_profile("toy-1d", **base)


# --------------------------------------------------------------------------
# profiles


class TestProfiles:
    def test_dimension_defaults(self):
        cfg2 = paper_profile("linear-sys")
        assert cfg2.mesh == 0.01 and cfg2.refine_cap == 10
        assert cfg2.tau_init == 0.001 and cfg2.tau_decay == 0.8
        cfg3 = paper_profile("triple-integrator")
        assert cfg3.mesh == 0.04 and cfg3.refine_cap == 4
        assert cfg3.tau_init == 0.005 and cfg3.tau_decay == 0.9
        assert cfg3.noise_cells == 6
        cfg4 = paper_profile("drone4D")
        assert cfg4.mesh == 0.06 and cfg4.refine_cap == 2
        assert cfg4.tau_init == 0.01 and cfg4.pretrain_steps == 1_000_000

    def test_benchmark_specials(self):
        cfg = paper_profile("collision-avoid")
        assert cfg.noise_cells == 24
        assert cfg.tau_init == 0.01
        assert paper_profile("planar-robot").pretrain_steps == 10_000_000

    def test_desk_profile_shrinks(self):
        cfg = desk_profile("linear-sys")
        assert cfg.mesh == 0.05
        assert cfg.max_cells == 500_000
        assert cfg.v_hidden == (64, 64)
        assert cfg.batch_size < paper_profile("linear-sys").batch_size

    def test_overrides_win(self):
        cfg = desk_profile("linear-sys", mesh=0.02, seed=7)
        assert cfg.mesh == 0.02 and cfg.seed == 7

    def test_unknown_system_rejected(self):
        with pytest.raises((KeyError, ValueError)):
            desk_profile("no-such-system")

    def test_config_helpers(self):
        cfg = toy_cfg()
        lc = cfg.loss_config(0.004)
        assert lc.tau == 0.004 and lc.batch_size == cfg.batch_size
        vc = cfg.verifier_config(12.5)
        assert vc.tau0 == cfg.mesh and vc.time_budget == 12.5

    def test_freeze_policy_zeroes_lr(self):
        cfg = toy_cfg(freeze_policy=True)
        assert cfg.loss_config(0.01).lr_pi == 0.0


# --------------------------------------------------------------------------
# pretraining


class TestPretrainPolicy:
    def test_zero_steps_returns_init(self):
        sys = get_system("linear-sys")
        a = pretrain_policy(
            sys, 0, 16, np.random.default_rng(5), hidden=(8,), lip_target=10.0
        )
        b = pretrain_policy(
            sys, 0, 16, np.random.default_rng(5), hidden=(8,), lip_target=10.0
        )
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.A, lb.A) and np.array_equal(la.b, lb.b)
        prod, _, _ = _product_norms(a)
        assert prod == pytest.approx(5.0, rel=1e-9)

    def _mean_final_norm(self, sys, pi, seed, episodes=256, horizon=32):
        rng = np.random.default_rng(seed)
        xs = sys.X0.sample(rng, episodes)
        for _ in range(horizon):
            us = np.clip(forward(pi, xs), sys.U.lo, sys.U.hi)
            xs = step_batch(sys, xs, us, sample_noise(sys, rng, episodes))
        return float(np.mean(np.linalg.norm(xs, axis=1)))

    def test_paired_improvement_on_linear_sys(self):
        sys = get_system("linear-sys")
        untrained = pretrain_policy(
            sys, 0, 24, np.random.default_rng(9), hidden=(16, 16)
        )
        trained = pretrain_policy(
            sys, 400, 24, np.random.default_rng(9), hidden=(16, 16), batch=32
        )
        before = self._mean_final_norm(sys, untrained, seed=77)
        after = self._mean_final_norm(sys, trained, seed=77)
        assert after < before

    def test_lipschitz_penalty_effective(self):
        sys = get_system("linear-sys")
        pi = pretrain_policy(
            sys,
            300,
            16,
            np.random.default_rng(4),
            hidden=(16, 16),
            batch=32,
            lip_target=10.0,
        )
        prod, _, _ = _product_norms(pi)
        assert prod <= 11.0


# --------------------------------------------------------------------------
# Monte-Carlo validation


class TestSimulateReachAvoid:
    def test_initial_inside_target_is_exactly_one(self):
        sys = replace(TOY, XT=RectSet((Box(np.array([-1.0]), np.array([1.0])),)))
        est, ci = simulate_reach_avoid(
            sys, zero_policy(1, 1), Spec(0.9), 500, 10, np.random.default_rng(0)
        )
        assert est == 1.0
        assert 0.0 < ci < 0.01

    def test_deterministic_contraction_reaches(self):
        sys = replace(
            TOY,
            X0=RectSet((Box(np.array([0.24]), np.array([0.26])),)),
            XT=RectSet((Box(np.array([-0.2]), np.array([0.2])),)),
            XU=RectSet((Box(np.array([-0.99]), np.array([-0.95])),)),
            f_raw=lambda xs, us, ws: 0.5 * xs,
            f_vjp=lambda xs, us, ws, g: (0.5 * g, np.zeros_like(us)),
        )
        est, _ = simulate_reach_avoid(
            sys, zero_policy(1, 1), Spec(0.9), 200, 50, np.random.default_rng(1)
        )
        assert est == 1.0

    def test_verified_toy_certificate_is_consistent(self):
        # a formally verified pair must never be refuted empirically
        est, ci = simulate_reach_avoid(
            TOY, zero_policy(1, 1), Spec(0.9), 10_000, 500, np.random.default_rng(2)
        )
        assert est - 3.0 * ci >= 0.9

    def test_unsafe_absorbs(self):
        # started inside the unsafe set, episodes fail immediately
        sys = replace(TOY, X0=TOY.XU, XT=RectSet((Box(np.array([-0.05]), np.array([0.05])),)))
        est, ci = simulate_reach_avoid(
            sys, zero_policy(1, 1), Spec(0.9), 300, 50, np.random.default_rng(3)
        )
        assert est == 0.0
        assert ci > 0.0

    def test_bad_episode_count(self):
        with pytest.raises(ValueError):
            simulate_reach_avoid(
                TOY, zero_policy(1, 1), Spec(0.9), 0, 10, np.random.default_rng(0)
            )

    def test_wilson_interval_positive_and_bounded(self):
        est, ci = simulate_reach_avoid(
            TOY, zero_policy(1, 1), Spec(0.9), 100, 500, np.random.default_rng(4)
        )
        assert 0.0 <= est <= 1.0
        assert 0.0 < ci < 0.2


# --------------------------------------------------------------------------
# the synthesis loop


class TestCegis:
    def test_toy_synthesizes(self):
        res = cegis(toy_cfg())
        assert res.outcome is Outcome.SYNTHESIZED
        assert res.iterations <= 30
        assert res.estimate is not None and res.ci is not None
        assert res.estimate - 3.0 * res.ci >= 0.9
        assert res.verifier_stats.exhausted_reason is None
        assert len(res.trace) > 0
        # Synthesized implies the returned pair re-verifies
        cfg = toy_cfg()
        out = verify(
            res.certificate,
            res.policy,
            TOY,
            make_partition(TOY.noise_dim, cfg.noise_cells),
            Spec(cfg.rho, cfg.mode),
            cfg.verifier_config(None),
        )
        assert out.verdict is Verdict.VERIFIED

    def test_zero_iteration_cap_times_out(self):
        res = cegis(toy_cfg(max_iterations=0, pretrain_steps=0))
        assert res.outcome is Outcome.TIMED_OUT
        assert res.iterations == 0

    def test_verify_only_accepts_handcrafted_certificate(self):
        res = cegis(
            toy_cfg(max_iterations=5),
            policy=zero_policy(1, 1),
            certificate=vee_net(),
        )
        assert res.outcome is Outcome.SYNTHESIZED
        assert res.iterations == 0
        assert res.estimate - 3.0 * res.ci >= 0.9

    def test_deterministic_across_runs(self):
        a = cegis(toy_cfg())
        b = cegis(toy_cfg())
        assert a.outcome is b.outcome
        assert a.iterations == b.iterations
        assert a.estimate == b.estimate
        for la, lb in zip(a.certificate.layers, b.certificate.layers):
            assert np.array_equal(la.A, lb.A) and np.array_equal(la.b, lb.b)
        for la, lb in zip(a.policy.layers, b.policy.layers):
            assert np.array_equal(la.A, lb.A) and np.array_equal(la.b, lb.b)

    def test_timeout_yields_timed_out(self):
        res = cegis(toy_cfg(timeout=1e-6, pretrain_steps=0))
        assert res.outcome is Outcome.TIMED_OUT

    def test_oversized_grid_fails(self):
        res = cegis(toy_cfg(max_cells=10, pretrain_steps=0))
        assert res.outcome is Outcome.FAILED
        assert res.iterations == 0
        assert res.verifier_stats.cells_checked == 0

    def test_counterexamples_violate_learner_loss(self):
        # every returned counterexample must look like a violation to the
        # learner's hinges; constant certificates make the check exact
        spec = Spec(0.9)
        noise = make_partition(1, 12)
        cfg = toy_cfg().verifier_config(None)
        pi = zero_policy(1, 1)

        high = const_net(1, spec.threshold + 1.0)
        out = verify(high, pi, TOY, noise, spec, cfg)
        assert out.verdict is Verdict.COUNTEREXAMPLES
        pts = out.counterexamples.points(Cond.INIT)
        assert len(pts) > 0
        for p in pts:
            assert loss_init(high, p[None, :], spec, eps=0.1) > 0.0

        low = const_net(1, 0.0)
        out = verify(low, pi, TOY, noise, spec, cfg)
        assert out.verdict is Verdict.COUNTEREXAMPLES
        pts = out.counterexamples.points(Cond.UNSAFE)
        assert len(pts) > 0
        for p in pts:
            assert loss_unsafe(low, p[None, :], spec, eps=0.1) > 0.0
        # constant certificates admit no expected decrease at all: any
        # decrease counterexamples have a positive strictness hinge too
        dec = out.counterexamples.points(Cond.DECREASE)
        for p in dec:
            v = forward(low, p[None, :])[0, 0]
            assert math.log(math.exp(v)) - v + 0.01 > 0.0

    def test_progress_callback_sees_every_attempt(self):
        seen = []
        res = cegis(
            toy_cfg(max_iterations=2),
            policy=zero_policy(1, 1),
            certificate=vee_net(),
            progress=lambda it, out: seen.append((it, out.verdict)),
        )
        assert seen == [(0, Verdict.VERIFIED)]
        assert res.outcome is Outcome.SYNTHESIZED


# --------------------------------------------------------------------------
# manifest


class TestManifest:
    def test_round_trips_through_json(self):
        cfg = toy_cfg(max_iterations=0, pretrain_steps=0)
        res = cegis(cfg)
        doc = run_manifest(cfg, res)
        text = json.dumps(doc)
        back = json.loads(text)
        assert back["outcome"] == "timed-out"
        assert back["config"]["system"] == "toy-1d"
        assert back["config"]["mode"] == "log-rasm"
        assert back["seed"] == cfg.seed
        assert "git" in back
        assert back["verifier"]["cells_checked"] >= 0

    def test_mode_echoed_as_string(self):
        cfg = RunConfig(system="toy-1d", mode=CertMode.RASM)
        res = cegis(
            replace_cfg(cfg, max_iterations=0, pretrain_steps=0, pi_hidden=(4,), v_hidden=(4,))
        )
        doc = run_manifest(cfg, res)
        assert isinstance(doc["config"]["mode"], str)


def replace_cfg(cfg, **kw):
    return replace(cfg, **kw)
