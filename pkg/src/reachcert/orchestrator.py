"""Synthesis pipeline: policy pretraining, the learner-verifier loop, and
Monte-Carlo validation of reach-avoid probabilities.

``cegis`` alternates training (``learner.train_iteration``) with formal
checking (``verifier.verify``).  Counterexamples flow back into the sample
buffers; the probabilistic slack ``tau`` decays between iterations so later
rounds train against a tighter decrease margin.  A run ends as soon as the
verifier accepts the pair (certificate, policy), so a Synthesized result
always carries a formally verified certificate.
"""

from __future__ import annotations

import json
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .certificate import CertMode, Cond, Spec
from .learner import (
    LossConfig,
    LossTraceRow,
    SampleBuffers,
    _product_grad,
    _product_norms,
    sample_noise,
    train_iteration,
)
from .nets import (
    AdamState,
    Layer,
    Network,
    adam_step,
    backward,
    forward,
    mlp,
    zero_gradients,
)
from .systems import Dtss, get_system, make_partition, step_batch, step_vjp_batch
from .verifier import Verdict, VerifierConfig, VerifierOutcome, VerifierStats, verify

__all__ = [
    "Outcome",
    "RunConfig",
    "RunResult",
    "desk_profile",
    "paper_profile",
    "pretrain_policy",
    "cegis",
    "simulate_reach_avoid",
    "run_manifest",
]


class Outcome(Enum):
    SYNTHESIZED = "synthesized"
    TIMED_OUT = "timed-out"
    FAILED = "failed"


# Table-style defaults keyed by state dimension.
_MESH = {1: 0.01, 2: 0.01, 3: 0.04, 4: 0.06}
_REFINE_CAP = {1: 10, 2: 10, 3: 4, 4: 2}
_TAU_INIT = {1: 0.001, 2: 0.001, 3: 0.005, 4: 0.01}
_TAU_DECAY = {1: 0.8, 2: 0.8, 3: 0.9, 4: 0.9}
_NOISE_CELLS = {"collision-avoid": 24, "triple-integrator": 6}
_TAU_SPECIAL = {"collision-avoid": 0.01}
_PRETRAIN_STEPS = {"planar-robot": 10_000_000, "drone4D": 1_000_000}


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one synthesis run.

    Profiles (`desk_profile`, `paper_profile`) fill the per-dimension
    defaults; every field can be overridden individually.  The flat layout
    mirrors the on-disk config format one to one.
    """

    system: str
    rho: float = 0.9
    mode: CertMode = CertMode.LOG_RASM
    seed: int = 0
    lipschitz_method: str = "averaged"
    timeout: float | None = None
    max_iterations: int = 50
    # network architecture
    v_hidden: tuple[int, ...] = (128, 128, 128)
    pi_hidden: tuple[int, ...] = (128, 128, 128)
    v_init_bias: float = 0.5
    # policy pretraining
    pretrain_steps: int = 100_000
    pretrain_horizon: int = 32
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-3
    policy_lip_target: float = 10.0
    # learner
    alpha: float = 10.0
    eps: float = 0.1
    eps_prime: float = 0.01
    tau_init: float = 0.001
    tau_decay: float = 0.8
    n_noise: int = 16
    batch_size: int = 4096
    cex_fraction: float = 0.25
    epochs: int = 25
    lr_v: float = 5e-4
    lr_pi: float = 5e-5
    split_k: bool = False
    random_capacity: int = 30_000
    cex_capacity: int = 10_000
    refresh_fraction: float = 0.5
    freeze_policy: bool = False
    # verifier
    mesh: float = 0.01
    refine_cap: int = 10
    tau_min: float = 1e-7
    max_cells: int = 2_000_000
    verifier_batch: int = 4096
    max_generation: int = 20
    noise_cells: int = 12
    # validation
    sim_episodes: int = 10_000
    sim_horizon: int = 500

    def loss_config(self, tau: float) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            eps=self.eps,
            eps_prime=self.eps_prime,
            tau=tau,
            tau_decay=self.tau_decay,
            n_noise=self.n_noise,
            batch_size=self.batch_size,
            cex_fraction=self.cex_fraction,
            epochs=self.epochs,
            lr_v=self.lr_v,
            lr_pi=0.0 if self.freeze_policy else self.lr_pi,
            split_k=self.split_k,
        )

    def verifier_config(self, time_budget: float | None) -> VerifierConfig:
        return VerifierConfig(
            tau0=self.mesh,
            refine_cap=self.refine_cap,
            tau_min=self.tau_min,
            max_cells=self.max_cells,
            batch_size=self.verifier_batch,
            max_generation=self.max_generation,
            time_budget=time_budget,
            lipschitz_method=self.lipschitz_method,
        )


def _profile(system: str, **overrides) -> RunConfig:
    dim = get_system(system).state_dim
    base = dict(
        system=system,
        mesh=_MESH[dim],
        refine_cap=_REFINE_CAP[dim],
        tau_init=_TAU_SPECIAL.get(system, _TAU_INIT[dim]),
        tau_decay=_TAU_DECAY[dim],
        noise_cells=_NOISE_CELLS.get(system, 12),
        pretrain_steps=_PRETRAIN_STEPS.get(system, 100_000),
    )
    base.update(overrides)
    return RunConfig(**base)


def paper_profile(system: str, **overrides) -> RunConfig:
    """Full-scale hyperparameters as used for the headline experiments."""
    return _profile(system, **overrides)


def desk_profile(system: str, **overrides) -> RunConfig:
    """Reduced hyperparameters sized for a single CPU workstation."""
    dim = get_system(system).state_dim
    base = dict(
        v_hidden=(64, 64),
        pi_hidden=(64, 64),
        pretrain_steps=800,
        pretrain_batch=32,
        pretrain_horizon=24,
        eps_prime=0.05,
        tau_init=0.01,
        n_noise=16,
        batch_size=1024,
        epochs=10,
        random_capacity=16_384,
        cex_capacity=4_096,
        mesh=0.05 if dim >= 2 else 0.01,
        max_cells=500_000,
        max_generation=12,
    )
    base.update(overrides)
    return _profile(system, **base)


@dataclass
class RunResult:
    outcome: Outcome
    iterations: int
    wall_time: float
    certificate: Network | None
    policy: Network | None
    verifier_stats: VerifierStats | None
    estimate: float | None = None
    ci: float | None = None
    trace: list[LossTraceRow] = field(default_factory=list)


# --------------------------------------------------------------------------
# policy pretraining


def _scale_to_product(net: Network, target: float) -> Network:
    """Uniformly rescale layers so the product Lipschitz bound hits target."""
    prod, _, _ = _product_norms(net)
    if prod <= 0.0 or not math.isfinite(prod):
        return net
    s = (target / prod) ** (1.0 / len(net.layers))
    return Network(tuple(Layer(l.A * s, l.b, l.act) for l in net.layers))


def pretrain_policy(
    sys: Dtss,
    steps: int,
    horizon: int,
    rng: np.random.Generator,
    *,
    hidden: tuple[int, ...] = (128, 128, 128),
    batch: int = 64,
    lr: float = 1e-3,
    lip_target: float = 10.0,
) -> Network:
    """Train a policy by gradient descent through the known dynamics.

    Rollouts start uniformly in the initial set; the objective is the mean
    per-state trajectory cost plus a hinge penalty on the product Lipschitz
    bound of the policy, max(L_pi - lip_target, 0).  Backpropagation runs
    through the dynamics and the action clamp; clamped actions receive no
    gradient for that step.
    """
    pi = mlp([sys.state_dim, *hidden, sys.action_dim], rng)
    pi = _scale_to_product(pi, lip_target / 2.0)
    if steps == 0:
        return pi
    opt = AdamState.for_network(pi, lr)
    denom = float(batch * horizon)
    for _ in range(steps):
        xs = sys.X0.sample(rng, batch)
        states: list[np.ndarray] = [xs]
        raws: list[np.ndarray] = []
        noises: list[np.ndarray] = []
        for _t in range(horizon):
            raw = forward(pi, states[-1])
            us = np.clip(raw, sys.U.lo, sys.U.hi)
            ws = sample_noise(sys, rng, batch)
            states.append(step_batch(sys, states[-1], us, ws))
            raws.append(raw)
            noises.append(ws)
        g = zero_gradients(pi)
        cost, cgrad = sys.pretrain_loss(states[-1])
        lam = cgrad / denom
        total_cost = float(np.sum(cost))
        for t in range(horizon - 1, -1, -1):
            xs_t, raw = states[t], raws[t]
            us = np.clip(raw, sys.U.lo, sys.U.hi)
            gx, gu = step_vjp_batch(sys, xs_t, us, noises[t], lam)
            gu = gu * ((raw > sys.U.lo) & (raw < sys.U.hi))
            bw = backward(pi, xs_t, gu)
            g.add_(bw)
            lam = gx + bw.dx
            if t >= 1:
                cost, cgrad = sys.pretrain_loss(xs_t)
                total_cost += float(np.sum(cost))
                lam = lam + cgrad / denom
        if not math.isfinite(total_cost):
            raise ArithmeticError("pretraining diverged: non-finite rollout cost")
        prod, norms, cols = _product_norms(pi)
        if prod > lip_target:
            for dA, gA in zip(g.dA, _product_grad(pi, norms, cols)):
                dA += gA
        pi = adam_step(pi, g, opt)
    return pi


# --------------------------------------------------------------------------
# Monte-Carlo validation


def simulate_reach_avoid(
    sys: Dtss,
    pi: Network,
    spec: Spec,
    episodes: int,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Empirical reach-avoid frequency with a Wilson interval half-width.

    An episode succeeds when it enters the target set before the unsafe set
    within the horizon; membership is checked target-first at every step,
    including the initial state.  Truncation at the horizon only loses
    successes, so the estimate is conservative.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    xs = sys.X0.sample(rng, episodes)
    successes = 0
    for t in range(horizon + 1):
        if len(xs) == 0:
            break
        reached = sys.XT.contains_batch(xs)
        successes += int(np.sum(reached))
        xs = xs[~reached]
        if len(xs) == 0:
            break
        crashed = sys.XU.contains_batch(xs)
        xs = xs[~crashed]
        if t == horizon or len(xs) == 0:
            break
        us = np.clip(forward(pi, xs), sys.U.lo, sys.U.hi)
        ws = sample_noise(sys, rng, len(xs))
        xs = step_batch(sys, xs, us, ws)
    n = float(episodes)
    p = successes / n
    z = 1.959963984540054
    denom = 1.0 + z * z / n
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    return p, half


# --------------------------------------------------------------------------
# the learner-verifier loop


def cegis(
    cfg: RunConfig,
    *,
    policy: Network | None = None,
    certificate: Network | None = None,
    progress=None,
) -> RunResult:
    """Run the full synthesis loop for one configuration.

    The pair (certificate, policy) is verified before any training, so a
    valid input certificate yields Synthesized at zero iterations.  After
    each training pass the verifier either accepts, or its counterexamples
    are merged into the sample buffers and tau decays for the next round.

    Training faults (non-finite loss) propagate as ArithmeticError with run
    context; an initial grid that cannot fit under the cell cap is returned
    as a Failed result since no amount of training can recover it.
    """
    sys = get_system(cfg.system)
    spec = Spec(cfg.rho, cfg.mode)
    noise = make_partition(sys.noise_dim, cfg.noise_cells)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_pre = np.random.default_rng(seeds[0])
    rng_init = np.random.default_rng(seeds[1])
    rng_learn = np.random.default_rng(seeds[2])
    rng_sim = np.random.default_rng(seeds[3])

    t0 = time.perf_counter()

    def remaining() -> float | None:
        if cfg.timeout is None:
            return None
        return cfg.timeout - (time.perf_counter() - t0)

    def out_of_time() -> bool:
        rem = remaining()
        return rem is not None and rem <= 0.0

    pi = policy
    if pi is None:
        pi = pretrain_policy(
            sys,
            cfg.pretrain_steps,
            cfg.pretrain_horizon,
            rng_pre,
            hidden=cfg.pi_hidden,
            batch=cfg.pretrain_batch,
            lr=cfg.pretrain_lr,
            lip_target=cfg.policy_lip_target,
        )
    V = certificate
    if V is None:
        V = mlp([sys.state_dim, *cfg.v_hidden, 1], rng_init, out_bias=cfg.v_init_bias)

    buffers = SampleBuffers(
        random_capacity=cfg.random_capacity, cex_capacity=cfg.cex_capacity
    )
    trace: list[LossTraceRow] = []
    tau = cfg.tau_init

    def result(outcome, iterations, stats, est=None, ci=None):
        return RunResult(
            outcome=outcome,
            iterations=iterations,
            wall_time=time.perf_counter() - t0,
            certificate=V,
            policy=pi,
            verifier_stats=stats,
            estimate=est,
            ci=ci,
            trace=trace,
        )

    def attempt(iterations: int) -> VerifierOutcome:
        out = verify(V, pi, sys, noise, spec, cfg.verifier_config(remaining()))
        if progress is not None:
            progress(iterations, out)
        return out

    def merge(cex) -> None:
        buffers.merge_counterexamples(
            sys,
            cex.points(Cond.INIT),
            cex.points(Cond.UNSAFE),
            cex.points(Cond.DECREASE),
            rng_learn,
            fraction=cfg.refresh_fraction,
        )

    out = attempt(0)
    if out.verdict is Verdict.VERIFIED:
        est, ci = simulate_reach_avoid(
            sys, pi, spec, cfg.sim_episodes, cfg.sim_horizon, rng_sim
        )
        return result(Outcome.SYNTHESIZED, 0, out.stats, est, ci)
    if out.stats.exhausted_reason == "capacity" and out.stats.cells_checked == 0:
        return result(Outcome.FAILED, 0, out.stats)
    merge(out.counterexamples)

    stats = out.stats
    for it in range(1, cfg.max_iterations + 1):
        if out_of_time():
            return result(Outcome.TIMED_OUT, it - 1, stats)
        try:
            V, pi, rows = train_iteration(
                V, pi, sys, spec, buffers, cfg.loss_config(tau), rng_learn
            )
        except ArithmeticError as exc:
            raise ArithmeticError(
                f"training diverged on {cfg.system} (seed {cfg.seed}, "
                f"iteration {it}): {exc}"
            ) from exc
        trace.extend(rows)
        if out_of_time():
            return result(Outcome.TIMED_OUT, it, stats)
        out = attempt(it)
        stats = out.stats
        if out.verdict is Verdict.VERIFIED:
            est, ci = simulate_reach_avoid(
                sys, pi, spec, cfg.sim_episodes, cfg.sim_horizon, rng_sim
            )
            return result(Outcome.SYNTHESIZED, it, stats, est, ci)
        if out.stats.exhausted_reason == "time":
            return result(Outcome.TIMED_OUT, it, stats)
        merge(out.counterexamples)
        tau *= cfg.tau_decay
    return result(Outcome.TIMED_OUT, cfg.max_iterations, stats)


# --------------------------------------------------------------------------
# manifest


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def run_manifest(cfg: RunConfig, res: RunResult) -> dict:
    """JSON-serializable record of one run: config echo, outcome, timings."""
    cfg_doc = asdict(cfg)
    cfg_doc["mode"] = cfg.mode.value
    cfg_doc["v_hidden"] = list(cfg.v_hidden)
    cfg_doc["pi_hidden"] = list(cfg.pi_hidden)
    doc = {
        "config": cfg_doc,
        "seed": cfg.seed,
        "git": _git_describe(),
        "outcome": res.outcome.value,
        "iterations": res.iterations,
        "wall_time_s": res.wall_time,
        "estimate": res.estimate,
        "ci_half_width": res.ci,
    }
    if res.verifier_stats is not None:
        doc["verifier"] = asdict(res.verifier_stats)
    json.dumps(doc)  # fail fast if anything is not serializable
    return doc
