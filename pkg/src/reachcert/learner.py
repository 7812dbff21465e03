"""Training of certificate and policy networks on differentiable
condition losses.

The three loss terms mirror the certificate conditions: an exact max over
initial-set points, an exact max over unsafe-set points scaled by the
threshold, and a mean hinge over out-of-target points whose margin carries
the loss mesh times the combined Lipschitz constant.  The Lipschitz term
uses the cheap layer-norm product bound so it can be differentiated and
recomputed every batch; the verifier's acceptance check uses the tighter
averaged bound instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .certificate import CertMode, Spec
from .nets import (
    AdamState,
    Gradients,
    Network,
    adam_step,
    backward,
    forward,
    zero_gradients,
)
from .systems import Dtss, step_batch, step_vjp_batch

__all__ = [
    "LossConfig",
    "LossTraceRow",
    "LossValues",
    "SampleBuffers",
    "k_prime",
    "loss_and_gradients",
    "loss_decrease",
    "loss_init",
    "loss_unsafe",
    "sample_noise",
    "train_iteration",
]


@dataclass
class LossConfig:
    """Learner hyperparameters.

    ``tau`` is the loss mesh; the orchestrator multiplies it by
    ``tau_decay`` after every learner-verifier iteration.  ``split_k``
    selects the split form of the combined Lipschitz constant (state and
    action sensitivities separately) instead of the single-constant form.
    """

    alpha: float = 10.0
    eps: float = 0.1
    eps_prime: float = 0.01
    tau: float = 0.001
    tau_decay: float = 0.8
    n_noise: int = 16
    batch_size: int = 4096
    cex_fraction: float = 0.25
    epochs: int = 25
    lr_v: float = 5e-4
    lr_pi: float = 5e-5
    split_k: bool = False
    resample_each_epoch: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.cex_fraction <= 1.0:
            raise ValueError("cex_fraction must lie in [0, 1]")
        for name in ("alpha", "eps", "eps_prime", "tau", "n_noise", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class LossValues:
    init: float
    unsafe: float
    decrease: float
    total: float
    k_prime: float


@dataclass(frozen=True)
class LossTraceRow:
    epoch: int
    loss_init: float
    loss_unsafe: float
    loss_decrease: float
    total: float
    tau: float
    k_prime: float

    CSV_HEADER = "epoch,loss_init,loss_unsafe,loss_decrease,total,tau,k_prime"

    def csv_row(self) -> str:
        return (
            f"{self.epoch},{self.loss_init!r},{self.loss_unsafe!r},"
            f"{self.loss_decrease!r},{self.total!r},{self.tau!r},{self.k_prime!r}"
        )


def sample_noise(sys: Dtss, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n noise vectors from the product triangular distribution."""
    return rng.triangular(-1.0, 0.0, 1.0, (n, sys.noise_dim))


# --------------------------------------------------------------------------
# layer-norm product bound with subgradient


def _product_norms(net: Network) -> tuple[float, list[float], list[int]]:
    norms: list[float] = []
    cols: list[int] = []
    for layer in net.layers:
        sums = np.abs(layer.A).sum(axis=0)
        j = int(np.argmax(sums))
        norms.append(float(sums[j]))
        cols.append(j)
    total = float(np.prod(norms)) if norms else 0.0
    return total, norms, cols


def _product_grad(net: Network, norms: list[float], cols: list[int]) -> list[np.ndarray]:
    """d(product of layer 1-norms)/dA per layer, at the argmax columns."""
    n = len(norms)
    prefix = [1.0] * (n + 1)
    for i in range(n):
        prefix[i + 1] = prefix[i] * norms[i]
    suffix = [1.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] * norms[i]
    grads = []
    for i, layer in enumerate(net.layers):
        g = np.zeros_like(layer.A)
        g[:, cols[i]] = prefix[i] * suffix[i + 1] * np.sign(layer.A[:, cols[i]])
        grads.append(g)
    return grads


def k_prime(
    V: Network, pi: Network, sys: Dtss, split: bool = False
) -> tuple[float, float, float]:
    """Lipschitz constant of x -> (expected next value) - (current value).

    Returns (K', L_V, L_pi) where the network constants come from the layer
    product bound.  The default form folds the dynamics into one constant;
    the split form keeps state and action sensitivities apart.
    """
    L_V, _, _ = _product_norms(V)
    L_pi, _, _ = _product_norms(pi)
    if split:
        kp = L_V * (sys.L_fx + sys.L_fu * L_pi + 1.0)
    else:
        L_f = max(sys.L_fx, sys.L_fu)
        kp = L_V * (L_f * (L_pi + 1.0) + 1.0)
    return kp, L_V, L_pi


# --------------------------------------------------------------------------
# loss values (formula wrappers)


def _init_scores(V: Network, pts: np.ndarray, spec: Spec, eps: float) -> np.ndarray:
    vals = forward(V, pts)[:, 0]
    if spec.mode is CertMode.LOG_RASM:
        return vals + eps
    return vals - 1.0 + eps


def _unsafe_scale(spec: Spec) -> float:
    if spec.mode is CertMode.LOG_RASM:
        return 1.0 / spec.threshold
    return 1.0 - spec.rho


def loss_init(V: Network, pts: np.ndarray, spec: Spec, eps: float = 0.1) -> float:
    """Exact max over the batch of the hinged initial-set margin."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    return float(max(np.max(_init_scores(V, pts, spec, eps)), 0.0))


def loss_unsafe(V: Network, pts: np.ndarray, spec: Spec, eps: float = 0.1) -> float:
    """Threshold-scaled exact max of the hinged unsafe-set margin."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    vals = forward(V, pts)[:, 0]
    worst = float(np.max(spec.threshold - vals + eps))
    return _unsafe_scale(spec) * max(worst, 0.0)


def _decrease_scores(
    V: Network,
    pi: Network,
    sys: Dtss,
    spec: Spec,
    cfg: LossConfig,
    pts: np.ndarray,
    ws: np.ndarray,
    kp: float,
) -> tuple[np.ndarray, dict]:
    """Per-point pre-hinge decrease margins plus everything the backward
    pass needs."""
    B = len(pts)
    N = cfg.n_noise
    raw_u = forward(pi, pts)
    us = np.clip(raw_u, sys.U.lo, sys.U.hi)
    act_mask = (raw_u > sys.U.lo) & (raw_u < sys.U.hi)
    xs_rep = np.repeat(pts, N, axis=0)
    us_rep = np.repeat(us, N, axis=0)
    ys = step_batch(sys, xs_rep, us_rep, ws)
    vy = forward(V, ys)[:, 0].reshape(B, N)
    vx = forward(V, pts)[:, 0]
    if spec.mode is CertMode.LOG_RASM:
        m = vy.max(axis=1, keepdims=True)
        exps = np.exp(vy - m)
        mean_exp = exps.mean(axis=1)
        agg = m[:, 0] + np.log(mean_exp)
        # d agg / d vy_i: softmax weights
        vy_weights = exps / (exps.sum(axis=1, keepdims=True))
    else:
        agg = vy.mean(axis=1)
        vy_weights = np.full_like(vy, 1.0 / N)
    z = agg - vx + cfg.tau * kp + cfg.eps_prime
    aux = {
        "ys": ys,
        "vy_weights": vy_weights,
        "us_rep": us_rep,
        "xs_rep": xs_rep,
        "act_mask": act_mask,
        "ws": ws,
    }
    return z, aux


def loss_decrease(
    V: Network,
    pi: Network,
    sys: Dtss,
    pts: np.ndarray,
    spec: Spec,
    cfg: LossConfig,
    rng: np.random.Generator,
) -> float:
    """Mean hinged decrease margin over the batch with fresh noise draws."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    kp, _, _ = k_prime(V, pi, sys, cfg.split_k)
    ws = sample_noise(sys, rng, len(pts) * cfg.n_noise)
    z, _ = _decrease_scores(V, pi, sys, spec, cfg, pts, ws, kp)
    return float(np.mean(np.maximum(z, 0.0)))


# --------------------------------------------------------------------------
# combined loss with gradients


def loss_and_gradients(
    V: Network,
    pi: Network,
    sys: Dtss,
    spec: Spec,
    cfg: LossConfig,
    p0: np.ndarray,
    pu: np.ndarray,
    pe: np.ndarray,
    ws: np.ndarray,
) -> tuple[LossValues, Gradients, Gradients]:
    """Evaluate the combined loss and its parameter gradients.

    ``ws`` supplies the noise draws for the decrease term, shaped
    (len(pe) * n_noise, noise_dim), so callers control the randomness.
    The hinge and exact-max subgradients are zero exactly at the kink.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    pu = np.asarray(pu, dtype=np.float64)
    pe = np.asarray(pe, dtype=np.float64)
    gV = zero_gradients(V)
    gPi = zero_gradients(pi)

    l0 = 0.0
    if p0.size > 0:
        scores = _init_scores(V, p0, spec, cfg.eps)
        j = int(np.argmax(scores))
        if scores[j] > 0.0:
            l0 = float(scores[j])
            gV.add_(backward(V, p0[j : j + 1], np.array([[1.0]])))

    lu = 0.0
    if pu.size > 0:
        vals = forward(V, pu)[:, 0]
        margins = spec.threshold - vals + cfg.eps
        j = int(np.argmax(margins))
        scale = _unsafe_scale(spec)
        if margins[j] > 0.0:
            lu = scale * float(margins[j])
            gV.add_(backward(V, pu[j : j + 1], np.array([[-scale]])))

    kp, L_V, L_pi = k_prime(V, pi, sys, cfg.split_k)
    le = 0.0
    if pe.size > 0:
        B = len(pe)
        if ws.shape != (B * cfg.n_noise, sys.noise_dim):
            raise ValueError("noise draw shape mismatch")
        z, aux = _decrease_scores(V, pi, sys, spec, cfg, pe, ws, kp)
        active = z > 0.0
        n_active = int(active.sum())
        le = float(np.sum(z[active])) / B
        if n_active > 0:
            coef = cfg.alpha / B
            # through the sampled next-state values
            cot_y = (active[:, None] * aux["vy_weights"] * coef).reshape(-1, 1)
            bw = backward(V, aux["ys"], cot_y)
            gV.add_(bw)
            _, gu = step_vjp_batch(
                sys, aux["xs_rep"], aux["us_rep"], aux["ws"], bw.dx
            )
            gu = gu * np.repeat(aux["act_mask"], cfg.n_noise, axis=0)
            gu_per_x = gu.reshape(B, cfg.n_noise, -1).sum(axis=1)
            gPi.add_(backward(pi, pe, gu_per_x))
            # through the current value
            cot_x = (-coef) * active.astype(np.float64)
            gV.add_(backward(V, pe, cot_x[:, None]))
            # through the Lipschitz product bound in tau * K'
            if cfg.tau > 0.0:
                lip_coef = coef * n_active * cfg.tau
                _, v_norms, v_cols = _product_norms(V)
                _, p_norms, p_cols = _product_norms(pi)
                if cfg.split_k:
                    dk_dlv = sys.L_fx + sys.L_fu * L_pi + 1.0
                    dk_dlp = L_V * sys.L_fu
                else:
                    L_f = max(sys.L_fx, sys.L_fu)
                    dk_dlv = L_f * (L_pi + 1.0) + 1.0
                    dk_dlp = L_V * L_f
                for dA, g in zip(gV.dA, _product_grad(V, v_norms, v_cols)):
                    dA += lip_coef * dk_dlv * g
                for dA, g in zip(gPi.dA, _product_grad(pi, p_norms, p_cols)):
                    dA += lip_coef * dk_dlp * g

    total = l0 + lu + cfg.alpha * le
    return LossValues(l0, lu, le, total, kp), gV, gPi


# --------------------------------------------------------------------------
# sample buffers


def _sample_outside_target(
    sys: Dtss, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Uniform samples from the state space minus the target set, by
    rejection."""
    out = np.empty((0, sys.state_dim))
    box_lo, box_hi = sys.X.lo, sys.X.hi
    while len(out) < n:
        cand = box_lo + (box_hi - box_lo) * rng.random((max(2 * n, 64), sys.state_dim))
        keep = ~sys.XT.contains_batch(cand)
        out = np.concatenate([out, cand[keep]])
    return out[:n]


@dataclass
class SampleBuffers:
    """Per-condition point stores for the learner.

    Each condition keeps a random store and a counterexample store;
    capacities are per condition, so the defaults give 90 000 random and
    30 000 counterexample slots in total across the three conditions.
    """

    random_capacity: int = 30_000
    cex_capacity: int = 10_000
    p_init: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    p_unsafe: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    p_decrease: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    c_init: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    c_unsafe: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    c_decrease: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def refresh_random(self, sys: Dtss, rng: np.random.Generator) -> None:
        n = self.random_capacity
        self.p_init = sys.X0.sample(rng, n)
        self.p_unsafe = sys.XU.sample(rng, n)
        self.p_decrease = _sample_outside_target(sys, rng, n)

    def merge_counterexamples(
        self,
        sys: Dtss,
        init_pts: np.ndarray,
        unsafe_pts: np.ndarray,
        decrease_pts: np.ndarray,
        rng: np.random.Generator,
        fraction: float = 0.5,
    ) -> None:
        """Fold new counterexamples into the stores.

        Free capacity is filled first; beyond that, the configured fraction
        of the previously held points is replaced by random picks from the
        incoming batch.  Incoming points outside their condition region are
        dropped to keep the membership invariants.
        """
        init_pts = _as_points(init_pts)
        unsafe_pts = _as_points(unsafe_pts)
        decrease_pts = _as_points(decrease_pts)
        if init_pts.size:
            init_pts = init_pts[sys.X0.contains_batch(init_pts)]
        if unsafe_pts.size:
            unsafe_pts = unsafe_pts[sys.XU.contains_batch(unsafe_pts)]
        if decrease_pts.size:
            decrease_pts = decrease_pts[~sys.XT.contains_batch(decrease_pts)]
        self.c_init = _merge_store(
            self.c_init, init_pts, self.cex_capacity, fraction, rng
        )
        self.c_unsafe = _merge_store(
            self.c_unsafe, unsafe_pts, self.cex_capacity, fraction, rng
        )
        self.c_decrease = _merge_store(
            self.c_decrease, decrease_pts, self.cex_capacity, fraction, rng
        )


def _as_points(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0:
        return np.empty((0, 0))
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _merge_store(
    store: np.ndarray,
    incoming: np.ndarray,
    capacity: int,
    fraction: float,
    rng: np.random.Generator,
) -> np.ndarray:
    if incoming.size == 0:
        return store
    if store.size == 0:
        return incoming[:capacity].copy()
    free = capacity - len(store)
    if free > 0:
        take = incoming[:free]
        store = np.concatenate([store, take])
        incoming = incoming[free:]
        if incoming.size == 0:
            return store
    n_old = len(store)
    n_replace = int(round(fraction * n_old))
    if n_replace == 0:
        return store
    slots = rng.choice(n_old, size=n_replace, replace=False)
    picks = rng.choice(len(incoming), size=n_replace, replace=True)
    store = store.copy()
    store[slots] = incoming[picks]
    return store


def _draw_batch(
    random_store: np.ndarray,
    cex_store: np.ndarray,
    batch_size: int,
    cex_fraction: float,
    rng: np.random.Generator,
) -> np.ndarray:
    if random_store.size == 0 and cex_store.size == 0:
        return np.empty((0, 0))
    if random_store.size == 0:
        n_cex = batch_size
    elif cex_store.size == 0:
        n_cex = 0
    else:
        n_cex = int(round(batch_size * cex_fraction))
    n_rand = batch_size - n_cex
    parts = []
    if n_rand:
        idx = rng.integers(0, len(random_store), size=n_rand)
        parts.append(random_store[idx])
    if n_cex:
        idx = rng.integers(0, len(cex_store), size=n_cex)
        parts.append(cex_store[idx])
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# training loop


def train_iteration(
    V: Network,
    pi: Network,
    sys: Dtss,
    spec: Spec,
    buffers: SampleBuffers,
    cfg: LossConfig,
    rng: np.random.Generator,
    opt_v: AdamState | None = None,
    opt_pi: AdamState | None = None,
) -> tuple[Network, Network, list[LossTraceRow]]:
    """Run one learner iteration: several epochs of batched updates.

    Random stores are refreshed with fresh samples each epoch (unless
    disabled); counterexample stores are left to the caller.  Returns the
    updated networks and one averaged trace row per epoch.  A non-finite
    loss raises ArithmeticError with the offending values.
    """
    if opt_v is None:
        opt_v = AdamState.for_network(V, lr=cfg.lr_v)
    if opt_pi is None:
        opt_pi = AdamState.for_network(pi, lr=cfg.lr_pi)
    per_batch_random = max(1, int(round(cfg.batch_size * (1.0 - cfg.cex_fraction))))
    steps = max(1, math.ceil(buffers.random_capacity / per_batch_random))
    trace: list[LossTraceRow] = []
    for epoch in range(cfg.epochs):
        if cfg.resample_each_epoch or buffers.p_decrease.size == 0:
            buffers.refresh_random(sys, rng)
        sums = np.zeros(5)
        for _ in range(steps):
            p0 = _draw_batch(
                buffers.p_init, buffers.c_init, cfg.batch_size, cfg.cex_fraction, rng
            )
            pu = _draw_batch(
                buffers.p_unsafe,
                buffers.c_unsafe,
                cfg.batch_size,
                cfg.cex_fraction,
                rng,
            )
            pe = _draw_batch(
                buffers.p_decrease,
                buffers.c_decrease,
                cfg.batch_size,
                cfg.cex_fraction,
                rng,
            )
            ws = sample_noise(sys, rng, len(pe) * cfg.n_noise)
            values, gV, gPi = loss_and_gradients(
                V, pi, sys, spec, cfg, p0, pu, pe, ws
            )
            if not math.isfinite(values.total):
                raise ArithmeticError(
                    f"non-finite loss: init={values.init!r} "
                    f"unsafe={values.unsafe!r} decrease={values.decrease!r} "
                    f"k_prime={values.k_prime!r}"
                )
            V = adam_step(V, gV, opt_v)
            pi = adam_step(pi, gPi, opt_pi)
            sums += (
                values.init,
                values.unsafe,
                values.decrease,
                values.total,
                values.k_prime,
            )
        means = sums / steps
        trace.append(
            LossTraceRow(
                epoch=epoch,
                loss_init=float(means[0]),
                loss_unsafe=float(means[1]),
                loss_decrease=float(means[2]),
                total=float(means[3]),
                tau=cfg.tau,
                k_prime=float(means[4]),
            )
        )
    return V, pi, trace
