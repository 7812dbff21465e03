"""Reach-avoid certificate conditions evaluated over grid cells.

A certificate network V is checked against three conditions on a cell with
center x and 1-norm radius tau (the cell is the box x +- tau/d per axis,
clipped to the state space):

* Init: cells meeting the initial set need V_UB <= init_level.
* Unsafe: cells meeting the unsafe set need V_LB >= threshold.
* Decrease: cells meeting the complement of the target set, gated on
  V_LB < threshold, need the noise-partition upper bound on the expected
  next-step value, evaluated at the center, to lie strictly below
  V_LB - tau*K.

In log mode the certificate value is the logarithm of a classical
supermartingale, the expectation bound aggregates noise cells with a
log-sum-exp, and threshold/init_level are log(1/(1-rho)) and 0.  In plain
mode they are 1/(1-rho) and 1 and the aggregation is a weighted sum.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .bounds import Box, Interval, ibp_forward_batch
from .nets import Network, forward
from .systems import Dtss, NoiseModel, step_batch, step_interval_batch

Array = np.ndarray

__all__ = [
    "CertMode",
    "Status",
    "Cond",
    "Spec",
    "CellVerdict",
    "v_bounds",
    "log_expectation_upper",
    "expectation_upper_batch",
    "check_cell",
    "check_cells",
    "suggested_mesh",
    "pointwise_rasm_check",
    "verdict_record",
    "cell_box",
]


class CertMode(enum.Enum):
    LOG_RASM = "log-rasm"
    RASM = "rasm"


class Status(enum.Enum):
    SATISFIED = "satisfied"
    SOFT_VIOLATION = "soft"
    HARD_VIOLATION = "hard"


class Cond(enum.Enum):
    INIT = "init"
    UNSAFE = "unsafe"
    DECREASE = "decrease"


_SEVERITY = {Status.SATISFIED: 0, Status.SOFT_VIOLATION: 1, Status.HARD_VIOLATION: 2}
_COND_ORDER = (Cond.INIT, Cond.UNSAFE, Cond.DECREASE)


@dataclass(frozen=True)
class Spec:
    """Reach-avoid specification: reach the target with probability >= rho."""

    rho: float
    mode: CertMode = CertMode.LOG_RASM

    def __post_init__(self) -> None:
        if not (0.0 < self.rho < 1.0):
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")

    @property
    def threshold(self) -> float:
        """Required certificate level on unsafe cells."""
        if self.mode is CertMode.LOG_RASM:
            return float(-math.log1p(-self.rho))
        return float(1.0 / (1.0 - self.rho))

    @property
    def init_level(self) -> float:
        """Maximum certificate level on initial cells."""
        return 0.0 if self.mode is CertMode.LOG_RASM else 1.0


@dataclass(frozen=True)
class CellVerdict:
    """Outcome of checking one cell.

    ``margin`` is positive slack for the reported condition: cell-level slack
    for satisfied/soft outcomes, pointwise slack (negative) for hard
    violations.  ``lam`` is the suggested refinement mesh, present only on
    soft decrease violations.  ``cond`` is None when no condition applied.
    """

    status: Status
    cond: Cond | None
    margin: float | None
    lam: float | None = None


def cell_box(x: Array, tau: float, X: Box) -> Box:
    """Box of per-axis half-width tau/d around x, clipped to the state space."""
    x = np.asarray(x, dtype=np.float64)
    half = tau / x.shape[0]
    return Box(np.maximum(x - half, X.lo), np.minimum(x + half, X.hi))


def v_bounds(V: Network, cell: Box) -> Interval:
    """IBP range of a scalar-output network over a cell."""
    lo, hi = ibp_forward_batch(V, cell.lo[None, :], cell.hi[None, :])
    return Interval(float(lo[0, 0]), float(hi[0, 0]))


def expectation_upper_batch(
    V: Network,
    pi: Network,
    sys: Dtss,
    noise: NoiseModel,
    xs: Array,
    mode: CertMode = CertMode.LOG_RASM,
) -> Array:
    """Upper bound on the expected next-step certificate value per row.

    For each noise cell C the next-state box from (x, pi(x)) is bounded by
    interval propagation through V, giving U_C >= sup over C.  Log mode
    returns logsumexp(log P(C) + U_C), bounding log E[exp V(next)]; plain
    mode returns sum P(C) * U_C, bounding E[V(next)].
    """
    xs = np.asarray(xs, dtype=np.float64)
    us = np.clip(forward(pi, xs), sys.U.lo, sys.U.hi)
    vals = np.empty((xs.shape[0], noise.n_cells), dtype=np.float64)
    for k in range(noise.n_cells):
        lo, hi = step_interval_batch(sys, xs, us, noise.cell_lo[k], noise.cell_hi[k])
        _, ub = ibp_forward_batch(V, lo, hi)
        vals[:, k] = ub[:, 0]
    if mode is CertMode.RASM:
        return vals @ noise.probs
    shifted = vals + np.log(noise.probs)
    m = shifted.max(axis=1)
    return m + np.log(np.exp(shifted - m[:, None]).sum(axis=1))


def log_expectation_upper(
    V: Network,
    pi: Network,
    sys: Dtss,
    noise: NoiseModel,
    x: Array,
    mode: CertMode = CertMode.LOG_RASM,
) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(expectation_upper_batch(V, pi, sys, noise, x, mode)[0])


def suggested_mesh(v_at_center: float, v_lb: float, e_upper: float, K: float) -> float:
    """Mesh hint for refining a cell that fails the decrease condition.

    Combines a damped pointwise slack with the exact cell-level slack; the
    result can be nonpositive when the center itself has no slack, in which
    case the caller treats the cell as unrefinable.
    """
    if K <= 0.0:
        raise ValueError(f"K must be positive, got {K}")
    return max(0.8 * (v_at_center - e_upper) / K, (v_lb - e_upper) / K)


def check_cells(
    V: Network,
    pi: Network,
    sys: Dtss,
    noise: NoiseModel,
    spec: Spec,
    K: float,
    xs: Array,
    taus: Array,
) -> list[CellVerdict]:
    """Vectorized condition check over cells (centers xs, 1-norm radii taus)."""
    xs = np.asarray(xs, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    n, d = xs.shape
    half = taus[:, None] / d
    los = np.maximum(xs - half, sys.X.lo)
    his = np.minimum(xs + half, sys.X.hi)

    vlo, vhi = ibp_forward_batch(V, los, his)
    v_lb, v_ub = vlo[:, 0], vhi[:, 0]
    v_at = forward(V, xs)[:, 0]

    init_active = _intersects_batch(sys.X0, los, his)
    unsafe_active = _intersects_batch(sys.XU, los, his)
    dec_active = ~_covers_batch(sys.XT, los, his) & (v_lb < spec.threshold)

    e_upper = np.full(n, -np.inf)
    if dec_active.any():
        idx = np.flatnonzero(dec_active)
        e_upper[idx] = expectation_upper_batch(V, pi, sys, noise, xs[idx], spec.mode)

    in_x0 = sys.X0.contains_batch(xs)
    in_xu = sys.XU.contains_batch(xs)
    in_xt = sys.XT.contains_batch(xs)

    verdicts: list[CellVerdict] = []
    for i in range(n):
        entries: list[tuple[Cond, Status, float, float | None]] = []
        if init_active[i]:
            margin = spec.init_level - v_ub[i]
            if margin >= 0.0:
                entries.append((Cond.INIT, Status.SATISFIED, margin, None))
            elif in_x0[i] and v_at[i] > spec.init_level:
                entries.append(
                    (Cond.INIT, Status.HARD_VIOLATION, spec.init_level - v_at[i], None)
                )
            else:
                entries.append((Cond.INIT, Status.SOFT_VIOLATION, margin, None))
        if unsafe_active[i]:
            margin = v_lb[i] - spec.threshold
            if margin >= 0.0:
                entries.append((Cond.UNSAFE, Status.SATISFIED, margin, None))
            elif in_xu[i] and v_at[i] < spec.threshold:
                entries.append(
                    (Cond.UNSAFE, Status.HARD_VIOLATION, v_at[i] - spec.threshold, None)
                )
            else:
                entries.append((Cond.UNSAFE, Status.SOFT_VIOLATION, margin, None))
        if dec_active[i]:
            margin = (v_lb[i] - taus[i] * K) - e_upper[i]
            if margin > 0.0:
                entries.append((Cond.DECREASE, Status.SATISFIED, margin, None))
            elif (
                not in_xt[i]
                and v_at[i] < spec.threshold
                and e_upper[i] >= v_at[i]
            ):
                entries.append(
                    (Cond.DECREASE, Status.HARD_VIOLATION, v_at[i] - e_upper[i], None)
                )
            else:
                lam = None
                if K > 0.0:
                    lam = suggested_mesh(v_at[i], v_lb[i], e_upper[i], K)
                    lam = lam if lam > 0.0 else None
                entries.append((Cond.DECREASE, Status.SOFT_VIOLATION, margin, lam))
        verdicts.append(_worst(entries))
    return verdicts


def _worst(entries: list[tuple[Cond, Status, float, float | None]]) -> CellVerdict:
    if not entries:
        return CellVerdict(Status.SATISFIED, None, None, None)
    top = max(_SEVERITY[e[1]] for e in entries)
    picked = [e for e in entries if _SEVERITY[e[1]] == top]
    if top == 0:
        cond, status, margin, lam = min(picked, key=lambda e: e[2])
    else:
        cond, status, margin, lam = min(picked, key=lambda e: _COND_ORDER.index(e[0]))
    return CellVerdict(status, cond, float(margin), lam)


def check_cell(
    V: Network,
    pi: Network,
    sys: Dtss,
    noise: NoiseModel,
    spec: Spec,
    K: float,
    cell: tuple[Array, float],
) -> CellVerdict:
    x, tau = cell
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return check_cells(V, pi, sys, noise, spec, K, x, np.array([tau]))[0]


def _intersects_batch(s, los: Array, his: Array) -> Array:
    hit = np.zeros(los.shape[0], dtype=bool)
    for b in s.boxes:
        hit |= np.all((los <= b.hi) & (his >= b.lo), axis=1)
    return hit


def _covers_batch(s, los: Array, his: Array) -> Array:
    if len(s.boxes) == 1:
        b = s.boxes[0]
        return np.all((los >= b.lo) & (his <= b.hi), axis=1)
    out = np.zeros(los.shape[0], dtype=bool)
    maybe = _intersects_batch(s, los, his)
    for i in np.flatnonzero(maybe):
        out[i] = s.covers(Box(los[i], his[i]))
    return out


def pointwise_rasm_check(
    V: Network,
    pi: Network,
    sys: Dtss,
    spec: Spec,
    x: Array,
    mc_samples: int,
    seed: int,
) -> dict:
    """Monte-Carlo probe of the decrease condition at a single state.

    Test oracle only: estimates E[V(next)] (plain mode) or log E[exp V(next)]
    (log mode) by sampling the noise, with a standard error, and compares
    against V(x).  Never used for soundness claims.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    u = np.clip(forward(pi, x), sys.U.lo, sys.U.hi)
    ws = rng.triangular(-1.0, 0.0, 1.0, (mc_samples, sys.noise_dim))
    nxt = step_batch(
        sys,
        np.broadcast_to(x, (mc_samples, x.shape[0])).copy(),
        np.broadcast_to(u, (mc_samples, u.shape[0])).copy(),
        ws,
    )
    vals = forward(V, nxt)[:, 0]
    v_here = float(forward(V, x)[0])
    if spec.mode is CertMode.LOG_RASM:
        m = vals.max()
        mean_exp = float(np.mean(np.exp(vals - m)))
        estimate = m + math.log(mean_exp)
        se_exp = float(np.std(np.exp(vals - m), ddof=1)) / math.sqrt(mc_samples)
        std_error = se_exp / mean_exp  # delta method for log of a mean
    else:
        estimate = float(vals.mean())
        std_error = float(np.std(vals, ddof=1)) / math.sqrt(mc_samples)
    return {
        "value": v_here,
        "estimate": estimate,
        "std_error": std_error,
        "decrease": v_here - estimate,
    }


def verdict_record(x: Array, tau: float, verdict: CellVerdict) -> str:
    """One JSONL line describing a cell verdict."""
    return json.dumps(
        {
            "x": [float(v) for v in np.asarray(x).reshape(-1)],
            "tau": float(tau),
            "cond": verdict.cond.value if verdict.cond is not None else None,
            "status": verdict.status.value,
            "margin": verdict.margin,
            "lambda": verdict.lam,
        },
        separators=(",", ":"),
    )
