"""Interval bound propagation and Lipschitz-constant machinery.

Everything here works with 1-norms: a bound L means
``||T(x) - T(x')||_1 <= L * ||x - x'||_1``. Weighted norms sharpen the
classical per-layer product bound; averaging over activation subsets sharpens
it further for ReLU networks. All bounds are sound upper bounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np

from .nets import IDENTITY, RELU, Network, forward

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("interval bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, v: float) -> bool:
        return self.lo <= v <= self.hi


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by per-dimension lower/upper bound arrays."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("box needs matching nonempty 1-D bound arrays")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box bounds must be finite")
        if (lo > hi).any():
            raise ValueError("box has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def mid(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def rad(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x)
        return bool((x >= self.lo).all() and (x <= self.hi).all())

    def intersects(self, other: "Box") -> bool:
        return bool((self.lo <= other.hi).all() and (other.lo <= self.hi).all())

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


def box_around(x: np.ndarray, radius: float) -> Box:
    x = np.asarray(x, dtype=np.float64)
    return Box(x - radius, x + radius)


# Per-layer outward widening covering accumulated float64 rounding, so that a
# sample sitting exactly on an extremizing corner cannot exit the interval by
# an ulp. Generous vs. the n*2^-53 dot-product error of widths <= a few hundred.
_ROUND_SLACK = 1e-13


def ibp_forward_batch(
    net: Network, lo: np.ndarray, hi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """IBP over a batch of boxes; rows of lo/hi are per-box bounds.

    Interval arithmetic through each affine layer via the positive/negative
    weight split, clamping at 0 for ReLU.  Bounds are widened by a
    rounding-error allowance per layer so a sample sitting exactly on an
    extremizing corner cannot exit by an ulp.  Every step — products with
    sign-split weights, same-shape summations, the allowance scaled by
    max(|lo|, |hi|), and the clamp — is monotone under box inclusion even
    after float rounding, so nested input boxes always yield nested output
    intervals.  Degenerate rows (lo == hi) reproduce the forward pass
    exactly instead.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if lo.shape != hi.shape:
        raise ValueError("lo/hi shape mismatch")
    squeeze = lo.ndim == 1
    if squeeze:
        lo, hi = lo[None, :], hi[None, :]
    if lo.shape[1] != net.in_dim:
        raise ValueError(f"box dim {lo.shape[1]} != network input {net.in_dim}")
    exact = (lo == hi).all(axis=1)
    widen = np.where(exact, 0.0, _ROUND_SLACK)[:, None]
    cur_lo, cur_hi = lo, hi
    for layer in net.layers:
        pos = np.maximum(layer.A, 0.0)
        neg = np.minimum(layer.A, 0.0)
        new_lo = cur_lo @ pos.T + cur_hi @ neg.T + layer.b
        new_hi = cur_hi @ pos.T + cur_lo @ neg.T + layer.b
        mag = np.maximum(np.abs(new_lo), np.abs(new_hi))
        new_lo = new_lo - widen * mag
        new_hi = new_hi + widen * mag
        if layer.act == RELU:
            new_lo = np.maximum(new_lo, 0.0)
            new_hi = np.maximum(new_hi, 0.0)
        cur_lo, cur_hi = new_lo, new_hi
    if exact.any():
        fx = forward(net, lo[exact])
        cur_lo = cur_lo.copy()
        cur_hi = cur_hi.copy()
        cur_lo[exact] = fx
        cur_hi[exact] = fx
    if squeeze:
        return cur_lo[0], cur_hi[0]
    return cur_lo, cur_hi


def ibp_forward(net: Network, box: Box) -> Box:
    """Sound per-output enclosure of {forward(net, x) : x in box}."""
    lo, hi = ibp_forward_batch(net, box.lo, box.hi)
    return Box(lo, hi)


def weighted_matrix_norm(M: np.ndarray, w_in: np.ndarray, w_out: np.ndarray) -> float:
    """Operator norm of M between weighted 1-norms:
    max over columns j of (1/w_in[j]) * sum_i w_out[i] * |M[i][j]|."""
    M = np.asarray(M, dtype=np.float64)
    w_in = np.asarray(w_in, dtype=np.float64)
    w_out = np.asarray(w_out, dtype=np.float64)
    if (w_in <= 0).any() or (w_out <= 0).any():
        raise ValueError("weights must be positive")
    if M.shape != (w_out.size, w_in.size):
        raise ValueError(f"matrix shape {M.shape} does not match weights")
    return float(((w_out @ np.abs(M)) / w_in).max())


@dataclass(frozen=True)
class WeightSystem:
    """Positive per-layer weight vectors, one per network interface 0..n,
    each normalized so its maximum entry is 1."""

    weights: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        for w in ws:
            if w.ndim != 1 or w.size == 0:
                raise ValueError("each weight vector must be nonempty 1-D")
            if (w <= 0).any():
                raise ValueError("weights must be positive")
            if abs(w.max() - 1.0) > 1e-12:
                raise ValueError("each weight vector must have maximum 1")
        object.__setattr__(self, "weights", ws)

    def matches(self, net: Network) -> bool:
        return tuple(w.size for w in self.weights) == net.dims


def unit_weights(net: Network) -> WeightSystem:
    return WeightSystem(tuple(np.ones(m) for m in net.dims))


class OptimalWeights(NamedTuple):
    w0: np.ndarray
    K: float
    system: WeightSystem


def optimal_weights(net: Network, w_out: np.ndarray | None = None) -> OptimalWeights:
    """Backward sweep choosing, per layer, the input weights that equalize all
    columns of the weighted norm; the resulting K is minimal among all weight
    systems with the same output weights.

    Zero columns would produce zero weights; they are floored at WEIGHT_FLOOR,
    which can only enlarge the bound. An all-zero layer gives K = 0.
    """
    dims = net.dims
    if w_out is None:
        w_out = np.ones(dims[-1])
    w_out = np.asarray(w_out, dtype=np.float64)
    if w_out.shape != (dims[-1],):
        raise ValueError("output weights have wrong length")
    if (w_out <= 0).any() or abs(w_out.max() - 1.0) > 1e-12:
        raise ValueError("output weights must be positive with maximum 1")

    ws: list[np.ndarray] = [None] * (len(dims))  # type: ignore[list-item]
    ws[-1] = w_out
    K = 1.0
    for l in range(len(net.layers), 0, -1):
        col = ws[l] @ np.abs(net.layers[l - 1].A)
        K_l = float(col.max())
        if K_l <= 0.0:
            ws[l - 1] = np.ones(dims[l - 1])
            K = 0.0
        else:
            ws[l - 1] = np.maximum(col / K_l, WEIGHT_FLOOR)
            K *= K_l
    system = WeightSystem(tuple(ws))
    return OptimalWeights(ws[0], K, system)


def naive_product_bound(net: Network) -> float:
    """Product of per-layer unweighted 1-norm operator norms."""
    K = 1.0
    for layer in net.layers:
        K *= float(np.abs(layer.A).sum(axis=0).max())
    return K


def averaged_bound(net: Network, ws: WeightSystem) -> float:
    """Lipschitz bound exploiting that ReLU is an averaged operator.

    Averages, over all 2^(n-1) subsets of the n-1 hidden activations, the
    product of weighted norms of the affine segments between the selected
    activations. The subset selecting every activation reproduces the plain
    per-layer product, so this bound is never worse than that product.
    """
    for layer in net.layers[:-1]:
        if layer.act != RELU:
            raise ValueError("averaged bound supports only ReLU hidden activations")
    if not ws.matches(net):
        raise ValueError("weight system does not match network dims")
    n = len(net.layers)
    # prod[i][j] = A_j ... A_{i+1}, the affine map from interface i to j
    prod: dict[tuple[int, int], np.ndarray] = {}
    for i in range(n):
        acc = net.layers[i].A
        prod[(i, i + 1)] = acc
        for j in range(i + 2, n + 1):
            acc = net.layers[j - 1].A @ acc
            prod[(i, j)] = acc
    seg_norm = {
        key: weighted_matrix_norm(M, ws.weights[key[0]], ws.weights[key[1]])
        for key, M in prod.items()
    }
    total = 0.0
    for r in range(n):
        for subset in combinations(range(1, n), r):
            breaks = (0,) + subset + (n,)
            term = 1.0
            for a, b in zip(breaks, breaks[1:]):
                term *= seg_norm[(a, b)]
            total += term
    return total / (2 ** (n - 1))


def sampled_lipschitz_lower(
    net: Network, domain: Box, trials: int, rng: np.random.Generator
) -> float:
    """Empirical lower bound: max 1-norm difference quotient over sampled pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if (domain.hi <= domain.lo).any():
        raise ValueError("domain must have positive volume")
    xs = domain.sample(rng, trials)
    ys = domain.sample(rng, trials)
    num = np.abs(forward(net, xs) - forward(net, ys)).sum(axis=1)
    den = np.abs(xs - ys).sum(axis=1)
    ok = den > 0
    if not ok.any():
        return 0.0
    return float((num[ok] / den[ok]).max())


def network_lipschitz(net: Network, method: str = "averaged") -> float:
    """Global 1-norm Lipschitz bound of the network.

    method "averaged": averaged bound under optimal weights (tightest here);
    "weighted": plain product under optimal weights; "product": naive product.
    """
    if method == "product":
        return naive_product_bound(net)
    opt = optimal_weights(net)
    if method == "weighted":
        return opt.K
    if method == "averaged":
        return averaged_bound(net, opt.system)
    raise ValueError(f"unknown Lipschitz method {method!r}")


def certificate_K(L_V: float, L_pi: float, L_fx: float, L_fu: float) -> float:
    """Lipschitz bound of x -> V(f(x, pi(x), w)) for fixed w, split over the
    state and action sensitivities of the dynamics."""
    if min(L_V, L_pi, L_fx, L_fu) < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    return L_V * (L_fx + L_fu * L_pi)


def certificate_K_naive(L_V: float, L_pi: float, L_fx: float, L_fu: float) -> float:
    """Coarser variant using a single dynamics constant L_f = max(L_fx, L_fu)."""
    if min(L_V, L_pi, L_fx, L_fu) < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    return L_V * max(L_fx, L_fu) * (L_pi + 1.0)


@dataclass
class LipschitzReport:
    """All bound variants for one network, plus a sampled lower bound."""

    net_id: str
    naive_product: float
    weighted: float
    weighted_averaged: float
    sampled_lower: float
    input_weights: np.ndarray
    runtime_ms: float

    CSV_HEADER = "net_id,naive,weighted,weighted_averaged,sampled_lower,runtime_ms"

    def csv_row(self) -> str:
        return (
            f"{self.net_id},{self.naive_product!r},{self.weighted!r},"
            f"{self.weighted_averaged!r},{self.sampled_lower!r},{self.runtime_ms!r}"
        )


def lipschitz_report(
    net: Network,
    domain: Box,
    trials: int,
    rng: np.random.Generator,
    net_id: str = "net",
) -> LipschitzReport:
    t0 = time.perf_counter()
    naive = naive_product_bound(net)
    opt = optimal_weights(net)
    avg = averaged_bound(net, opt.system)
    runtime_ms = (time.perf_counter() - t0) * 1000.0
    lower = sampled_lipschitz_lower(net, domain, trials, rng)
    return LipschitzReport(
        net_id=net_id,
        naive_product=naive,
        weighted=opt.K,
        weighted_averaged=avg,
        sampled_lower=lower,
        input_weights=opt.w0,
        runtime_ms=runtime_ms,
    )
