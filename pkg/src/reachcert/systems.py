"""Discrete-time stochastic systems: set layouts, triangular noise, benchmarks.

A system is a tuple of state space X, action space U, initial/target/unsafe
regions (finite unions of axis-aligned boxes), a noise model on [-1, 1]^p, and
a dynamics function x' = f(x, u, w) with known Lipschitz bounds L_fx and L_fu
in the 1-norm.  All bundled benchmarks use i.i.d. triangular noise per axis
and dynamics that are componentwise monotone in each noise coordinate, which
makes interval evaluation over a noise box exact via corner enumeration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .bounds import Box

Array = np.ndarray

__all__ = [
    "RectSet",
    "NoiseModel",
    "Dtss",
    "triangular_cdf",
    "triangular_cell_prob",
    "make_partition",
    "set_membership",
    "box_intersects",
    "step",
    "step_batch",
    "step_vjp_batch",
    "step_interval",
    "step_interval_batch",
    "benchmarks",
    "get_system",
    "system_names",
    "BENCHMARK_NAMES",
]


# --------------------------------------------------------------------------
# rectangle unions


@dataclass(frozen=True)
class RectSet:
    """Finite union of closed axis-aligned boxes of uniform dimension."""

    boxes: tuple[Box, ...]

    def __post_init__(self) -> None:
        if not self.boxes:
            raise ValueError("RectSet needs at least one box")
        dim = self.boxes[0].dim
        for b in self.boxes:
            if b.dim != dim:
                raise ValueError("RectSet boxes must share a dimension")

    @property
    def dim(self) -> int:
        return self.boxes[0].dim

    @property
    def volume(self) -> float:
        return float(sum(b.volume() for b in self.boxes))

    def contains(self, x: Array) -> bool:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return any(b.contains(x) for b in self.boxes)

    def contains_batch(self, xs: Array) -> Array:
        xs = np.asarray(xs, dtype=np.float64)
        hit = np.zeros(xs.shape[0], dtype=bool)
        for b in self.boxes:
            hit |= np.all((xs >= b.lo) & (xs <= b.hi), axis=1)
        return hit

    def intersects(self, cell: Box) -> bool:
        return any(b.intersects(cell) for b in self.boxes)

    def covers(self, cell: Box) -> bool:
        """Exact test of cell subset-of union(boxes), by box subtraction."""
        pieces = [(cell.lo.copy(), cell.hi.copy())]
        for b in self.boxes:
            nxt: list[tuple[Array, Array]] = []
            for plo, phi in pieces:
                olo = np.maximum(plo, b.lo)
                ohi = np.minimum(phi, b.hi)
                if np.any(olo >= ohi):
                    # no positive-volume overlap; piece survives whole
                    nxt.append((plo, phi))
                    continue
                # guillotine split: peel slabs outside the overlap, axis by axis
                clo, chi = plo.copy(), phi.copy()
                for i in range(len(plo)):
                    if clo[i] < olo[i]:
                        left_hi = chi.copy()
                        left_hi[i] = olo[i]
                        nxt.append((clo.copy(), left_hi))
                        clo = clo.copy()
                        clo[i] = olo[i]
                    if ohi[i] < chi[i]:
                        right_lo = clo.copy()
                        right_lo[i] = ohi[i]
                        nxt.append((right_lo, chi.copy()))
                        chi = chi.copy()
                        chi[i] = ohi[i]
                # the remaining core equals the overlap: removed
            pieces = nxt
            if not pieces:
                return True
        return not pieces

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        """Uniform samples from the union, boxes weighted by volume."""
        vols = np.array([b.volume() for b in self.boxes], dtype=np.float64)
        total = vols.sum()
        if total <= 0.0:
            raise ValueError("cannot sample from a zero-volume set")
        idx = rng.choice(len(self.boxes), size=n, p=vols / total)
        out = np.empty((n, self.dim), dtype=np.float64)
        for k, b in enumerate(self.boxes):
            sel = idx == k
            cnt = int(sel.sum())
            if cnt:
                out[sel] = b.lo + (b.hi - b.lo) * rng.random((cnt, self.dim))
        return out


def set_membership(s: RectSet, x: Array) -> bool:
    return s.contains(x)


def box_intersects(s: RectSet, cell: Box) -> bool:
    return s.intersects(cell)


def _rects(*pairs: tuple[tuple[float, ...], tuple[float, ...]]) -> RectSet:
    return RectSet(tuple(Box(np.array(lo, dtype=np.float64),
                             np.array(hi, dtype=np.float64))
                         for lo, hi in pairs))


# --------------------------------------------------------------------------
# triangular noise


def triangular_cdf(x: float) -> float:
    """CDF of the triangular density 1-|x| on [-1, 1]."""
    if x <= -1.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    if x <= 0.0:
        return (x + 1.0) ** 2 / 2.0
    return 1.0 - (1.0 - x) ** 2 / 2.0


def triangular_cell_prob(a: float, b: float) -> float:
    """Probability mass of [a, b] under the triangular density on [-1, 1]."""
    if not (-1.0 <= a <= b <= 1.0):
        raise ValueError(f"need -1 <= a <= b <= 1, got a={a}, b={b}")
    return triangular_cdf(b) - triangular_cdf(a)


@dataclass(frozen=True)
class NoiseModel:
    """Axis-aligned partition of the noise space [-1, 1]^p with cell masses."""

    dim: int
    cell_lo: Array  # (n_cells, dim)
    cell_hi: Array  # (n_cells, dim)
    probs: Array  # (n_cells,)
    cells_per_axis: int

    def __post_init__(self) -> None:
        n = self.probs.shape[0]
        if self.cell_lo.shape != (n, self.dim) or self.cell_hi.shape != (n, self.dim):
            raise ValueError("noise partition arrays have inconsistent shapes")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ValueError("noise cell masses must sum to 1")
        if np.any(self.probs < 0.0):
            raise ValueError("noise cell masses must be nonnegative")

    @property
    def n_cells(self) -> int:
        return self.probs.shape[0]

    def cell_boxes(self) -> Iterator[Box]:
        for k in range(self.n_cells):
            yield Box(self.cell_lo[k].copy(), self.cell_hi[k].copy())

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        return rng.triangular(-1.0, 0.0, 1.0, size=(n, self.dim))


def make_partition(p: int, cells_per_axis: int) -> NoiseModel:
    """Uniform grid partition of [-1, 1]^p with triangular cell masses."""
    if p < 1:
        raise ValueError("noise dimension must be >= 1")
    if cells_per_axis < 1:
        raise ValueError("cells_per_axis must be >= 1")
    edges = np.linspace(-1.0, 1.0, cells_per_axis + 1)
    axis_prob = np.array(
        [triangular_cell_prob(edges[i], edges[i + 1]) for i in range(cells_per_axis)]
    )
    idx = np.stack(
        np.meshgrid(*([np.arange(cells_per_axis)] * p), indexing="ij"), axis=-1
    ).reshape(-1, p)
    lo = edges[idx]
    hi = edges[idx + 1]
    probs = np.prod(axis_prob[idx], axis=1)
    return NoiseModel(dim=p, cell_lo=lo, cell_hi=hi, probs=probs,
                      cells_per_axis=cells_per_axis)


# --------------------------------------------------------------------------
# systems

DynFn = Callable[[Array, Array, Array], Array]
VjpFn = Callable[[Array, Array, Array, Array], tuple[Array, Array]]
CostFn = Callable[[Array], tuple[Array, Array]]


@dataclass(frozen=True, eq=False)
class Dtss:
    """Discrete-time stochastic system with rectangle-union reach-avoid sets.

    ``f_raw`` evaluates the dynamics on batches ``(B,d),(B,m),(B,p) -> (B,d)``
    before any state clamping.  ``f_vjp`` pulls a cotangent on the raw output
    back to ``(grad_x, grad_u)``.  ``pretrain_cost`` maps states ``(B,d)`` to
    per-state policy-pretraining costs and their state gradients.  Dynamics
    must be componentwise monotone in each noise coordinate; interval
    evaluation over a noise box relies on this.
    """

    name: str
    X: Box
    U: Box
    X0: RectSet
    XT: RectSet
    XU: RectSet
    noise_dim: int
    L_fx: float
    L_fu: float
    f_raw: DynFn
    f_vjp: VjpFn
    pretrain_cost: CostFn

    def __post_init__(self) -> None:
        if self.L_fx < 0.0 or self.L_fu < 0.0:
            raise ValueError("Lipschitz constants must be nonnegative")
        for label, s in (("X0", self.X0), ("XT", self.XT), ("XU", self.XU)):
            for b in s.boxes:
                if np.any(b.lo < self.X.lo) or np.any(b.hi > self.X.hi):
                    raise ValueError(f"{self.name}: {label} exceeds the state space")

    @property
    def state_dim(self) -> int:
        return self.X.dim

    @property
    def action_dim(self) -> int:
        return self.U.dim

    def dynamics(self, x: Array, u: Array, w: Array) -> Array:
        """Raw (unclamped) point evaluation of f."""
        x = _vec(x, self.state_dim)
        u = _vec(u, self.action_dim)
        w = _vec(w, self.noise_dim)
        return self.f_raw(x[None, :], u[None, :], w[None, :])[0]

    def dynamics_interval(self, x: Array, u: Array, wbox: Box) -> Box:
        return step_interval(self, x, u, wbox)

    def pretrain_loss(self, xs: Array) -> tuple[Array, Array]:
        return self.pretrain_cost(np.asarray(xs, dtype=np.float64))


def _vec(x: Array, d: int) -> Array:
    out = np.asarray(x, dtype=np.float64).reshape(-1)
    if out.shape != (d,):
        raise ValueError(f"expected a vector of length {d}, got shape {out.shape}")
    return out


def step_batch(sys: Dtss, xs: Array, us: Array, ws: Array) -> Array:
    """Clamped batch step: actions clipped to U, next states clipped to X."""
    us = np.clip(us, sys.U.lo, sys.U.hi)
    raw = sys.f_raw(xs, us, ws)
    if np.isnan(raw).any():
        raise ArithmeticError(f"{sys.name}: dynamics produced NaN")
    return np.clip(raw, sys.X.lo, sys.X.hi)


def step(sys: Dtss, x: Array, u: Array, w: Array) -> Array:
    x = _vec(x, sys.state_dim)
    u = _vec(u, sys.action_dim)
    w = _vec(w, sys.noise_dim)
    return step_batch(sys, x[None, :], u[None, :], w[None, :])[0]


def step_vjp_batch(
    sys: Dtss, xs: Array, us: Array, ws: Array, g: Array
) -> tuple[Array, Array]:
    """Pull a cotangent on the clamped next state back to (grad_x, grad_u).

    ``us`` must already lie in U (callers clamp policy outputs and apply their
    own clamp mask to grad_u).  Coordinates saturated by the state clamp get
    zero gradient.
    """
    raw = sys.f_raw(xs, us, ws)
    interior = (raw > sys.X.lo) & (raw < sys.X.hi)
    return sys.f_vjp(xs, us, ws, g * interior)


def step_interval_batch(
    sys: Dtss, xs: Array, us: Array, w_lo: Array, w_hi: Array
) -> tuple[Array, Array]:
    """Componentwise bounds of {step(x, u, w) : w in [w_lo, w_hi]} per row.

    Exact for dynamics that are componentwise monotone in each noise
    coordinate: the extrema are attained at corners of the noise box.
    """
    us = np.clip(us, sys.U.lo, sys.U.hi)
    n = xs.shape[0]
    lo = hi = None
    for corner in itertools.product(*zip(w_lo, w_hi)):
        ws = np.broadcast_to(np.array(corner, dtype=np.float64), (n, sys.noise_dim))
        out = sys.f_raw(xs, us, ws)
        if lo is None:
            lo, hi = out.copy(), out.copy()
        else:
            np.minimum(lo, out, out=lo)
            np.maximum(hi, out, out=hi)
    lo = np.clip(lo, sys.X.lo, sys.X.hi)
    hi = np.clip(hi, sys.X.lo, sys.X.hi)
    return lo, hi


def step_interval(sys: Dtss, x: Array, u: Array, wbox: Box) -> Box:
    x = _vec(x, sys.state_dim)
    u = _vec(u, sys.action_dim)
    if wbox.dim != sys.noise_dim:
        raise ValueError("noise box dimension mismatch")
    lo, hi = step_interval_batch(sys, x[None, :], u[None, :], wbox.lo, wbox.hi)
    return Box(lo[0], hi[0])


# --------------------------------------------------------------------------
# dynamics families


def _affine_dynamics(A: Array, Bm: Array, W: Array) -> tuple[DynFn, VjpFn]:
    A = np.asarray(A, dtype=np.float64)
    Bm = np.asarray(Bm, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)

    def f(xs: Array, us: Array, ws: Array) -> Array:
        return xs @ A.T + us @ Bm.T + ws @ W.T

    def vjp(xs: Array, us: Array, ws: Array, g: Array) -> tuple[Array, Array]:
        return g @ A, g @ Bm

    return f, vjp


def _norm_cost(target: Array, scale: float, offset: float) -> CostFn:
    """Cost scale*||x[:k] - target||_2 + offset over the leading coordinates."""
    target = np.asarray(target, dtype=np.float64)
    k = target.shape[0]

    def cost(xs: Array) -> tuple[Array, Array]:
        diff = xs[:, :k] - target
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        grads = np.zeros_like(xs)
        pos = dist > 0.0
        grads[pos, :k] = scale * diff[pos] / dist[pos, None]
        return scale * dist + offset, grads

    return cost


# --------------------------------------------------------------------------
# benchmark catalogue


def _linear_sys(name: str, X0: RectSet, XU: RectSet) -> Dtss:
    A = [[1.0, 0.045], [0.0, 0.9]]
    Bm = [[0.45], [0.5]]
    W = [[0.01, 0.0], [0.0, 0.005]]
    f, vjp = _affine_dynamics(A, Bm, W)
    return Dtss(
        name=name,
        X=Box(np.full(2, -1.5), np.full(2, 1.5)),
        U=Box(np.array([-1.0]), np.array([1.0])),
        X0=X0,
        XT=_rects(((-0.2, -0.2), (0.2, 0.2))),
        XU=XU,
        noise_dim=2,
        L_fx=1.0,
        L_fu=0.95,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=_norm_cost(np.zeros(2), 1.0, -1.0),
    )


def _build_linear_sys() -> Dtss:
    return _linear_sys(
        "linear-sys",
        X0=_rects(((-0.25, -0.1), (-0.2, 0.1)), ((0.2, -0.1), (0.25, 0.1))),
        XU=_rects(((-1.5, -1.5), (-1.4, 0.0)), ((1.4, 0.0), (1.5, 1.5))),
    )


def _build_linear_sys_hard() -> Dtss:
    return _linear_sys(
        "linear-sys-hard",
        X0=_rects(((-1.4, -0.1), (-1.3, 0.1)), ((1.3, -0.1), (1.4, 0.1))),
        XU=_rects(((-0.9, -0.2), (-0.7, 0.2)), ((0.7, -0.2), (0.9, 0.2))),
    )


def _build_pendulum() -> Dtss:
    delta, G, m, l, b = 0.05, 10.0, 0.15, 0.5, 0.1
    c_sin = -1.5 * G / (2.0 * l)
    c_u = 6.0 / (m * l * l)

    def pre(xs: Array, us: Array, ws: Array) -> Array:
        return (
            (1.0 - b) * xs[:, 1]
            + delta * (c_sin * np.sin(xs[:, 0] + np.pi) + c_u * us[:, 0])
            + 0.02 * ws[:, 1]
        )

    def f(xs: Array, us: Array, ws: Array) -> Array:
        z = np.clip(pre(xs, us, ws), -5.0, 5.0)
        return np.stack([xs[:, 0] + 0.01 * ws[:, 0] + delta * z, z], axis=1)

    def vjp(xs: Array, us: Array, ws: Array, g: Array) -> tuple[Array, Array]:
        p = pre(xs, us, ws)
        live = (np.abs(p) < 5.0).astype(np.float64)
        gz = (delta * g[:, 0] + g[:, 1]) * live
        gx = np.stack(
            [
                g[:, 0] + gz * delta * c_sin * np.cos(xs[:, 0] + np.pi),
                gz * (1.0 - b),
            ],
            axis=1,
        )
        gu = (gz * delta * c_u)[:, None]
        return gx, gu

    def cost(xs: Array) -> tuple[Array, Array]:
        vals = xs[:, 0] ** 2 + 0.1 * xs[:, 1] ** 2
        grads = np.stack([2.0 * xs[:, 0], 0.2 * xs[:, 1]], axis=1)
        return vals, grads

    return Dtss(
        name="pendulum",
        X=Box(np.full(2, -0.7), np.full(2, 0.7)),
        U=Box(np.array([-1.0]), np.array([1.0])),
        X0=_rects(((-0.3, -0.3), (0.3, 0.3))),
        XT=_rects(((-0.2, -0.2), (0.2, 0.2))),
        XU=_rects(((-0.7, -0.7), (-0.6, 0.0)), ((0.6, 0.0), (0.7, 0.7))),
        noise_dim=2,
        L_fx=1.7875,
        L_fu=8.4,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=cost,
    )


def _build_collision_avoid() -> Dtss:
    c1 = np.array([0.0, 1.0])
    c2 = np.array([0.0, -1.0])
    e2 = np.array([0.0, 1.0])
    k = 10.0 / 3.0

    def dists(xs: Array) -> tuple[Array, Array, Array, Array]:
        n1 = np.linalg.norm(xs - c1, axis=1)
        n2 = np.linalg.norm(xs - c2, axis=1)
        return np.minimum(k * n1, 1.0), np.minimum(k * n2, 1.0), n1, n2

    def f(xs: Array, us: Array, ws: Array) -> Array:
        d1, d2, _, _ = dists(xs)
        inner = d1[:, None] * us + (1.0 - d1)[:, None] * e2
        move = d2[:, None] * inner + (1.0 - d2)[:, None] * (-e2)
        return xs + 0.2 * move + 0.05 * ws

    def vjp(xs: Array, us: Array, ws: Array, g: Array) -> tuple[Array, Array]:
        d1, d2, n1, n2 = dists(xs)
        inner = d1[:, None] * us + (1.0 - d1)[:, None] * e2
        gu = 0.2 * (d2 * d1)[:, None] * g
        # d(move)/d(d1) = d2*(u - e2); d(move)/d(d2) = inner + e2
        a1 = d2 * np.sum(g * (us - e2), axis=1)
        a2 = np.sum(g * (inner + e2), axis=1)
        live1 = (k * n1 < 1.0) & (n1 > 0.0)
        live2 = (k * n2 < 1.0) & (n2 > 0.0)
        gd1 = np.where(live1, k / np.where(n1 > 0.0, n1, 1.0), 0.0)
        gd2 = np.where(live2, k / np.where(n2 > 0.0, n2, 1.0), 0.0)
        gx = g + 0.2 * (
            (a1 * gd1)[:, None] * (xs - c1) + (a2 * gd2)[:, None] * (xs - c2)
        )
        return gx, gu

    return Dtss(
        name="collision-avoid",
        X=Box(np.full(2, -1.0), np.full(2, 1.0)),
        U=Box(np.full(2, -1.0), np.full(2, 1.0)),
        X0=_rects(((-1.0, -0.6), (-0.9, 0.6)), ((0.9, -0.6), (1.0, 0.6))),
        XT=_rects(((-0.2, -0.2), (0.2, 0.2))),
        XU=_rects(((-0.3, -0.3), (0.3, 0.3)), ((-1.0, 0.7), (-0.7, 1.0))),
        noise_dim=2,
        L_fx=3.0,
        L_fu=0.2,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=_norm_cost(np.zeros(2), 1.0, -1.0),
    )


def _build_triple_integrator() -> Dtss:
    A = [[1.0, 0.045, 0.0], [0.0, 1.0, 0.045], [0.0, 0.0, 0.9]]
    Bm = [[0.35], [0.45], [0.5]]
    W = [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.005]]
    f, vjp = _affine_dynamics(A, Bm, W)

    def cost(xs: Array) -> tuple[Array, Array]:
        return np.sum(xs * xs, axis=1) - 1.0, 2.0 * xs

    return Dtss(
        name="triple-integrator",
        X=Box(np.full(3, -1.0), np.full(3, 1.0)),
        U=Box(np.array([-1.0]), np.array([1.0])),
        X0=_rects(
            ((-0.25, -0.25, -0.1), (-0.2, -0.2, 0.1)),
            ((0.2, 0.2, -0.1), (0.25, 0.25, 0.1)),
        ),
        XT=_rects(((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2))),
        XU=_rects(
            ((-1.0, -1.0, -1.0), (-0.9, -0.9, 0.0)),
            ((0.9, 0.9, 0.0), (1.0, 1.0, 1.0)),
        ),
        noise_dim=3,
        L_fx=1.045,
        L_fu=1.3,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=cost,
    )


def _build_planar_robot() -> Dtss:
    delta = 0.2
    goal = np.array([-0.8, 0.8])

    def f(xs: Array, us: Array, ws: Array) -> Array:
        s = xs[:, 1] + 2.0 * delta * us[:, 0]
        th = np.pi * us[:, 1]
        return np.stack(
            [
                xs[:, 0] + delta * s * np.cos(th) + 0.01 * ws[:, 0],
                xs[:, 1] + delta * s * np.sin(th) + 0.01 * ws[:, 1],
                xs[:, 2] + 2.0 * delta * us[:, 0],
            ],
            axis=1,
        )

    def vjp(xs: Array, us: Array, ws: Array, g: Array) -> tuple[Array, Array]:
        s = xs[:, 1] + 2.0 * delta * us[:, 0]
        th = np.pi * us[:, 1]
        ct, st = np.cos(th), np.sin(th)
        a = delta * (g[:, 0] * ct + g[:, 1] * st)  # cotangent on s
        gx = np.stack([g[:, 0], g[:, 1] + a, g[:, 2]], axis=1)
        gu = np.stack(
            [
                2.0 * delta * a + 2.0 * delta * g[:, 2],
                delta * s * np.pi * (-g[:, 0] * st + g[:, 1] * ct),
            ],
            axis=1,
        )
        return gx, gu

    target = _rects(((-1.0, 0.6, -1.0), (-0.6, 1.0, 1.0)))
    base = _norm_cost(goal, 10.0, 0.0)

    def cost(xs: Array) -> tuple[Array, Array]:
        vals, grads = base(xs)
        reached = target.contains_batch(xs)
        return vals - 10.0 * reached, grads

    return Dtss(
        name="planar-robot",
        X=Box(np.full(3, -1.0), np.full(3, 1.0)),
        U=Box(np.full(2, -1.0), np.full(2, 1.0)),
        X0=_rects(((0.4, -0.8, -0.1), (0.6, -0.6, 0.1))),
        XT=target,
        XU=_rects(
            ((-1.0, -1.0, -1.0), (-0.8, 0.0, 1.0)),
            ((-0.1, 0.8, -1.0), (1.0, 1.0, 1.0)),
            ((0.8, 0.0, -1.0), (1.0, 0.8, 1.0)),
            ((-0.4, -0.4, -1.0), (0.0, 0.1, 1.0)),
        ),
        noise_dim=2,
        L_fx=1.4,
        L_fu=0.4 * np.pi,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=cost,
    )


def _build_drone4d() -> Dtss:
    delta = 0.5
    target = _rects(((0.3, -0.5, 0.3, -0.5), (0.5, 0.5, 0.5, 0.5)))
    unsafe = _rects(
        ((0.2, -0.5, -0.5, -0.5), (0.5, 0.5, 0.3, 0.5)),
        ((0.0, -0.5, -0.5, -0.5), (0.2, 0.5, 0.1, 0.5)),
        ((-0.5, -0.5, 0.3, -0.5), (0.0, 0.5, 0.4, 0.5)),
    )

    def f(xs: Array, us: Array, ws: Array) -> Array:
        return np.stack(
            [
                xs[:, 0] + delta * (xs[:, 1] + 0.5 * delta * us[:, 0]),
                xs[:, 1] + delta * (-0.02 * xs[:, 1] ** 3 + us[:, 0]) + 0.01 * ws[:, 0],
                xs[:, 2] + delta * (xs[:, 3] + 0.5 * delta * us[:, 1]),
                xs[:, 3]
                + delta
                * (-0.01 * xs[:, 3] ** 3 + us[:, 1] - 0.1 * np.sin(np.pi * xs[:, 0]))
                + 0.01 * ws[:, 1],
            ],
            axis=1,
        )

    def vjp(xs: Array, us: Array, ws: Array, g: Array) -> tuple[Array, Array]:
        gx = np.stack(
            [
                g[:, 0] - g[:, 3] * delta * 0.1 * np.pi * np.cos(np.pi * xs[:, 0]),
                g[:, 0] * delta + g[:, 1] * (1.0 - delta * 0.06 * xs[:, 1] ** 2),
                g[:, 2],
                g[:, 2] * delta + g[:, 3] * (1.0 - delta * 0.03 * xs[:, 3] ** 2),
            ],
            axis=1,
        )
        gu = np.stack(
            [
                0.5 * delta * delta * g[:, 0] + delta * g[:, 1],
                0.5 * delta * delta * g[:, 2] + delta * g[:, 3],
            ],
            axis=1,
        )
        return gx, gu

    def cost(xs: Array) -> tuple[Array, Array]:
        # distance to the target center in the two position coordinates
        diff = xs[:, [0, 2]] - 0.4
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        grads = np.zeros_like(xs)
        pos = dist > 0.0
        grads[np.ix_(pos, [0, 2])] = diff[pos] / dist[pos, None]
        r = target.contains_batch(xs).astype(np.float64)
        r -= unsafe.contains_batch(xs).astype(np.float64)
        return dist - 10.0 * r, grads

    return Dtss(
        name="drone4D",
        X=Box(np.full(4, -0.5), np.full(4, 0.5)),
        U=Box(np.full(2, -0.5), np.full(2, 0.5)),
        X0=_rects(((-0.45, -0.1, -0.45, 0.25), (-0.35, 0.1, -0.35, 0.35))),
        XT=target,
        XU=unsafe,
        noise_dim=2,
        L_fx=1.5,
        L_fu=0.625,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=cost,
    )


def _build_toy_1d() -> Dtss:
    """Contractive 1-D system used as a small verification fixture."""

    def f(xs: Array, us: Array, ws: Array) -> Array:
        return 0.5 * xs + 0.01 * ws

    def vjp(xs: Array, us: Array, ws: Array, g: Array) -> tuple[Array, Array]:
        return 0.5 * g, np.zeros((xs.shape[0], 1))

    def cost(xs: Array) -> tuple[Array, Array]:
        return np.abs(xs[:, 0]), np.sign(xs)

    return Dtss(
        name="toy-1d",
        X=Box(np.array([-1.0]), np.array([1.0])),
        U=Box(np.array([-1.0]), np.array([1.0])),
        X0=_rects(((-0.25,), (0.25,))),
        XT=_rects(((-0.2,), (0.2,))),
        XU=_rects(((-1.0,), (-0.9,)), ((0.9,), (1.0,))),
        noise_dim=1,
        L_fx=0.5,
        L_fu=0.0,
        f_raw=f,
        f_vjp=vjp,
        pretrain_cost=cost,
    )


BENCHMARK_NAMES = (
    "linear-sys",
    "linear-sys-hard",
    "pendulum",
    "collision-avoid",
    "triple-integrator",
    "planar-robot",
    "drone4D",
)

_BUILDERS: dict[str, Callable[[], Dtss]] = {
    "linear-sys": _build_linear_sys,
    "linear-sys-hard": _build_linear_sys_hard,
    "pendulum": _build_pendulum,
    "collision-avoid": _build_collision_avoid,
    "triple-integrator": _build_triple_integrator,
    "planar-robot": _build_planar_robot,
    "drone4D": _build_drone4d,
    "toy-1d": _build_toy_1d,
}


def get_system(name: str) -> Dtss:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        known = ", ".join(sorted(_BUILDERS))
        raise KeyError(f"unknown system {name!r}; known systems: {known}") from None
    return builder()


def system_names() -> tuple[str, ...]:
    return tuple(_BUILDERS)


def benchmarks() -> dict[str, Dtss]:
    """The seven benchmark systems, keyed by name."""
    return {name: get_system(name) for name in BENCHMARK_NAMES}


def with_layout(
    sys: Dtss,
    X0: RectSet | None = None,
    XT: RectSet | None = None,
    XU: RectSet | None = None,
) -> Dtss:
    """Copy of a system with some reach-avoid sets replaced."""
    kwargs = {}
    if X0 is not None:
        kwargs["X0"] = X0
    if XT is not None:
        kwargs["XT"] = XT
    if XU is not None:
        kwargs["XU"] = XU
    return replace(sys, **kwargs) if kwargs else sys
