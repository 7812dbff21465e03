"""Grid-based certificate verification with local mesh refinement.

The verifier sweeps a covering grid of cells through the certificate
condition checks in batches.  Cells that fail softly are replaced by finer
subcells until everything passes, a pointwise violation is found, or a
budget runs out.  Checking a batch is pure, so batches are the natural unit
for parallel execution; the worklist is only mutated between batches and
the outcome does not depend on how batches are scheduled internally.
"""

from __future__ import annotations

import itertools
import math
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .bounds import Box, certificate_K, network_lipschitz
from .certificate import (
    CellVerdict,
    Cond,
    Spec,
    Status,
    check_cells,
    verdict_record,
)
from .nets import Network
from .systems import Dtss, NoiseModel

__all__ = [
    "GridCell",
    "GridCapacityError",
    "Verdict",
    "CexPoint",
    "CounterexampleSet",
    "VerifierStats",
    "VerifierOutcome",
    "VerifierConfig",
    "initial_grid",
    "refine_cell",
    "verify",
]


class GridCapacityError(RuntimeError):
    """Initial grid would exceed the configured cell cap."""


@dataclass(frozen=True)
class GridCell:
    """A grid point with its mesh.

    The cell is the max-norm ball of radius ``tau / d`` around the center
    (one-norm mesh ``tau``), intersected with the state space by the
    checker.  ``generation`` counts refinement steps from the initial grid.
    """

    center: tuple[float, ...]
    tau: float
    generation: int = 0


class Verdict(Enum):
    VERIFIED = "verified"
    COUNTEREXAMPLES = "counterexamples"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class CexPoint:
    """A grid point that violates one certificate condition."""

    x: tuple[float, ...]
    tau: float
    cond: Cond
    margin: float
    hard: bool


@dataclass
class CounterexampleSet:
    init: list[CexPoint] = field(default_factory=list)
    unsafe: list[CexPoint] = field(default_factory=list)
    decrease: list[CexPoint] = field(default_factory=list)

    def add(self, point: CexPoint) -> None:
        if point.cond is Cond.INIT:
            self.init.append(point)
        elif point.cond is Cond.UNSAFE:
            self.unsafe.append(point)
        else:
            self.decrease.append(point)

    def points(self, cond: Cond) -> np.ndarray:
        group = {
            Cond.INIT: self.init,
            Cond.UNSAFE: self.unsafe,
            Cond.DECREASE: self.decrease,
        }[cond]
        if not group:
            return np.empty((0, 0))
        return np.array([p.x for p in group], dtype=np.float64)

    @property
    def total(self) -> int:
        return len(self.init) + len(self.unsafe) + len(self.decrease)

    def is_empty(self) -> bool:
        return self.total == 0


@dataclass
class VerifierStats:
    cells_checked: int = 0
    refinements: int = 0
    max_generation: int = 0
    batches: int = 0
    violations_init: int = 0
    violations_unsafe: int = 0
    violations_decrease: int = 0
    hard_violations: int = 0
    floored_cells: int = 0
    wall_time: float = 0.0
    exhausted_reason: str | None = None
    lipschitz_certificate: float = 0.0
    lipschitz_policy: float = 0.0
    lipschitz_combined: float = 0.0


@dataclass
class VerifierOutcome:
    verdict: Verdict
    counterexamples: CounterexampleSet
    stats: VerifierStats


@dataclass(frozen=True)
class VerifierConfig:
    """Knobs for a verification run.

    ``max_cells`` caps the total number of cells ever enqueued; it guards
    memory as well as time, since the worklist is materialized.
    ``max_generation`` caps refinement depth; with at least two subdivisions
    per axis each generation halves the mesh, so depth stays small.
    """

    tau0: float = 0.01
    refine_cap: int = 10
    tau_min: float = 1e-7
    max_cells: int = 2_000_000
    batch_size: int = 4096
    max_generation: int = 20
    time_budget: float | None = None
    lipschitz_method: str = "averaged"

    def __post_init__(self) -> None:
        if self.tau0 <= 0.0:
            raise ValueError("tau0 must be positive")
        if self.refine_cap < 2:
            raise ValueError("refine_cap must be at least 2")
        if self.tau_min <= 0.0:
            raise ValueError("tau_min must be positive")


def _axis_centers(lo: float, hi: float, radius: float) -> np.ndarray:
    width = hi - lo
    if width <= 2.0 * radius:
        return np.array([0.5 * (lo + hi)])
    count = math.ceil(width / (2.0 * radius))
    centers = lo + radius + 2.0 * radius * np.arange(count)
    # the last cell may overhang; pull it back so the box stays inside
    return np.minimum(centers, hi - radius)


def _grid_size(X: Box, tau0: float) -> int:
    d = X.lo.shape[0]
    radius = tau0 / d
    total = 1
    for lo, hi in zip(X.lo, X.hi):
        width = hi - lo
        total *= 1 if width <= 2.0 * radius else math.ceil(width / (2.0 * radius))
    return total


def initial_grid(X: Box, tau0: float, max_cells: int | None = None) -> list[GridCell]:
    """Uniform covering grid over the box with one-norm mesh tau0."""
    if tau0 <= 0.0:
        raise ValueError("tau0 must be positive")
    if max_cells is not None:
        total = _grid_size(X, tau0)
        if total > max_cells:
            raise GridCapacityError(
                f"grid would hold {total} cells, cap is {max_cells}"
            )
    d = X.lo.shape[0]
    radius = tau0 / d
    axes = [_axis_centers(X.lo[i], X.hi[i], radius) for i in range(d)]
    cells = []
    for point in itertools.product(*axes):
        cells.append(GridCell(tuple(float(c) for c in point), float(tau0), 0))
    return cells


def refine_cell(
    cell: GridCell, new_mesh: float, tau_min: float = 0.0
) -> list[GridCell]:
    """Cover a cell exactly with subcells of mesh at most new_mesh.

    The subdivision count per axis is ceil(tau / new_mesh); the children
    tile the parent box exactly.  A requested mesh below tau_min is lifted
    to the floor before subdividing.
    """
    if not 0.0 < new_mesh < cell.tau:
        raise ValueError("new_mesh must lie strictly between 0 and the cell mesh")
    new_mesh = max(new_mesh, tau_min)
    k = math.ceil(cell.tau / new_mesh)
    # strict shrink is required for termination; k == 1 can only arise from
    # a suggested mesh at or above the current one
    k = max(k, 2)
    d = len(cell.center)
    child_tau = cell.tau / k
    child_radius = child_tau / d
    parent_radius = cell.tau / d
    offsets = [
        np.array(
            [c - parent_radius + (2 * i + 1) * child_radius for i in range(k)]
        )
        for c in cell.center
    ]
    children = []
    for point in itertools.product(*offsets):
        children.append(
            GridCell(
                tuple(float(c) for c in point), child_tau, cell.generation + 1
            )
        )
    return children


def _record(cell: GridCell, verdict: CellVerdict) -> CexPoint:
    return CexPoint(
        x=cell.center,
        tau=cell.tau,
        cond=verdict.cond if verdict.cond is not None else Cond.DECREASE,
        margin=float(verdict.margin) if verdict.margin is not None else 0.0,
        hard=verdict.status is Status.HARD_VIOLATION,
    )


def verify(
    V: Network,
    pi: Network,
    sys: Dtss,
    noise: NoiseModel,
    spec: Spec,
    cfg: VerifierConfig | None = None,
    verdict_sink: Callable[[str], None] | None = None,
    progress: Callable[[str], None] | None = None,
) -> VerifierOutcome:
    """Check the discrete certificate conditions over the whole state space.

    Returns Verified only when every cell of the final grid satisfies all
    applicable conditions.  A pointwise (hard) violation stops refinement:
    the current batch is finished to gather a rich counterexample set, then
    all violations found in it are returned.  Budget or capacity exhaustion
    is reported as a verdict with the still-unresolved soft violations
    attached, never as an exception.
    """
    if cfg is None:
        cfg = VerifierConfig()
    stats = VerifierStats()
    cex = CounterexampleSet()
    start = time.monotonic()

    L_V = network_lipschitz(V, method=cfg.lipschitz_method)
    L_pi = network_lipschitz(pi, method=cfg.lipschitz_method)
    K = certificate_K(L_V, L_pi, sys.L_fx, sys.L_fu)
    stats.lipschitz_certificate = L_V
    stats.lipschitz_policy = L_pi
    stats.lipschitz_combined = K

    if _grid_size(sys.X, cfg.tau0) > cfg.max_cells:
        stats.exhausted_reason = "capacity"
        stats.wall_time = time.monotonic() - start
        return VerifierOutcome(Verdict.EXHAUSTED, cex, stats)

    queue: deque[GridCell] = deque(initial_grid(sys.X, cfg.tau0))
    seen = {(c.center, c.tau) for c in queue}
    enqueued = len(queue)
    # soft violations that can no longer be refined (mesh floor, depth or
    # capacity limits); they stay outstanding until the run ends
    outstanding: list[CexPoint] = []
    capacity_hit = False

    def count_violation(point: CexPoint) -> None:
        if point.cond is Cond.INIT:
            stats.violations_init += 1
        elif point.cond is Cond.UNSAFE:
            stats.violations_unsafe += 1
        else:
            stats.violations_decrease += 1
        if point.hard:
            stats.hard_violations += 1

    while queue:
        if (
            cfg.time_budget is not None
            and time.monotonic() - start > cfg.time_budget
        ):
            stats.exhausted_reason = "time"
            break
        batch = [queue.popleft() for _ in range(min(cfg.batch_size, len(queue)))]
        xs = np.array([c.center for c in batch], dtype=np.float64)
        taus = np.array([c.tau for c in batch], dtype=np.float64)
        verdicts = check_cells(V, pi, sys, noise, spec, K, xs, taus)
        stats.cells_checked += len(batch)
        stats.batches += 1
        stats.max_generation = max(
            stats.max_generation, max(c.generation for c in batch)
        )
        if verdict_sink is not None:
            for row, cell, verdict in zip(xs, batch, verdicts):
                verdict_sink(verdict_record(row, cell.tau, verdict))

        hard_found = any(
            v.status is Status.HARD_VIOLATION for v in verdicts
        )
        for cell, verdict in zip(batch, verdicts):
            if verdict.status is Status.SATISFIED:
                continue
            point = _record(cell, verdict)
            count_violation(point)
            if hard_found:
                # finish collecting from this batch, then stop refining
                cex.add(point)
                continue
            # soft violation: shrink the cell if budgets allow
            if verdict.cond is Cond.DECREASE and verdict.lam is not None:
                target = max(cell.tau / cfg.refine_cap, verdict.lam)
            else:
                target = cell.tau / cfg.refine_cap
            target = min(target, math.nextafter(cell.tau, 0.0))
            blocked = None
            if cell.generation >= cfg.max_generation:
                blocked = "depth"
            elif cell.tau / 2.0 < cfg.tau_min:
                blocked = "mesh floor"
                stats.floored_cells += 1
            elif capacity_hit:
                blocked = "capacity"
            if blocked is None:
                children = refine_cell(cell, target, cfg.tau_min)
                if enqueued + len(children) > cfg.max_cells:
                    capacity_hit = True
                    stats.exhausted_reason = "capacity"
                    outstanding.append(point)
                    continue
                stats.refinements += 1
                for child in children:
                    key = (child.center, child.tau)
                    if key not in seen:
                        seen.add(key)
                        queue.append(child)
                        enqueued += 1
            else:
                if stats.exhausted_reason is None:
                    stats.exhausted_reason = blocked
                outstanding.append(point)
        if progress is not None:
            progress(
                f"cells={stats.cells_checked} queue={len(queue)} "
                f"violations={stats.violations_init}/"
                f"{stats.violations_unsafe}/{stats.violations_decrease}"
            )
        if hard_found:
            for point in outstanding:
                cex.add(point)
            stats.wall_time = time.monotonic() - start
            return VerifierOutcome(Verdict.COUNTEREXAMPLES, cex, stats)

    stats.wall_time = time.monotonic() - start
    if queue or outstanding or stats.exhausted_reason is not None:
        for point in outstanding:
            cex.add(point)
        return VerifierOutcome(Verdict.EXHAUSTED, cex, stats)
    return VerifierOutcome(Verdict.VERIFIED, cex, stats)
