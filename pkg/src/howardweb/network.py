"""The network step, path tracing, coalescence, and the dual forest.

Each open perturbed point connects to the nearest process point on the
next row up, ties broken by the fair sign attached to the stepping
site.  Two layers live here:

* reference operations on a :class:`WindowRealization` (exact, pure
  Python, used by fixtures and invariant tests), and
* self-materializing Monte Carlo drivers (``coalescence_time``,
  ``connectivity_experiment``) built on the compiled tracer, which grow
  their scan windows adaptively so results never depend on tuning.

The dual forest lives on midpoints between consecutive process points;
dual vertices carry doubled x-coordinates so all midpoint arithmetic is
exact integer arithmetic.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import _kernels
from .point_process import (
    BoundaryUnsound,
    RowPoints,
    WindowRealization,
)
from .rng_field import (
    LatticeSite,
    ModelConfig,
    derive_seed,
    law_tables,
    seed_state,
    tie_sign,
)


def field_args(cfg: ModelConfig, seed: int | None = None) -> tuple:
    """Kernel argument bundle for cfg (optionally under a replica seed)."""
    tab = law_tables(cfg.law)
    st = seed_state(seed) if seed is not None else cfg.state
    return (
        np.uint64(st),
        np.uint64(cfg.open_threshold),
        tab.cum,
        tab.dpack,
        tab.jdx,
        tab.jdy,
    )


def _cuts(cfg: ModelConfig) -> tuple[int, int]:
    tab = law_tables(cfg.law)
    return tab.x_cut, tab.y_cut


class DualVertex(NamedTuple):
    """Dual-forest vertex; ``x2`` is twice the x-coordinate (exact midpoints)."""

    x2: int
    y: int


@dataclass
class PathTrace:
    """One forward path: vertices[k] is the position after k steps."""

    start: LatticeSite
    vertices: list[LatticeSite]
    truncated: bool = False


@dataclass
class JointTrace:
    """Lockstep trace of several paths started at a common level.

    ``merge_events`` records (step index, surviving class, absorbed
    class); once merged, classes share all later vertices.
    """

    traces: list[PathTrace]
    merge_events: list[tuple[int, int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class CoalescenceSample:
    """Coalescence time of one path pair; ``time`` is None when censored."""

    separation: int
    time: int | None
    horizon: int

    @property
    def censored(self) -> bool:
        return self.time is None


def nearest_next(row: RowPoints, x: int) -> tuple[int, bool, bool]:
    """Distance to the nearest process point on ``row`` and which sides hit.

    Raises BoundaryUnsound when a nearer point could hide beyond the
    row's materialized x-range (bounds travel with the row when known).
    """
    xs = row.xs
    if not xs:
        raise BoundaryUnsound(f"row {row.y} empty over the materialized range")
    i = bisect.bisect_left(xs, x)
    d_left = x - xs[i - 1] if i > 0 else None
    d_right = xs[i] - x if i < len(xs) else None
    j = min(d for d in (d_left, d_right) if d is not None)
    lo = getattr(row, "x_lo", None)
    hi = getattr(row, "x_hi", None)
    if (lo is not None and x - j < lo) or (hi is not None and x + j > hi):
        raise BoundaryUnsound(
            f"nearest point at distance {j} from x={x} cannot be certified "
            f"inside columns [{lo}, {hi}]"
        )
    if j == 0:
        # point directly above: x-j and x+j coincide, a direct hit
        return 0, True, True
    return j, d_left == j, d_right == j


def ph_step(
    real: WindowRealization, cfg: ModelConfig, u: LatticeSite | tuple[int, int]
) -> LatticeSite:
    """One network step from ``u``: the nearest point one row up.

    A two-sided tie is resolved by the stepping site's tie sign
    (+1 right, -1 left); a point directly above is an unambiguous hit.
    """
    x, y = u
    row = real.row(y + 1)
    j, left, right = nearest_next(row, x)
    if j == 0:
        return LatticeSite(x, y + 1)
    if left and right:
        side = tie_sign(cfg, x, y)
        return LatticeSite(x + side * j, y + 1)
    return LatticeSite(x + j if right else x - j, y + 1)


def trace_path(
    real: WindowRealization,
    cfg: ModelConfig,
    start: LatticeSite | tuple[int, int],
    n_steps: int,
) -> PathTrace:
    """Iterate the network step n_steps times; truncation is flagged, not raised."""
    pos = LatticeSite(*start)
    vertices = [pos]
    truncated = False
    for _ in range(n_steps):
        try:
            pos = ph_step(real, cfg, pos)
        except BoundaryUnsound:
            truncated = True
            break
        vertices.append(pos)
    return PathTrace(start=LatticeSite(*start), vertices=vertices,
                     truncated=truncated)


def trace_joint(
    real: WindowRealization,
    cfg: ModelConfig,
    starts: Iterable[LatticeSite | tuple[int, int]],
    n_steps: int,
) -> JointTrace:
    """Advance paths in lockstep, recording first-contact merge events.

    After two classes share a vertex only one representative advances;
    the surviving class is the lower index.
    """
    starts = [LatticeSite(*s) for s in starts]
    if len({s.y for s in starts}) > 1:
        raise ValueError("joint trace starts must share one level")
    traces = [PathTrace(start=s, vertices=[s]) for s in starts]
    merge_events: list[tuple[int, int, int]] = []
    # class id per trace; merged traces share the surviving class
    rep = list(range(len(starts)))
    seen: dict[LatticeSite, int] = {}
    for i, s in enumerate(starts):
        if s in seen:
            merge_events.append((0, seen[s], i))
            rep[i] = seen[s]
        else:
            seen[s] = i
    positions = {rep[i]: s for i, s in enumerate(starts)}
    for step in range(1, n_steps + 1):
        new_pos: dict[int, LatticeSite] = {}
        truncated = False
        for cls in sorted(set(rep)):
            try:
                new_pos[cls] = ph_step(real, cfg, positions[cls])
            except BoundaryUnsound:
                truncated = True
                break
        if truncated:
            for t in traces:
                t.truncated = True
            break
        for i, t in enumerate(traces):
            t.vertices.append(new_pos[rep[i]])
        # merge classes that landed on the same vertex
        by_vertex: dict[LatticeSite, int] = {}
        for cls in sorted(new_pos):
            v = new_pos[cls]
            if v in by_vertex:
                survivor = by_vertex[v]
                merge_events.append((step, survivor, cls))
                rep = [survivor if c == cls else c for c in rep]
            else:
                by_vertex[v] = cls
        positions = {cls: new_pos[cls] for cls in set(rep)}
    return JointTrace(traces=traces, merge_events=merge_events)


_BLOCK_H = 512
_CLEAR0 = 48


def coalescence_time(
    cfg: ModelConfig,
    x1: LatticeSite | tuple[int, int],
    x2: LatticeSite | tuple[int, int],
    horizon: int,
    seed: int | None = None,
) -> CoalescenceSample:
    """First step at which the paths from x1 and x2 share a vertex.

    Runs the compiled tracer with adaptive window growth until merge or
    ``horizon`` (censoring).  ``seed`` overrides the config seed for
    replica runs.
    """
    x1 = LatticeSite(*x1)
    x2 = LatticeSite(*x2)
    if x1.y != x2.y:
        raise ValueError("coalescence requires a common start level")
    sep = abs(x2.x - x1.x)
    if sep == 0:
        return CoalescenceSample(separation=0, time=0, horizon=horizon)
    xs = np.array(sorted((x1.x, x2.x)), dtype=np.int64)
    tab_x, tab_y = _cuts(cfg)
    status, steps, _pos, merge_step, _ = _kernels.trace_free(
        *field_args(cfg, seed), tab_x, tab_y,
        xs, x1.y, horizon, _kernels.MODE_MERGE, _BLOCK_H, _CLEAR0,
    )
    if status != _kernels.OK:
        raise BoundaryUnsound("tracer exhausted its width-growth budget")
    time = int(merge_step) if merge_step >= 0 else None
    return CoalescenceSample(separation=sep, time=time, horizon=horizon)


def trace_endpoint(
    cfg: ModelConfig,
    start: LatticeSite | tuple[int, int],
    n_steps: int,
    seed: int | None = None,
) -> int:
    """x-coordinate after n_steps network steps from ``start`` (fast path)."""
    start = LatticeSite(*start)
    tab_x, tab_y = _cuts(cfg)
    status, steps, pos, _, _ = _kernels.trace_free(
        *field_args(cfg, seed), tab_x, tab_y,
        np.array([start.x], dtype=np.int64), start.y, n_steps,
        _kernels.MODE_FIXED, 2048, _CLEAR0,
    )
    if status != _kernels.OK or steps != n_steps:
        raise BoundaryUnsound("tracer exhausted its width-growth budget")
    return int(pos[0])


def dual_vertices(row: RowPoints) -> list[DualVertex]:
    """Midpoints between consecutive process points, in doubled coordinates."""
    return [
        DualVertex(x2=a + b, y=row.y)
        for a, b in zip(row.xs, row.xs[1:])
    ]


def _h1_doubled(real: WindowRealization, cfg: ModelConfig, x: int, y: int) -> int:
    """Doubled x-coordinate of the network step from the process point (x, y)."""
    return 2 * ph_step(real, cfg, (x, y)).x


def dual_step(
    real: WindowRealization, cfg: ModelConfig, v: DualVertex
) -> DualVertex:
    """One backward dual step: the midpoint straddled by the step images.

    On row y-1, a_l is the rightmost point whose forward step passes
    strictly left of the dual vertex and a_r the leftmost passing
    strictly right; forward steps are monotone in the start column, so
    the boundary is found by bisection.  Never crosses a forward edge.
    """
    row = real.row(v.y - 1)
    xs = row.xs
    if not xs:
        raise BoundaryUnsound(f"row {v.y - 1} empty over the materialized range")
    lo, hi = 0, len(xs) - 1
    # predicate p(i): 2*h(xs[i])(1) < v.x2 ; non-increasing in i
    if not _h1_doubled(real, cfg, xs[0], v.y - 1) < v.x2:
        raise BoundaryUnsound("left dual neighbour lies outside the window")
    if not _h1_doubled(real, cfg, xs[-1], v.y - 1) > v.x2:
        raise BoundaryUnsound("right dual neighbour lies outside the window")
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if _h1_doubled(real, cfg, xs[mid], v.y - 1) < v.x2:
            lo = mid
        else:
            hi = mid
    return DualVertex(x2=xs[lo] + xs[hi], y=v.y - 1)


def trace_dual(
    real: WindowRealization, cfg: ModelConfig, v: DualVertex, n_steps: int
) -> list[DualVertex]:
    """Backward dual path from ``v``; stops early when the window ends."""
    out = [v]
    for _ in range(n_steps):
        try:
            v = dual_step(real, cfg, v)
        except BoundaryUnsound:
            break
        out.append(v)
    return out


def _sign_changes(diffs: list[int]) -> int:
    """Number of strict sign reversals along a difference sequence."""
    changes = 0
    last = 0
    for d in diffs:
        s = (d > 0) - (d < 0)
        if s != 0:
            if last != 0 and s != last:
                changes += 1
            last = s
    return changes


def check_noncrossing(
    primal: list[PathTrace], dual: list[list[DualVertex]]
) -> int:
    """Count crossing violations among primal/primal and primal/dual pairs.

    A violation is a strict sign reversal of the position difference over
    the shared rows; touching (difference zero) is allowed.  Returns 0 on
    correct constructions.
    """
    violations = 0
    # primal vs primal (doubled coordinates for uniformity)
    for i in range(len(primal)):
        pi = primal[i]
        yi0 = pi.start.y
        for j in range(i + 1, len(primal)):
            pj = primal[j]
            yj0 = pj.start.y
            lo = max(yi0, yj0)
            hi = min(yi0 + len(pi.vertices) - 1, yj0 + len(pj.vertices) - 1)
            diffs = [
                2 * pi.vertices[y - yi0].x - 2 * pj.vertices[y - yj0].x
                for y in range(lo, hi + 1)
            ]
            violations += _sign_changes(diffs)
    # primal vs dual (dual rows descend)
    for pi in primal:
        yi0 = pi.start.y
        yi1 = yi0 + len(pi.vertices) - 1
        for dv in dual:
            if not dv:
                continue
            dtop = dv[0].y
            dbot = dv[-1].y
            lo = max(yi0, dbot)
            hi = min(yi1, dtop)
            diffs = [
                dv[dtop - y].x2 - 2 * pi.vertices[y - yi0].x
                for y in range(lo, hi + 1)
            ]
            violations += _sign_changes(diffs)
    return violations


def dump_trace(trace: PathTrace) -> str:
    """Text trace format: ``k x y`` per line (step index, position)."""
    return "\n".join(
        f"{k} {v.x} {v.y}" for k, v in enumerate(trace.vertices)
    ) + "\n"


def dump_dual_trace(vertices: list[DualVertex]) -> str:
    """Dual trace format: ``k x2 y D`` per line, doubled x-coordinate."""
    return "\n".join(
        f"{k} {v.x2} {v.y} D" for k, v in enumerate(vertices)
    ) + "\n"


def parse_trace_dump(text: str):
    """Round-trip parser for the trace formats; returns (points, is_dual)."""
    pts = []
    is_dual = False
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[-1] == "D":
            is_dual = True
            parts = parts[:-1]
        _k, x, y = (int(p) for p in parts)
        pts.append((x, y))
    return pts, is_dual


def spaced_starts(width: int, n_paths: int) -> list[int]:
    """n_paths columns spread evenly across [0, width]."""
    if n_paths == 1:
        return [width // 2]
    return sorted({round(i * width / (n_paths - 1)) for i in range(n_paths)})


def connectivity_merge_steps(
    cfg: ModelConfig,
    width: int,
    n_paths: int,
    height: int,
    replicas: int,
) -> np.ndarray:
    """Per-replica step at which all paths have coalesced (-1 if not by height)."""
    xs = np.array(spaced_starts(width, n_paths), dtype=np.int64)
    tab_x, tab_y = _cuts(cfg)
    out = np.empty(replicas, dtype=np.int64)
    for r in range(replicas):
        seed = derive_seed(cfg.seed, r)
        status, _steps, _pos, merge_step, _ = _kernels.trace_free(
            *field_args(cfg, seed), tab_x, tab_y,
            xs.copy(), 0, height, _kernels.MODE_MERGE, _BLOCK_H, _CLEAR0,
        )
        if status != _kernels.OK:
            raise BoundaryUnsound("tracer exhausted its width-growth budget")
        out[r] = merge_step
    return out


def connectivity_experiment(
    cfg: ModelConfig,
    width: int,
    n_paths: int,
    height: int,
    replicas: int = 100,
) -> float:
    """Fraction of replicas whose paths all coalesce within ``height`` steps."""
    if n_paths < 1:
        raise ValueError("need at least one path")
    if n_paths == 1:
        return 1.0
    steps = connectivity_merge_steps(cfg, width, n_paths, height, replicas)
    return float(np.mean((steps >= 0) & (steps <= height)))
