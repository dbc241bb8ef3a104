"""Renewal structure along traced paths.

A step is a tau step when, for every traced path, the next ``horizon_l``
steps stay inside the parabolic envelope anchored at the current
position (the finite-horizon surrogate for the full confinement event).
A tau step is a renewal when the information set is empty: no explored
source at or below the current level has landed strictly above it
inside any path's envelope.  Between renewals the x-increments of a
single path form an i.i.d. symmetric sequence, which is what the
statistics downstream consume.

Exactness bookkeeping: upward landings are enumerated from the window
scan, which is exhaustive for the sampled law below the current level;
the only approximation is the horizontal reach of the scan.  A landing
at height D above the level can only occupy an envelope within D**2
columns, so a window reaching ``cap**2`` columns from the paths misses
occupants with probability at most ``occupancy_residual(law, p, cap)``,
which the drivers keep below an explicit ``eps_out`` budget.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .network import field_args
from .point_process import (
    BoundaryUnsound,
    WindowRealization,
)
from .rng_field import (
    LatticeSite,
    ModelConfig,
    PerturbationLaw,
    law_tables,
)


class ParabolicEnvelope(NamedTuple):
    """The region y >= apex.y, |x - apex.x| <= (y - apex.y)**2."""

    apex: LatticeSite


def envelope_contains(env: ParabolicEnvelope, pt) -> bool:
    """Exact integer membership test."""
    x, y = pt
    dy = y - env.apex.y
    if dy < 0:
        return False
    return abs(x - env.apex.x) <= dy * dy


@dataclass
class TauStep:
    step_index: int
    positions: list[LatticeSite]
    horizon_used: int


@dataclass
class RenewalRecord:
    """One detected renewal: total step count, positions, increment."""

    sigma_index: int
    positions: list[LatticeSite]
    increment: tuple[int, int] | None  # (dx, dy) from the previous renewal
    horizon_used: int


@dataclass
class HeightSample:
    j: int          # tau index
    tau: int        # step of this tau event
    L: int          # height of the information set above the level
    N_next: int     # contribution of newly explored vertices (with +1)


@dataclass
class RenewalScan:
    renewals: list[RenewalRecord]
    taus: list[TauStep]
    heights: list[HeightSample]
    steps_scanned: int
    truncated: bool


def shield_product_bound(p0: float, l: int | None = None) -> float:
    """Lower bound on the confinement probability from a special-point shield.

    The product of (1 - (1-p0)^(2m-1))^2 over shield levels m = 1..l;
    ``l=None`` evaluates to convergence (terms approach one
    geometrically, so the tail beyond a computable level is below 1e-15).
    """
    if not 0.0 < p0 <= 1.0:
        raise ValueError("p0 must lie in (0, 1]")
    if p0 == 1.0:
        return 1.0
    q = 1.0 - p0
    out = 1.0
    m = 1
    while True:
        if l is not None and m > l:
            break
        term = 1.0 - q ** (2 * m - 1)
        out *= term * term
        if l is None and q ** (2 * m - 1) < 0.25e-15:
            break
        m += 1
    return out


def occupancy_residual(law: PerturbationLaw, p: float, cap: int) -> float:
    """Upper bound on E[# envelope occupants above height ``cap``].

    A landing at height D sits over at most 2 D^2 + 1 columns of the
    envelope and requires a perturbation of at least D; summing the tail
    bounds the expected number (hence probability) of missed occupants
    per emptiness check.
    """
    tab = law_tables(law)
    total = 0.0
    for d in range(cap + 1, tab.y_cut + 1):
        total += (2 * d * d + 1) * p * (
            law.y_tail(d) - law.y_tail(d + 1)
        )
    return total


def height_cap_for_budget(law: PerturbationLaw, p: float, eps_out: float) -> int:
    """Smallest height cap whose occupancy residual fits the budget."""
    tab = law_tables(law)
    cap = 1
    while cap < tab.y_cut and occupancy_residual(law, p, cap) > eps_out:
        cap += 1
    return cap


def in_event_horizon(
    real: WindowRealization, cfg: ModelConfig, v, l: int
) -> bool:
    """True iff the first l steps from v stay inside v's envelope."""
    from .network import ph_step

    v = LatticeSite(*v)
    env = ParabolicEnvelope(apex=v)
    pos = v
    for _ in range(l):
        pos = ph_step(real, cfg, pos)  # BoundaryUnsound propagates
        if not envelope_contains(env, pos):
            return False
    return True


class _UpwardIndex:
    """Row-indexed view of the upward landings for occupancy queries."""

    def __init__(self, real: WindowRealization):
        up = real.upward
        order = np.lexsort((up.x, up.land_y))
        self.x = up.x[order]
        self.src = up.src_y[order]
        self.land = up.land_y[order]
        self.real = real

    def occupants(self, apex, floor: int | None, cap: int):
        """Landings strictly above apex.y inside its envelope.

        Only heights up to ``cap`` are inspected; the caller accounts for
        the residual.  Returns a list of (x, src_y, land_y).
        """
        ax, ay = apex
        out = []
        for dlt in range(1, cap + 1):
            ly = ay + dlt
            a = int(np.searchsorted(self.land, ly, side="left"))
            b = int(np.searchsorted(self.land, ly, side="right"))
            if a == b:
                continue
            r = dlt * dlt
            lo = int(np.searchsorted(self.x[a:b], ax - r, side="left")) + a
            hi = int(np.searchsorted(self.x[a:b], ax + r, side="right")) + a
            for i in range(lo, hi):
                if self.src[i] <= ay and (floor is None or self.src[i] >= floor):
                    out.append((int(self.x[i]), int(self.src[i]), int(self.land[i])))
        return out


def _up_index(real: WindowRealization) -> _UpwardIndex:
    idx = getattr(real, "_up_index", None)
    if idx is None:
        idx = _UpwardIndex(real)
        real._up_index = idx
    return idx


def out_event(
    real: WindowRealization,
    v,
    explored_floor: int | None = None,
    budget: float | None = None,
) -> bool:
    """True iff no explored source at or below v's level lands strictly
    above it inside its envelope.

    Occupants are read from the realization's upward-landing records;
    heights beyond the window's certified horizontal reach contribute at
    most the ``budget`` (default: the window epsilon), else
    BoundaryUnsound is raised.
    """
    v = LatticeSite(*v)
    cfg = real.cfg
    spec = real.spec
    budget = spec.epsilon if budget is None else budget
    tab = law_tables(cfg.law)
    reach = min(v.x - spec.x_lo, spec.x_hi - v.x)
    if reach < 0:
        raise BoundaryUnsound("apex outside the materialized columns")
    cap = min(tab.y_cut, int(math.isqrt(reach)) if reach > 0 else 0)
    if cap < tab.y_cut and occupancy_residual(cfg.law, cfg.p, cap) > budget:
        raise BoundaryUnsound(
            f"window reach certifies occupancy only up to height {cap}; "
            f"residual exceeds budget {budget:g}"
        )
    return not _up_index(real).occupants(v, explored_floor, cap)


def _tau_flags_range(positions: np.ndarray, lo: int, hi: int, l: int) -> np.ndarray:
    """In-horizon flags for candidate steps m in [lo, hi].

    flags[i] (for m = lo + i) says every path's next l steps stay in the
    envelope of its step-m position; ``positions`` must reach row hi + l.
    """
    if hi < lo:
        return np.zeros(0, dtype=bool)
    count = hi - lo + 1
    flags = np.ones(count, dtype=bool)
    base = positions[lo: hi + 1, :]
    for j in range(1, l + 1):
        d = np.abs(positions[lo + j: hi + 1 + j, :] - base)
        flags &= (d <= j * j).all(axis=1)
    return flags


def _tau_flags(positions: np.ndarray, l: int) -> np.ndarray:
    """Flags for all candidates 1..n-l (index 0 unused, kept False)."""
    n = positions.shape[0] - 1
    m_max = n - l
    if m_max < 1:
        return np.zeros(0, dtype=bool)
    flags = np.zeros(m_max + 1, dtype=bool)
    flags[1:] = _tau_flags_range(positions, 1, m_max, l)
    return flags


def _occupancy_series(
    up_x: np.ndarray, up_src: np.ndarray, up_land: np.ndarray,
    positions: np.ndarray, y0: int, cap: int,
):
    """Per-step information-set occupancy and height.

    occupied[m] says some explored source row <= y0+m landed strictly
    above level y0+m inside a live path's envelope; height[m] is the
    maximal overshoot (0 if empty).  Landings are expanded over their
    activity ranges and checked vectorized.
    """
    n = positions.shape[0] - 1
    occupied = np.zeros(n + 1, dtype=bool)
    height = np.zeros(n + 1, dtype=np.int64)
    if len(up_x) == 0:
        return occupied, height
    m_lo = np.maximum(np.maximum(up_src - y0, up_land - y0 - cap), 0)
    m_hi = np.minimum(up_land - y0 - 1, n)
    lens = np.maximum(m_hi - m_lo + 1, 0)
    keep = lens > 0
    if not keep.any():
        return occupied, height
    m_lo, lens = m_lo[keep], lens[keep]
    lx = np.repeat(up_x[keep], lens)
    ly = np.repeat(up_land[keep], lens)
    starts = np.repeat(np.cumsum(lens) - lens, lens)
    ms = m_lo.repeat(lens) + (np.arange(lens.sum()) - starts)
    d = ly - (y0 + ms)
    r = d * d
    hit = np.zeros(len(ms), dtype=bool)
    for c in range(positions.shape[1]):
        hit |= np.abs(lx - positions[ms, c]) <= r
    ms_hit = ms[hit]
    occupied[ms_hit] = True
    np.maximum.at(height, ms_hit, d[hit])
    return occupied, height


def detect_renewals(
    real: WindowRealization,
    cfg: ModelConfig,
    starts,
    max_steps: int,
    horizon_l: int = 64,
    eps_out: float | None = None,
    emit_heights: bool = True,
    height_cap: int | None = None,
) -> RenewalScan:
    """Scan a joint trace for tau steps and renewals on a realization.

    A step n is a tau step when the horizon confinement holds for all
    paths; a tau step is a renewal when additionally no explored source
    row <= n lands strictly above level n inside any path's envelope.
    Truncation (window too short for max_steps + horizon) is flagged.
    """
    from .network import trace_joint

    starts = [LatticeSite(*s) for s in starts]
    y0 = starts[0].y
    eps_out = real.spec.epsilon if eps_out is None else eps_out
    tab = law_tables(cfg.law)

    jt = trace_joint(real, cfg, starts, max_steps + horizon_l)
    n_avail = min(len(t.vertices) for t in jt.traces) - 1
    truncated = n_avail < max_steps + horizon_l
    positions = np.array(
        [[t.vertices[m].x for t in jt.traces] for m in range(n_avail + 1)],
        dtype=np.int64,
    )

    # certified occupancy height reach for the whole sweep
    span_lo = int(positions.min())
    span_hi = int(positions.max())
    reach = min(span_lo - real.spec.x_lo, real.spec.x_hi - span_hi)
    if reach < 0:
        raise BoundaryUnsound("paths left the materialized columns")
    cap = min(tab.y_cut, int(math.isqrt(reach)))
    if height_cap is not None:
        if height_cap > cap:
            raise BoundaryUnsound(
                f"window reach certifies occupancy only to height {cap}")
        cap = height_cap
    elif cap < tab.y_cut and occupancy_residual(cfg.law, cfg.p, cap) > eps_out:
        raise BoundaryUnsound(
            f"occupancy residual at height cap {cap} exceeds eps_out; "
            "widen the window"
        )

    flags = _tau_flags(positions, horizon_l)
    up = real.upward
    occupied, height = _occupancy_series(up.x, up.src_y, up.land_y,
                                         positions, y0, cap)

    taus: list[TauStep] = []
    heights: list[HeightSample] = []
    renewals: list[RenewalRecord] = []
    prev_tau = 0
    prev_renewal_pos: list[LatticeSite] | None = None
    up_order = np.argsort(up.src_y, kind="stable")
    src_sorted = up.src_y[up_order]

    for m in range(1, len(flags)):
        if not flags[m]:
            continue
        pos_m = [LatticeSite(int(positions[m, c]), y0 + m)
                 for c in range(positions.shape[1])]
        taus.append(TauStep(step_index=m, positions=pos_m,
                            horizon_used=horizon_l))
        if emit_heights:
            n_next = _new_contribution(
                up, up_order, src_sorted, positions, y0, prev_tau, m, cap)
            heights.append(HeightSample(
                j=len(taus), tau=m, L=int(height[m]), N_next=n_next))
        if not occupied[m]:
            inc = None
            if prev_renewal_pos is not None:
                inc = (pos_m[0].x - prev_renewal_pos[0].x,
                       pos_m[0].y - prev_renewal_pos[0].y)
            renewals.append(RenewalRecord(
                sigma_index=m, positions=pos_m, increment=inc,
                horizon_used=horizon_l))
            prev_renewal_pos = pos_m
        prev_tau = m
    return RenewalScan(renewals=renewals, taus=taus, heights=heights,
                       steps_scanned=len(flags) - 1 if len(flags) else 0,
                       truncated=truncated)


def _new_contribution(up, up_order, src_sorted, positions, y0,
                      prev_tau, m, cap) -> int:
    """N at tau step m: 1 + max overshoot above level m among landings
    whose sources were explored strictly after the previous tau step."""
    lo = bisect_right(src_sorted, y0 + prev_tau)
    hi = bisect_right(src_sorted, y0 + m)
    best = 0
    level = y0 + m
    k = positions.shape[1]
    for idx in up_order[lo:hi]:
        ly = int(up.land_y[idx])
        d = ly - level
        if d <= 0 or d > cap:
            continue
        lx = int(up.x[idx])
        r = d * d
        for c in range(k):
            if abs(lx - positions[m, c]) <= r:
                if d > best:
                    best = d
                break
    return 1 + best


# ---------------------------------------------------------------------------
# segmented drivers (self-materializing, for long runs)
# ---------------------------------------------------------------------------

_SEG_ROWS = 512
_WANDER_SLACK = 96


@dataclass
class _SegmentedScan:
    """Rolling renewal detection over consecutive materialized segments."""

    cfg: ModelConfig
    k: int
    horizon_l: int
    eps_out: float
    seed: int | None = None
    height_cap: int | None = None

    def __post_init__(self):
        self.tab = law_tables(self.cfg.law)
        self.cap = (self.height_cap if self.height_cap is not None else
                    height_cap_for_budget(self.cfg.law, self.cfg.p, self.eps_out))
        self.half = self.cap * self.cap + _WANDER_SLACK

    def run(self, starts: list[int], y0: int, max_steps: int,
            on_tau=None, on_renewal=None, stop=None):
        """Advance until max_steps, invoking callbacks at tau/renewal steps.

        ``on_renewal(step, positions)`` and ``on_tau(step, positions)``
        receive absolute step offsets from the start level.  ``stop``
        (if given) is consulted after each renewal and between segments.
        Returns the number of fully evaluated candidate steps.
        """
        cfg = self.cfg
        l = self.horizon_l
        args = field_args(cfg, self.seed)
        cap_rows = max_steps + l + 1
        pos_hist = np.empty((cap_rows, self.k), dtype=np.int64)
        pos_hist[0, :] = np.array(sorted(starts), dtype=np.int64)
        occ_hist = np.zeros(cap_rows, dtype=bool)
        n_have = 0          # highest step index with a recorded position
        emitted = 0         # tau candidates evaluated through this step
        y_abs = y0

        while emitted < max_steps and (stop is None or not stop()):
            seg_rows = min(_SEG_ROWS, max_steps + l - n_have)
            if seg_rows <= 0:
                break
            base = pos_hist[n_have]
            center = int(base.mean())
            span = int(base.max() - base.min())
            halfw = self.half + span // 2
            wander = _WANDER_SLACK
            while True:
                spec_lo = center - halfw
                spec_hi = center + halfw
                offsets, xs, _sp, ux, usrc, uland = _kernels.scan_window(
                    *args,
                    y_abs + 1, y_abs + seg_rows, spec_lo, spec_hi,
                    self.tab.x_cut, self.tab.y_cut,
                    True, center, wander,
                )
                seg_pos = np.empty((seg_rows + 1, self.k), dtype=np.int64)
                status, _done = _kernels.trace_csr(
                    offsets, xs, y_abs + 1, spec_lo, spec_hi,
                    args[0], base.copy(), y_abs, seg_rows, seg_pos,
                )
                if status == _kernels.OK:
                    drift = max(abs(int(seg_pos[:, 0].min()) - center),
                                abs(int(seg_pos[:, -1].max()) - center))
                    if drift <= wander:
                        break
                    wander = drift + _WANDER_SLACK
                    halfw = max(halfw, self.half + drift + span // 2)
                else:
                    halfw *= 2
                    if halfw > 1 << 24:
                        raise BoundaryUnsound("segment width budget exhausted")
            occ, _hgt = _occupancy_series(ux, usrc, uland, seg_pos,
                                          y_abs, self.cap)
            pos_hist[n_have + 1: n_have + seg_rows + 1] = seg_pos[1:]
            lo = 0 if n_have == 0 else 1
            occ_hist[n_have + lo: n_have + seg_rows + 1] = occ[lo:]
            n_have += seg_rows
            y_abs += seg_rows

            # evaluate tau candidates whose full horizon is now available
            m_hi = n_have - l
            if m_hi <= emitted:
                continue
            lo_m = max(1, emitted + 1)
            flags = _tau_flags_range(pos_hist, lo_m, m_hi, l)
            for m in range(lo_m, m_hi + 1):
                if not flags[m - lo_m]:
                    continue
                if on_tau is not None:
                    on_tau(m, pos_hist[m])
                if not occ_hist[m]:
                    if on_renewal is not None:
                        on_renewal(m, pos_hist[m])
                    if stop is not None and stop():
                        return m
            emitted = m_hi
        return emitted


def renewal_increments(
    cfg: ModelConfig,
    start,
    n_renewals: int,
    horizon_l: int = 64,
    eps_out: float = 1e-6,
    max_steps: int | None = None,
    seed: int | None = None,
    height_cap: int | None = None,
) -> tuple[list[tuple[int, int]], bool]:
    """Increments (dx, dy) between consecutive renewals of a single path.

    The leg from the start to the first renewal has a different law and
    is discarded; what remains is the i.i.d. renewal skeleton.  Returns
    (increments, truncated): truncated means max_steps ran out before
    n_renewals + 1 renewals were seen.
    """
    if n_renewals < 1:
        raise ValueError("need at least one increment")
    start = LatticeSite(*start)
    if max_steps is None:
        max_steps = 80_000 + 4_000 * n_renewals
    scan = _SegmentedScan(cfg=cfg, k=1, horizon_l=horizon_l,
                          eps_out=eps_out, seed=seed, height_cap=height_cap)
    marks: list[tuple[int, int]] = []

    def on_renewal(m, pos):
        marks.append((m, int(pos[0])))

    def stop():
        return len(marks) >= n_renewals + 1

    scan.run([start.x], start.y, max_steps, on_renewal=on_renewal, stop=stop)
    out = [
        (marks[i + 1][1] - marks[i][1], marks[i + 1][0] - marks[i][0])
        for i in range(len(marks) - 1)
    ]
    return out[:n_renewals], len(out) < n_renewals


def estimate_sigma_gamma(increments) -> dict:
    """Spread of the x-increment and mean renewal duration, with jackknife SEs."""
    if len(increments) < 100:
        raise ValueError("need at least 100 increments")
    dx = np.array([i[0] for i in increments], dtype=float)
    dy = np.array([i[1] for i in increments], dtype=float)
    n = len(dx)
    sigma = float(dx.std(ddof=1))
    gamma = float(dy.mean())

    # jackknife over leave-one-out replicates
    sum_dx = dx.sum()
    sum_dx2 = (dx * dx).sum()
    loo_mean = (sum_dx - dx) / (n - 1)
    loo_var = (sum_dx2 - dx * dx - (n - 1) * loo_mean**2) / (n - 2)
    loo_sigma = np.sqrt(np.maximum(loo_var, 0.0))
    se_sigma = float(np.sqrt((n - 1) / n * ((loo_sigma - loo_sigma.mean()) ** 2).sum()))
    se_gamma = float(dy.std(ddof=1) / math.sqrt(n))
    return {
        "sigma": sigma,
        "gamma": gamma,
        "se_sigma": se_sigma,
        "se_gamma": se_gamma,
        "n": n,
    }


def z_process(
    cfg: ModelConfig,
    x1,
    x2,
    n_renewals: int,
    horizon_l: int = 64,
    eps_out: float = 1e-3,
    max_steps: int = 2_000_000,
    seed: int | None = None,
) -> tuple[list[int], bool]:
    """Separation of two paths observed at their joint renewal steps.

    The series starts at the first joint renewal and is absorbed at 0
    (recorded once); truncation is flagged when max_steps ran out first.
    """
    x1 = LatticeSite(*x1)
    x2 = LatticeSite(*x2)
    if x1.y != x2.y or not x1.x < x2.x:
        raise ValueError("starts must share a level with x1 left of x2")
    scan = _SegmentedScan(cfg=cfg, k=2, horizon_l=horizon_l,
                          eps_out=eps_out, seed=seed)
    zs: list[int] = []

    def on_renewal(m, pos):
        zs.append(int(pos[1] - pos[0]))

    def stop():
        return len(zs) >= n_renewals or (len(zs) > 0 and zs[-1] == 0)

    scan.run([x1.x, x2.x], x1.y, max_steps, on_renewal=on_renewal, stop=stop)
    truncated = len(zs) < n_renewals and (not zs or zs[-1] != 0)
    return zs, truncated
