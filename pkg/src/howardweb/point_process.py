"""Exact materialization of the perturbed open vertex set on finite windows.

A window realization holds, for every row y in the requested range, the
sorted x-coordinates of the process points, flags for the special
(zero-perturbation) points, and the collection of upward landings needed
by the renewal bookkeeping.  Scans always cover the full support of the
sampling tables, so the realization is exact for the sampled law; the
epsilon budget of the window quantifies the (smaller) gap to the ideal
law with unbounded tails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rng_field import (
    LatticeSite,
    ModelConfig,
    PerturbationLaw,
    law_tables,
    site_variates,
)


class BoundaryUnsound(Exception):
    """A queried quantity cannot be certified inside the materialized area."""


class ResourceLimit(Exception):
    """The requested scan exceeds the configured size cap."""


@dataclass(frozen=True)
class WindowSpec:
    """A rectangle of rows/columns plus a total miss-probability budget."""

    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int
    epsilon: float = 1e-12

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError("window must have positive extent")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive")

    @property
    def width(self) -> int:
        return self.x_hi - self.x_lo + 1

    @property
    def height(self) -> int:
        return self.y_hi - self.y_lo + 1


def _tail_series(tail, start: int, tol: float = 1e-30) -> float:
    """Sum of tail(d) for d > start, truncated once terms drop below tol."""
    total = 0.0
    d = start + 1
    while True:
        t = tail(d)
        total += t
        if t < tol or d > start + 4096:
            return total
        d += 1


def margin_depths(law: PerturbationLaw, spec: WindowSpec) -> tuple[int, int]:
    """Smallest scan depths with union-bound miss probability <= epsilon.

    A source deeper than D_y below the window lands inside it with
    probability at most P(Y >= depth) per column, summed over the window
    width; a source farther than D_x sideways needs |X| >= distance, per
    scanned row.  Each direction receives half the budget.  The depths
    are capped at the sampling-table support, beyond which the sampled
    law has no mass at all.
    """
    tab = law_tables(law)
    if spec.epsilon >= 1.0:
        return 0, 0
    share = spec.epsilon / 2.0

    d_y = 0
    while d_y < tab.y_cut and spec.width * _tail_series(law.y_tail, d_y) > share:
        d_y += 1

    rows = spec.height + d_y
    d_x = 0
    while d_x < tab.x_cut and 2.0 * rows * _tail_series(law.x_tail, d_x) > share:
        d_x += 1
    return d_x, d_y


@dataclass
class RowPoints:
    """Process points on one row, sorted by x.

    ``special[i]`` marks a point that is its own (unperturbed) source.
    ``provenance``, when materialized, lists for each point the source
    sites that landed on it (collisions merged).  ``x_lo``/``x_hi``
    record the certified column range for boundary-soundness checks.
    """

    y: int
    xs: list[int]
    special: list[bool]
    provenance: list[list[tuple[int, int]]] | None = None
    x_lo: int | None = None
    x_hi: int | None = None


@dataclass
class UpwardLandings:
    """All landings that sit strictly above their source row.

    Columns may extend beyond the window's x-range (exterior landings);
    they are what the information-set bookkeeping needs near edges.
    """

    x: np.ndarray
    src_y: np.ndarray
    land_y: np.ndarray


@dataclass
class WindowRealization:
    """The process materialized exactly on a window."""

    spec: WindowSpec
    margins: tuple[int, int]
    rows: dict[int, RowPoints]
    upward: UpwardLandings
    cfg: ModelConfig = field(repr=False)

    def row(self, y: int) -> RowPoints:
        try:
            return self.rows[y]
        except KeyError:
            raise BoundaryUnsound(f"row {y} outside materialized window") from None

    def __contains__(self, site) -> bool:
        x, y = site
        r = self.rows.get(y)
        if r is None:
            return False
        import bisect

        i = bisect.bisect_left(r.xs, x)
        return i < len(r.xs) and r.xs[i] == x


_MAX_SCAN_SITES = 200_000_000


def materialize_window(
    cfg: ModelConfig,
    spec: WindowSpec,
    provenance: bool = False,
    max_sites: int = _MAX_SCAN_SITES,
) -> WindowRealization:
    """Materialize all process points with rows y_lo..y_hi, x_lo..x_hi.

    The scan covers the full table support below and beside the window,
    so every point of the sampled law is found; margins narrower than
    that would still meet ``spec.epsilon`` (see ``margin_depths``), we
    simply never scan less than everything that can land.  Deterministic
    in (cfg, spec).
    """
    tab = law_tables(cfg.law)
    d_x, d_y = tab.x_cut, tab.y_cut
    n_sites = (spec.height + d_y) * (spec.width + 2 * d_x)
    if n_sites > max_sites:
        raise ResourceLimit(
            f"scan of {n_sites} sites exceeds cap {max_sites}"
        )
    center = (spec.x_lo + spec.x_hi) // 2
    halfspan = spec.width // 2 + d_x + 1
    offsets, xs, special, up_x, up_src, up_land = _kernels.scan_window(
        np.uint64(cfg.state),
        np.uint64(cfg.open_threshold),
        tab.cum, tab.dpack, tab.jdx, tab.jdy,
        spec.y_lo, spec.y_hi, spec.x_lo, spec.x_hi,
        d_x, d_y,
        True, center, halfspan,
    )
    rows: dict[int, RowPoints] = {}
    for r in range(spec.height):
        y = spec.y_lo + r
        a, b = int(offsets[r]), int(offsets[r + 1])
        rows[y] = RowPoints(
            y=y,
            xs=[int(v) for v in xs[a:b]],
            special=[bool(v) for v in special[a:b]],
            x_lo=spec.x_lo,
            x_hi=spec.x_hi,
        )
    real = WindowRealization(
        spec=spec,
        margins=(d_x, d_y),
        rows=rows,
        upward=UpwardLandings(x=up_x, src_y=up_src, land_y=up_land),
        cfg=cfg,
    )
    if provenance:
        _attach_provenance(real)
    return real


def _attach_provenance(real: WindowRealization) -> None:
    """Scalar pass recording, per point, every source that lands on it."""
    cfg = real.cfg
    spec = real.spec
    d_x, d_y = real.margins
    prov: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for b in range(spec.y_lo - d_y, spec.y_hi + 1):
        for a in range(spec.x_lo - d_x, spec.x_hi + d_x + 1):
            v = site_variates(cfg, (a, b))
            if not v.open:
                continue
            land = (a + v.dx, b + v.dy)
            if spec.y_lo <= land[1] <= spec.y_hi and spec.x_lo <= land[0] <= spec.x_hi:
                prov.setdefault(land, []).append((a, b))
    for y, row in real.rows.items():
        row.provenance = [prov[(x, y)] for x in row.xs]


def is_special(cfg: ModelConfig, site: LatticeSite | tuple[int, int]) -> bool:
    """True iff the site is open with zero perturbation (a fixed point)."""
    v = site_variates(cfg, site)
    return v.open and v.dx == 0 and v.dy == 0


def box_counts(
    cfg: ModelConfig,
    box_sides: list[int],
    replicas: int,
) -> dict[int, dict]:
    """Sample mean/variance of the landing count in side x side boxes.

    Counts open sources landing in the box with multiplicity (the
    landing measure).  Number-variance scaling is a statement about that
    measure: merging collision landings into single points would add an
    area-order variance term and mask the boundary scaling.  Replicas
    use independent seed streams derived from cfg.seed.
    """
    from .rng_field import derive_seed, seed_state

    if replicas < 2:
        raise ValueError("need at least 2 replicas for a variance")
    tab = law_tables(cfg.law)
    out: dict[int, dict] = {}
    for side in box_sides:
        if side < 4:
            raise ValueError("box sides must be >= 4")
        counts = np.empty(replicas, dtype=np.int64)
        for r in range(replicas):
            st = seed_state(derive_seed(cfg.seed, side * 1_000_003 + r))
            counts[r] = _kernels.box_count(
                np.uint64(st),
                np.uint64(cfg.open_threshold),
                tab.cum, tab.dpack, tab.jdx, tab.jdy,
                tab.x_cut, tab.y_cut,
                side,
            )
        out[side] = {
            "mean": float(counts.mean()),
            "variance": float(counts.var(ddof=1)),
            "counts": counts,
        }
    return out


def dump_realization(real: WindowRealization) -> str:
    """Fixture text format: one line per row, ``y: x1[s] x2 ...``."""
    lines = []
    for y in range(real.spec.y_lo, real.spec.y_hi + 1):
        row = real.rows[y]
        cells = [
            f"{x}[s]" if sp else str(x) for x, sp in zip(row.xs, row.special)
        ]
        lines.append(f"{y}: " + " ".join(cells))
    return "\n".join(lines) + "\n"


def parse_dump(text: str) -> dict[int, tuple[list[int], list[bool]]]:
    """Parse the fixture text format back into per-row (xs, special)."""
    rows: dict[int, tuple[list[int], list[bool]]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        head, _, rest = line.partition(":")
        y = int(head)
        xs: list[int] = []
        sp: list[bool] = []
        for tok in rest.split():
            if tok.endswith("[s]"):
                xs.append(int(tok[:-3]))
                sp.append(True)
            else:
                xs.append(int(tok))
                sp.append(False)
        rows[y] = (xs, sp)
    return rows
