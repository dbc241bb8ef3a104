"""Deterministic coordinate-indexed random field.

Every lattice site (x, y) carries an independent triple of variates:

* ``open`` -- Bernoulli(p) flag marking the site as a source,
* ``tie_sign`` -- fair +/-1 sign used to resolve ties in the network step,
* ``(dx, dy)`` -- the integer perturbation vector, with ``dy >= 0``.

The variates are a pure function of ``(seed, x, y)``: a counter-based
splitmix64 hash turns the coordinates into independent 64-bit uniform
streams, and the perturbation is drawn by inverse-CDF lookup in a
precomputed table.  Any site's variates are computable in O(1) without
touching its neighbours, which is what makes exact lazy materialization
of windows possible.

The perturbation law family is pluggable.  ``GeometricLaw`` is the
default: a symmetric two-sided geometric along x and a one-sided
geometric along y.  ``GaussianFloorLaw`` floors the magnitude of a
centred Gaussian.  Both laws have exponentially dominated tails and
exactly symmetric x-marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import stats as _stats

MASK64 = (1 << 64) - 1

# splitmix64 mixing constants
_GOLD = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_KX = 0xD1B54A32D192ED03
_KY = 0x8CB92BA72F3D8DD7
_KTAG = 0x2545F4914F6CDD1D

# stream tags
TAG_OPEN = 1
TAG_XY = 2
TAG_TIE = 3

# Inverse-CDF tables are truncated where the remaining tail drops below
# 2**-64, the resolution of one uniform draw; the sampled law is the
# table law, within 2**-64 total variation per site of the ideal one.
_TAIL_RESOLUTION = 2.0 ** -64


def _mix64(z: int) -> int:
    """splitmix64 finalizer on a 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def seed_state(seed: int) -> int:
    """Premixed per-seed state absorbed once into every site hash."""
    return _mix64((seed & MASK64) ^ _GOLD)


def derive_seed(master: int, index: int) -> int:
    """Independent per-replica seed: hash of (master seed, replica index)."""
    return _mix64(seed_state(master) ^ (((index + 1) * _KX) & MASK64))


def site_state(state: int, x: int, y: int) -> int:
    """Site-level hash state shared by the per-site streams."""
    z = _mix64(state ^ ((x & MASK64) * _KX & MASK64))
    return _mix64(z ^ ((y & MASK64) * _KY & MASK64))


def site_uniform(state: int, x: int, y: int, tag: int) -> int:
    """A 64-bit uniform for stream ``tag`` at site ``(x, y)``."""
    return _mix64(site_state(state, x, y) ^ (tag * _KTAG & MASK64))


class LatticeSite(NamedTuple):
    """A point of the integer lattice; coordinates are exact ints."""

    x: int
    y: int


class SiteVariates(NamedTuple):
    """The variate triple attached to one lattice site."""

    open: bool
    tie_sign: int
    dx: int
    dy: int


DIRECT_BITS = 13
DIRECT_SHIFT = 64 - DIRECT_BITS


class LawTables(NamedTuple):
    """Precomputed sampling tables for one perturbation law.

    ``cum/jdx/jdy`` implement joint inverse-CDF sampling of the signed
    perturbation pair from a single 64-bit uniform; ``x_support/x_probs``
    and ``y_support/y_probs`` are the marginal pmf tables (x exactly
    symmetric by construction).  ``dpack`` accelerates the lookup: the
    top DIRECT_BITS of the uniform index a table of packed (dy<<8 | dx+128)
    entries, with -1 marking buckets that straddle a threshold and fall
    back to binary search; the sampled law is identical either way.
    """

    cum: np.ndarray        # uint64, ascending thresholds
    jdx: np.ndarray        # int16, signed x-perturbation per table entry
    jdy: np.ndarray        # int16, y-perturbation per table entry
    dpack: np.ndarray      # int32[2**DIRECT_BITS], packed fast path
    x_support: np.ndarray  # int64, -cut..cut
    x_probs: np.ndarray    # float64
    y_support: np.ndarray  # int64, 0..cut
    y_probs: np.ndarray    # float64
    x_cut: int             # max |dx| the sampler can emit
    y_cut: int             # max dy the sampler can emit


def _build_tables(x_mag_probs: np.ndarray, y_probs: np.ndarray) -> LawTables:
    """Assemble joint inverse-CDF tables from magnitude pmfs.

    ``x_mag_probs[m]`` is P(|X| = m); the signed pmf splits mass evenly,
    which keeps P(X = j) = P(X = -j) exact in the table.
    """
    x_mag = np.asarray(x_mag_probs, dtype=float)
    y_p = np.asarray(y_probs, dtype=float)
    x_mag = x_mag / x_mag.sum()
    y_p = y_p / y_p.sum()

    x_cut = len(x_mag) - 1
    y_cut = len(y_p) - 1
    x_support = np.arange(-x_cut, x_cut + 1, dtype=np.int64)
    x_probs = np.where(
        x_support == 0, x_mag[0], x_mag[np.abs(x_support)] / 2.0
    )
    y_support = np.arange(0, y_cut + 1, dtype=np.int64)

    jdx_list = []
    jdy_list = []
    probs = []
    for yy in range(y_cut + 1):
        for jj in range(-x_cut, x_cut + 1):
            jdx_list.append(jj)
            jdy_list.append(yy)
            probs.append(x_probs[jj + x_cut] * y_p[yy])
    probs_arr = np.asarray(probs, dtype=float)
    probs_arr /= probs_arr.sum()
    # descending probability makes the samplers' linear threshold scan
    # O(1) expected; the tie-break keeps the layout deterministic
    order = np.lexsort(
        (np.asarray(jdx_list), np.asarray(jdy_list), -probs_arr)
    )
    probs_arr = probs_arr[order]
    jdx_list = [jdx_list[i] for i in order]
    jdy_list = [jdy_list[i] for i in order]
    cum_f = np.cumsum(probs_arr)
    # exact integer thresholds; float->uint64 casts overflow near 2**64
    cum = np.array(
        [min(MASK64, int(c * 2.0**64)) for c in cum_f], dtype=np.uint64
    )
    cum[-1] = np.uint64(MASK64)

    if x_cut > 120 or y_cut > 8_000_000:
        raise ValueError("law support too wide for the packed sampler")
    jdx_arr = np.asarray(jdx_list, dtype=np.int16)
    jdy_arr = np.asarray(jdy_list, dtype=np.int16)

    n_buckets = 1 << DIRECT_BITS
    lo_edges = np.arange(n_buckets, dtype=np.uint64) << np.uint64(DIRECT_SHIFT)
    hi_edges = lo_edges + ((np.uint64(1) << np.uint64(DIRECT_SHIFT)) - np.uint64(1))
    i_lo = np.minimum(np.searchsorted(cum, lo_edges, side="right"), len(cum) - 1)
    i_hi = np.minimum(np.searchsorted(cum, hi_edges, side="right"), len(cum) - 1)
    pack = (jdy_arr.astype(np.int32) << 8) | (jdx_arr.astype(np.int32) + 128)
    dpack = np.where(i_lo == i_hi, pack[i_lo], np.int32(-1)).astype(np.int32)

    return LawTables(
        cum=cum,
        jdx=jdx_arr,
        jdy=jdy_arr,
        dpack=dpack,
        x_support=x_support,
        x_probs=x_probs,
        y_support=y_support,
        y_probs=y_p,
        x_cut=x_cut,
        y_cut=y_cut,
    )


@dataclass(frozen=True)
class GeometricLaw:
    """Two-sided geometric x-perturbation times geometric y-perturbation.

    P(X = j) is proportional to q^|j| with decay ratio q = (1-theta_x)/2,
    normalized so the pmf sums to one; P(Y = j) = theta_y (1-theta_y)^j.
    X and Y are independent.
    """

    theta_x: float = 0.5
    theta_y: float = 0.5

    def __post_init__(self):
        # theta = 1 is the degenerate point-mass end, kept for diagnostics
        if not (0.0 < self.theta_x <= 1.0 and 0.0 < self.theta_y <= 1.0):
            raise ValueError("theta_x and theta_y must lie in (0, 1]")

    @property
    def q(self) -> float:
        return (1.0 - self.theta_x) / 2.0

    @property
    def x_norm(self) -> float:
        """P(X = 0), the normalizing constant (1-q)/(1+q)."""
        q = self.q
        return (1.0 - q) / (1.0 + q)

    def x_pmf(self, j: int) -> float:
        return self.x_norm * self.q ** abs(j)

    def y_pmf(self, j: int) -> float:
        if j < 0:
            return 0.0
        return self.theta_y * (1.0 - self.theta_y) ** j

    def x_tail(self, n: int) -> float:
        """Exact P(|X| >= n)."""
        if n <= 0:
            return 1.0
        q = self.q
        return 2.0 * self.x_norm * q**n / (1.0 - q)

    def y_tail(self, n: int) -> float:
        """Exact P(Y >= n)."""
        if n <= 0:
            return 1.0
        return (1.0 - self.theta_y) ** n

    def tail_constants(self) -> tuple[float, float]:
        """(C0, C1) with P(|X| >= n) v P(Y >= n) <= C0 exp(-C1 n)."""
        q = self.q
        c0x = 2.0 * self.x_norm / (1.0 - q)
        c1x = -math.log(q) if q > 0.0 else math.inf
        c1y = (-math.log(1.0 - self.theta_y)
               if self.theta_y < 1.0 else math.inf)
        return max(c0x, 1.0), min(c1x, c1y)

    def _tables(self) -> LawTables:
        q = self.q
        cut_x = 1
        while self.x_tail(cut_x + 1) >= _TAIL_RESOLUTION:
            cut_x += 1
        cut_y = 1
        while self.y_tail(cut_y + 1) >= _TAIL_RESOLUTION:
            cut_y += 1
        mags = np.arange(cut_x + 1, dtype=float)
        x_mag = np.where(mags == 0, self.x_norm, 2.0 * self.x_norm * q**mags)
        y_p = self.theta_y * (1.0 - self.theta_y) ** np.arange(cut_y + 1, dtype=float)
        return _build_tables(x_mag, y_p)


@dataclass(frozen=True)
class GaussianFloorLaw:
    """Floored-Gaussian perturbations.

    The magnitudes are |X| = floor(|sigma_x Z1|) and Y = floor(|sigma_y Z2|)
    for standard normals Z1, Z2, with the x-sign drawn fair.  Drawing the
    sign separately keeps P(X = j) = P(X = -j) exact, which floor(Z)
    alone would not satisfy.
    """

    sigma_x: float = 1.0
    sigma_y: float = 1.0

    def __post_init__(self):
        if not (self.sigma_x > 0.0 and self.sigma_y > 0.0):
            raise ValueError("sigma_x and sigma_y must be positive")

    @staticmethod
    def _mag_pmf(sigma: float, m: np.ndarray) -> np.ndarray:
        """P(floor(|sigma Z|) = m) = erf((m+1)/(sigma sqrt2)) - erf(m/(sigma sqrt2))."""
        s = sigma * math.sqrt(2.0)
        lo = np.asarray(m, dtype=float) / s
        hi = (np.asarray(m, dtype=float) + 1.0) / s
        return np.vectorize(math.erf)(hi) - np.vectorize(math.erf)(lo)

    def x_pmf(self, j: int) -> float:
        p = float(self._mag_pmf(self.sigma_x, np.array([abs(j)]))[0])
        return p if j == 0 else p / 2.0

    def y_pmf(self, j: int) -> float:
        if j < 0:
            return 0.0
        return float(self._mag_pmf(self.sigma_y, np.array([j]))[0])

    def x_tail(self, n: int) -> float:
        if n <= 0:
            return 1.0
        return math.erfc(n / (self.sigma_x * math.sqrt(2.0)))

    def y_tail(self, n: int) -> float:
        if n <= 0:
            return 1.0
        return math.erfc(n / (self.sigma_y * math.sqrt(2.0)))

    def tail_constants(self) -> tuple[float, float]:
        # erfc(n / (sigma sqrt2)) <= exp(-n^2 / (2 sigma^2)) <= exp(-n / (2 sigma^2))
        s = max(self.sigma_x, self.sigma_y)
        return 1.0, 1.0 / (2.0 * s * s)

    def _tables(self) -> LawTables:
        cut_x = 1
        while self.x_tail(cut_x + 1) >= _TAIL_RESOLUTION:
            cut_x += 1
        cut_y = 1
        while self.y_tail(cut_y + 1) >= _TAIL_RESOLUTION:
            cut_y += 1
        x_mag = self._mag_pmf(self.sigma_x, np.arange(cut_x + 1))
        y_p = self._mag_pmf(self.sigma_y, np.arange(cut_y + 1))
        return _build_tables(x_mag, y_p)


PerturbationLaw = GeometricLaw | GaussianFloorLaw


@lru_cache(maxsize=32)
def _cached_tables(law: PerturbationLaw) -> LawTables:
    return law._tables()


def law_tables(law: PerturbationLaw) -> LawTables:
    """Sampling tables for ``law`` (cached; laws are frozen/hashable)."""
    return _cached_tables(law)


def law_tail_bound(law: PerturbationLaw, n: int) -> float:
    """Exact upper bound on P(|X| >= n) v P(Y >= n)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return min(1.0, max(law.x_tail(n), law.y_tail(n)))


@dataclass(frozen=True)
class ModelConfig:
    """Model parameters: master seed, open probability and perturbation law.

    p = 1 is admitted for degenerate diagnostics (full lattice); it is
    realized as the largest representable uint64 threshold, leaving one
    closed site per ~1.8e19 draws.
    """

    seed: int
    p: float = 0.5
    law: PerturbationLaw = field(default_factory=GeometricLaw)

    def __post_init__(self):
        # p in {0, 1} kept for degenerate diagnostics (empty / full lattice)
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("open probability p must lie in [0, 1]")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def state(self) -> int:
        return seed_state(self.seed)

    @property
    def open_threshold(self) -> int:
        """uint64 threshold t with P(open) = t / 2^64."""
        return min(MASK64, int(round(self.p * 2.0**64)))

    def special_rate(self) -> float:
        """p0 = P(site open with zero perturbation)."""
        tab = law_tables(self.law)
        return self.p * float(tab.x_probs[tab.x_cut]) * float(tab.y_probs[0])


def site_variates(cfg: ModelConfig, site: LatticeSite | tuple[int, int]) -> SiteVariates:
    """The variate triple at ``site``; deterministic in (cfg, site)."""
    x, y = site
    st = site_state(cfg.state, x, y)
    u_open = _mix64(st ^ (TAG_OPEN * _KTAG & MASK64))
    is_open = u_open < cfg.open_threshold
    u_tie = _mix64(st ^ (TAG_TIE * _KTAG & MASK64))
    tie = 1 if (u_tie >> 63) else -1
    tab = law_tables(cfg.law)
    u_xy = _mix64(st ^ (TAG_XY * _KTAG & MASK64))
    idx = int(np.searchsorted(tab.cum, np.uint64(u_xy), side="right"))
    if idx >= len(tab.cum):
        idx = len(tab.cum) - 1
    return SiteVariates(
        open=bool(is_open),
        tie_sign=tie,
        dx=int(tab.jdx[idx]),
        dy=int(tab.jdy[idx]),
    )


def tie_sign(cfg: ModelConfig, x: int, y: int) -> int:
    """Just the tie-breaking sign at (x, y), without sampling the rest."""
    u = site_uniform(cfg.state, x, y, TAG_TIE)
    return 1 if (u >> 63) else -1


@dataclass
class BinReport:
    value: int
    expected: float
    observed: int


@dataclass
class SelfCheckReport:
    """Result of a chi-square comparison of sampled variates vs the pmf."""

    statistic: float
    p_value: float
    dof: int
    bins: list[BinReport]
    passed: bool


def chi_square_against_pmf(
    samples: np.ndarray,
    support: np.ndarray,
    probs: np.ndarray,
    alpha: float = 0.01,
    min_expected: float = 5.0,
) -> SelfCheckReport:
    """Chi-square GOF of integer ``samples`` against pmf (support, probs).

    Support values whose expected count falls below ``min_expected`` are
    merged into the nearest kept tail bin.  Values outside ``support``
    are counted into the closest end bin.
    """
    samples = np.asarray(samples)
    n = len(samples)
    support = np.asarray(support, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    expected = probs * n

    # keep the contiguous center where expected counts are large enough
    keep = expected >= min_expected
    if not keep.any():
        raise ValueError("sample too small for any bin to reach min_expected")
    lo = int(np.argmax(keep))
    hi = len(keep) - 1 - int(np.argmax(keep[::-1]))

    clipped = np.clip(samples, support[lo], support[hi])
    edges = np.arange(support[lo], support[hi] + 2) - 0.5
    observed, _ = np.histogram(clipped, bins=edges)
    exp_binned = expected[lo : hi + 1].copy()
    exp_binned[0] += expected[:lo].sum()
    exp_binned[-1] += expected[hi + 1 :].sum()
    # normalize away float residue so scipy's sum check is happy
    exp_binned *= observed.sum() / exp_binned.sum()

    if len(exp_binned) < 2:
        # degenerate law: point mass; define p-value 1 when all mass matches
        ok = int(observed.sum()) == n
        return SelfCheckReport(0.0, 1.0 if ok else 0.0, 0,
                               [BinReport(int(support[lo]), float(exp_binned[0]),
                                          int(observed[0]))], ok)

    statistic, p_value = _stats.chisquare(observed, exp_binned)
    bins = [
        BinReport(int(v), float(e), int(o))
        for v, e, o in zip(support[lo : hi + 1], exp_binned, observed)
    ]
    return SelfCheckReport(float(statistic), float(p_value), len(exp_binned) - 1,
                           bins, bool(p_value >= alpha))


def sample_variates(cfg: ModelConfig, n_samples: int, x0: int = 0, y0: int = 0):
    """Vectorized draw of ``n_samples`` variates over distinct sites.

    Sites are (x0 + i, y0); returns (open, tie, dx, dy) arrays.  Matches
    ``site_variates`` bitwise.
    """
    from . import _kernels

    tab = law_tables(cfg.law)
    return _kernels.sample_variates(
        np.uint64(cfg.state),
        np.uint64(cfg.open_threshold),
        tab.cum,
        tab.dpack,
        tab.jdx,
        tab.jdy,
        np.int64(x0),
        np.int64(y0),
        np.int64(n_samples),
    )


def pmf_selfcheck(
    law: PerturbationLaw,
    n_samples: int,
    seed: int,
    p: float = 0.5,
    alpha: float = 0.01,
) -> dict[str, SelfCheckReport]:
    """Draw variates through the site hash and chi-square both marginals.

    Flags failure (``passed=False``) when either marginal's p-value falls
    below ``alpha``.
    """
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples for a meaningful check")
    cfg = ModelConfig(seed=seed, p=p, law=law)
    _open, _tie, dx, dy = sample_variates(cfg, n_samples)
    tab = law_tables(law)
    rep_x = chi_square_against_pmf(dx, tab.x_support, tab.x_probs, alpha=alpha)
    rep_y = chi_square_against_pmf(dy, tab.y_support, tab.y_probs, alpha=alpha)
    return {"dx": rep_x, "dy": rep_y}
