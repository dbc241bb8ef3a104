"""Statistical verification layer.

Estimators and hypothesis tests for the simulator's outputs: censored
survival curves and power-law tail fits for coalescence times, symmetry
and i.i.d. diagnostics for renewal increments, diffusive-scaling checks
against the Gaussian limit, multi-path counting statistics, and number
variance scaling for the point process.  Everything is deterministic
given its inputs and an explicit analysis seed for resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .network import CoalescenceSample, field_args, trace_endpoint
from .point_process import BoundaryUnsound
from .rng_field import ModelConfig, derive_seed, law_tables
from . import _kernels


@dataclass
class SurvivalCurve:
    """Product-limit estimate of P(T > t) with right-censoring."""

    grid: np.ndarray
    survival: np.ndarray
    n_samples: int
    n_censored: int
    censor_times: np.ndarray = field(repr=False, default=None)

    def at(self, t: float) -> float:
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        if i < 0:
            return 1.0
        return float(self.survival[i])


@dataclass
class TailFit:
    """Least-squares fit of log survival against log time.

    The intercept is reported at the geometric center of the fit window,
    where it is insensitive to slope noise; ``level(t)`` evaluates the
    fitted line.
    """

    slope: float
    intercept: float
    r2: float
    ci: tuple[float, float]
    t_center: float
    window: tuple[float, float]

    def level(self, t: float) -> float:
        return math.exp(self.intercept + self.slope * (math.log(t) - math.log(self.t_center)))


@dataclass
class EtaCount:
    t0: float
    t: float
    a: float
    b: float
    count: int


class InsufficientSamples(ValueError):
    pass


def survival_estimate(
    samples: list[CoalescenceSample], grid=None
) -> SurvivalCurve:
    """Kaplan-Meier estimator for coalescence times censored at horizons.

    Requires >= 100 samples of one common separation.
    """
    if len(samples) < 100:
        raise InsufficientSamples("need at least 100 samples")
    seps = {s.separation for s in samples}
    if len(seps) != 1:
        raise ValueError("samples must share one separation")
    times = np.array([s.horizon if s.censored else s.time for s in samples],
                     dtype=float)
    events = np.array([not s.censored for s in samples], dtype=bool)

    order = np.argsort(times, kind="stable")
    times = times[order]
    events = events[order]
    n = len(times)

    uniq = np.unique(times[events])
    if grid is None:
        grid = uniq
    else:
        grid = np.asarray(grid, dtype=float)

    # at-risk counts and death counts at each event time
    surv_vals = []
    s = 1.0
    at_risk = n
    i = 0
    uniq_surv = {}
    for t in uniq:
        while i < n and times[i] < t:
            at_risk -= 1
            i += 1
        d = 0
        j = i
        while j < n and times[j] == t:
            if events[j]:
                d += 1
            j += 1
        s *= 1.0 - d / at_risk
        uniq_surv[t] = s
        at_risk -= j - i
        i = j

    keys = np.array(sorted(uniq_surv))
    vals = np.array([uniq_surv[k] for k in keys])
    idx = np.searchsorted(keys, grid, side="right") - 1
    out = np.where(idx >= 0, vals[np.maximum(idx, 0)], 1.0)
    return SurvivalCurve(
        grid=np.asarray(grid, dtype=float),
        survival=out,
        n_samples=n,
        n_censored=int((~events).sum()),
        censor_times=np.sort(np.array(
            [s_.horizon for s_ in samples if s_.censored], dtype=float)),
    )


def tail_exponent(
    curve: SurvivalCurve,
    t_window: tuple[float, float],
    n_grid: int = 40,
    bootstrap: int = 200,
    seed: int = 0,
) -> TailFit:
    """Log-log slope of the survival curve over ``t_window``.

    The window is clipped where censored mass exceeds 10% of the sample,
    evaluation happens on a log-spaced grid, and the confidence interval
    comes from a seeded nonparametric bootstrap over the grid residuals.
    """
    lo, hi = t_window
    if curve.censor_times is not None and len(curve.censor_times):
        cap_idx = int(0.10 * curve.n_samples)
        if cap_idx < len(curve.censor_times):
            hi = min(hi, float(curve.censor_times[cap_idx]))
    lo = max(lo, float(curve.grid[0]))
    hi = min(hi, float(curve.grid[-1]))
    if not lo < hi:
        raise ValueError("degenerate fit window")
    ts = np.exp(np.linspace(math.log(lo), math.log(hi), n_grid))
    ss = np.array([curve.at(t) for t in ts])
    keep = ss > 0
    if keep.sum() < 4:
        raise ValueError("fit window has too few positive survival values")
    x = np.log(ts[keep])
    y = np.log(ss[keep])
    xc = x - x.mean()
    slope = float((xc * y).sum() / (xc * xc).sum())
    intercept = float(y.mean())
    t_center = float(math.exp(x.mean()))
    resid = y - (intercept + slope * xc)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0

    rng = np.random.default_rng(seed)
    slopes = []
    m = len(x)
    for _ in range(bootstrap):
        pick = rng.integers(0, m, size=m)
        xb = x[pick] - x[pick].mean()
        denom = (xb * xb).sum()
        if denom <= 0:
            continue
        slopes.append(float((xb * y[pick]).sum() / denom))
    if slopes:
        ci = (float(np.quantile(slopes, 0.025)),
              float(np.quantile(slopes, 0.975)))
    else:
        ci = (slope, slope)
    return TailFit(slope=slope, intercept=intercept, r2=r2, ci=ci,
                   t_center=t_center, window=(lo, hi))


def symmetry_test(dx, alpha: float = 0.01) -> dict:
    """Mirror symmetry of an increment sample.

    Two-sample KS between the sample and its negation plus an exact sign
    test on the nonzero entries; the sign test carries the decision.
    """
    dx = np.asarray(dx, dtype=float)
    if len(dx) < 1000:
        raise InsufficientSamples("need at least 1e3 samples")
    ks_stat, ks_p = sstats.ks_2samp(dx, -dx, method="asymp")
    nonzero = dx[dx != 0]
    n_pos = int((nonzero > 0).sum())
    sign = sstats.binomtest(n_pos, len(nonzero), 0.5)
    return {
        "ks_statistic": float(ks_stat),
        "ks_p": float(ks_p),
        "sign_p": float(sign.pvalue),
        "n_positive": n_pos,
        "n_nonzero": len(nonzero),
        "rejected": bool(sign.pvalue < alpha),
    }


def donsker_test(
    cfg: ModelConfig,
    sigma: float,
    gamma: float,
    n_scale: int,
    t: float,
    replicas: int,
    seed_offset: int = 500_000,
    endpoint_fn=None,
) -> dict:
    """Diffusive-scaling check of the path's one-dimensional marginal.

    Each replica traces a fresh path for floor(n_scale * gamma * t)
    steps; the endpoint scaled by sqrt(n_scale) * sigma is KS-tested
    against a centred Gaussian with variance t.  ``endpoint_fn(seed,
    steps)`` may replace the tracer (harness sanity with synthetic
    walks).
    """
    if n_scale < 1000:
        raise ValueError("n_scale must be at least 1e3")
    steps = int(n_scale * gamma * t)
    vals = np.empty(replicas, dtype=float)
    for r in range(replicas):
        seed = derive_seed(cfg.seed, seed_offset + r)
        if endpoint_fn is not None:
            x = endpoint_fn(seed, steps)
        else:
            x = trace_endpoint(cfg, (0, 0), steps, seed=seed)
        vals[r] = x / (math.sqrt(n_scale) * sigma)
    scaled = vals / math.sqrt(t)
    ks_stat, p = sstats.kstest(scaled, "norm")
    return {
        "ks_statistic": float(ks_stat),
        "p_value": float(p),
        "sample_variance": float(vals.var(ddof=1)),
        "sample_mean": float(vals.mean()),
        "n_steps": steps,
        "replicas": replicas,
        "samples": vals,
    }


def eta_statistic(
    cfg: ModelConfig,
    t0: float,
    t: float,
    a: float,
    b: float,
    n_scale: int,
    sigma: float,
    gamma: float,
    replicas: int,
    seed_offset: int = 700_000,
) -> dict:
    """Distribution of the path-counting statistic in scaled units.

    Counts the distinct positions, time t after t0, of the paths that
    pass through [a, b] at t0 (every process point on that row roots
    one).  Reports the count distribution and P(eta >= 2), P(eta >= 3).
    """
    if not (b > a and t > 0):
        raise ValueError("need b > a and t > 0")
    tab = law_tables(cfg.law)
    row0 = int(round(n_scale * gamma * t0))
    n_steps = max(1, int(round(n_scale * gamma * t)))
    x_lo = int(math.ceil(a * math.sqrt(n_scale) * sigma))
    x_hi = int(math.floor(b * math.sqrt(n_scale) * sigma))
    counts = []
    for r in range(replicas):
        seed = derive_seed(cfg.seed, seed_offset + r)
        args = field_args(cfg, seed)
        offsets, xs, _sp, *_ = _kernels.scan_window(
            *args, row0, row0 + 1, x_lo, x_hi,
            tab.x_cut, tab.y_cut, False, 0, 0,
        )
        row_pts = xs[offsets[0]:offsets[1]]
        if len(row_pts) == 0:
            counts.append(0)
            continue
        status, _steps, final, _m, _e = _kernels.trace_free(
            *args, tab.x_cut, tab.y_cut,
            row_pts.astype(np.int64), row0, n_steps,
            _kernels.MODE_FIXED, 512, 48,
        )
        if status != _kernels.OK:
            raise BoundaryUnsound("eta tracer exhausted width budget")
        counts.append(len(final))
    counts = np.array(counts, dtype=np.int64)
    started = counts[counts >= 1]
    return {
        "counts": counts,
        "p_ge2": float(np.mean(counts >= 2)),
        "p_ge3": float(np.mean(counts >= 3)),
        "mean_count": float(counts.mean()) if len(counts) else 0.0,
        "replicas": replicas,
        "interval": (x_lo, x_hi),
        "n_steps": n_steps,
        "records": [EtaCount(t0=t0, t=t, a=a, b=b, count=int(c))
                    for c in counts],
    }


def hyperuniformity_fit(box_out: dict, bootstrap: int = 400,
                        seed: int = 0) -> dict:
    """Variance-scaling exponent from box-count output.

    Slope of log variance against log side; needs at least five sides
    spanning a decade.  CI by bootstrap over replicas within each side.
    """
    sides = np.array(sorted(box_out), dtype=float)
    if len(sides) < 5 or sides[-1] / sides[0] < 10:
        raise ValueError("need >= 5 box sides spanning a decade")
    variances = np.array([box_out[int(s)]["variance"] for s in sides])
    if (variances <= 0).any():
        raise ValueError("degenerate input: zero count variance")
    x = np.log(sides)
    y = np.log(variances)
    xc = x - x.mean()
    alpha = float((xc * y).sum() / (xc * xc).sum())

    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(bootstrap):
        yb = []
        ok = True
        for s in sides:
            c = box_out[int(s)]["counts"]
            pick = rng.integers(0, len(c), size=len(c))
            v = float(np.var(c[pick], ddof=1))
            if v <= 0:
                ok = False
                break
            yb.append(math.log(v))
        if not ok:
            continue
        yb = np.array(yb)
        boots.append(float((xc * yb).sum() / (xc * xc).sum()))
    ci = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975))) \
        if boots else (alpha, alpha)
    return {"alpha": alpha, "ci": ci, "sides": sides, "variances": variances}


def iid_diagnostics(series, alpha: float = 0.01, max_lag: int = 5,
                    n_batches: int = 10) -> dict:
    """Standard independence diagnostics for a stationary sample.

    Lag autocorrelations, a two-sample test between odd- and even-index
    subsamples, and a batch-mean one-way comparison; raw statistics are
    all reported.
    """
    x = np.asarray(series, dtype=float)
    if len(x) < 1000:
        raise InsufficientSamples("need at least 1e3 entries")
    xc = x - x.mean()
    denom = float((xc * xc).sum())
    acf = {}
    for lag in range(1, max_lag + 1):
        acf[lag] = float((xc[:-lag] * xc[lag:]).sum() / denom)
    ks_stat, ks_p = sstats.ks_2samp(x[0::2], x[1::2], method="asymp")
    batches = np.array_split(x, n_batches)
    f_stat, f_p = sstats.f_oneway(*batches)
    passed = (
        abs(acf[1]) < 0.05
        and ks_p >= alpha
        and f_p >= alpha
    )
    return {
        "acf": acf,
        "odd_even_ks": float(ks_stat),
        "odd_even_p": float(ks_p),
        "batch_f": float(f_stat),
        "batch_p": float(f_p),
        "n": len(x),
        "passed": bool(passed),
    }
