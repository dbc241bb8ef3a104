import math

import numpy as np
import pytest

from howardweb.analysis import (
    InsufficientSamples,
    SurvivalCurve,
    donsker_test,
    eta_statistic,
    hyperuniformity_fit,
    iid_diagnostics,
    survival_estimate,
    symmetry_test,
    tail_exponent,
)
from howardweb.network import CoalescenceSample


def synthetic_samples(times, horizon=10**9, separation=1):
    return [
        CoalescenceSample(separation=separation,
                          time=None if t is None else int(t),
                          horizon=horizon)
        for t in times
    ]


class TestSurvival:
    def test_all_zero(self):
        curve = survival_estimate(synthetic_samples([0] * 200))
        assert curve.at(0.5) == 0.0
        assert curve.at(100) == 0.0

    def test_uncensored_equals_empirical(self):
        rng = np.random.default_rng(1)
        times = rng.integers(1, 500, size=400)
        curve = survival_estimate(synthetic_samples(times))
        for t in (1, 5, 50, 200, 499):
            assert curve.at(t) == pytest.approx(np.mean(times > t), abs=1e-12)

    def test_synthetic_sqrt_law_roundtrip(self):
        # P(T > t) = min(1, t^{-1/2}); inverse sampling
        rng = np.random.default_rng(2)
        u = rng.random(30_000)
        times = np.ceil(1.0 / u**2).astype(int)
        curve = survival_estimate(synthetic_samples(times))
        for t in (10, 100, 1000):
            est = curve.at(t)
            true = t**-0.5
            assert est == pytest.approx(true, rel=0.15)

    def test_censoring_consistency(self):
        # censoring at H leaves the curve below H unchanged in expectation
        rng = np.random.default_rng(3)
        u = rng.random(30_000)
        times = np.ceil(1.0 / u**2).astype(int)
        H = 1000
        full = survival_estimate(synthetic_samples(times))
        censored = survival_estimate(synthetic_samples(
            [t if t <= H else None for t in times], horizon=H))
        assert censored.n_censored == int(np.sum(times > H))
        for t in (10, 100, 800):
            assert censored.at(t) == pytest.approx(full.at(t), abs=1e-9)

    def test_requires_samples(self):
        with pytest.raises(InsufficientSamples):
            survival_estimate(synthetic_samples([1] * 50))
        with pytest.raises(ValueError):
            survival_estimate(
                synthetic_samples([1] * 60)
                + synthetic_samples([1] * 60, separation=2))


class TestTailExponent:
    def test_noiseless_power_law(self):
        grid = np.arange(1, 100_001, dtype=float)
        curve = SurvivalCurve(grid=grid, survival=grid**-0.5,
                              n_samples=10**6, n_censored=0,
                              censor_times=np.array([]))
        fit = tail_exponent(curve, (100, 10_000))
        assert fit.slope == pytest.approx(-0.5, abs=1e-3)
        assert fit.r2 > 0.9999

    def test_intercept_level_scales(self):
        grid = np.arange(1, 100_001, dtype=float)
        c1 = SurvivalCurve(grid=grid, survival=np.minimum(1, grid**-0.5),
                           n_samples=10**6, n_censored=0,
                           censor_times=np.array([]))
        c2 = SurvivalCurve(grid=grid, survival=np.minimum(1, 2 * grid**-0.5),
                           n_samples=10**6, n_censored=0,
                           censor_times=np.array([]))
        f1 = tail_exponent(c1, (100, 10_000))
        f2 = tail_exponent(c2, (100, 10_000))
        assert math.exp(f2.intercept - f1.intercept) == pytest.approx(2.0, rel=1e-6)

    def test_censored_mass_clips_window(self):
        grid = np.arange(1, 10_001, dtype=float)
        curve = SurvivalCurve(grid=grid, survival=grid**-0.5,
                              n_samples=1000, n_censored=400,
                              censor_times=np.full(400, 500.0))
        fit = tail_exponent(curve, (10, 9000))
        assert fit.window[1] <= 500.0

    def test_degenerate_window(self):
        grid = np.arange(1, 101, dtype=float)
        curve = SurvivalCurve(grid=grid, survival=grid**-0.5,
                              n_samples=1000, n_censored=0,
                              censor_times=np.array([]))
        with pytest.raises(ValueError):
            tail_exponent(curve, (5000, 9000))


class TestSymmetry:
    def test_mirrored_sample(self):
        rng = np.random.default_rng(4)
        half = rng.integers(1, 50, size=2000)
        dx = np.concatenate([half, -half])
        out = symmetry_test(dx)
        assert out["sign_p"] == 1.0
        assert not out["rejected"]

    def test_shifted_rejected(self):
        rng = np.random.default_rng(5)
        dx = rng.integers(-20, 21, size=20_000) + 1
        out = symmetry_test(dx)
        assert out["sign_p"] < 1e-6
        assert out["rejected"]

    def test_requires_samples(self):
        with pytest.raises(InsufficientSamples):
            symmetry_test([1, -1] * 100)


class TestDonskerHarness:
    def test_synthetic_walk_passes(self, cfg):
        # simple random walk with matched sigma/gamma: the harness itself
        # must accept the known-Gaussian case
        gamma, sigma = 10.0, math.sqrt(10.0)

        def endpoint(seed, steps):
            rng = np.random.default_rng(seed)
            return int(rng.choice([-1, 1], size=steps).sum())

        out = donsker_test(cfg, sigma=sigma, gamma=gamma, n_scale=1000,
                           t=1.0, replicas=400, endpoint_fn=endpoint)
        assert out["p_value"] > 0.01
        assert 0.8 < out["sample_variance"] < 1.2

    def test_wrong_scale_fails(self, cfg):
        def endpoint(seed, steps):
            rng = np.random.default_rng(seed)
            return int(rng.choice([-1, 1], size=steps).sum()) * 3

        out = donsker_test(cfg, sigma=math.sqrt(10.0), gamma=10.0,
                           n_scale=1000, t=1.0, replicas=400,
                           endpoint_fn=endpoint)
        assert out["p_value"] < 1e-6

    def test_n_scale_floor(self, cfg):
        with pytest.raises(ValueError):
            donsker_test(cfg, 1.0, 1.0, n_scale=10, t=1.0, replicas=10)


class TestEta:
    def test_single_path_interval(self, cfg):
        # a width-0 scaled interval usually roots zero or one path
        out = eta_statistic(cfg, t0=0.0, t=0.02, a=0.0, b=0.01,
                            n_scale=1000, sigma=50.0, gamma=10.0,
                            replicas=30)
        assert (out["counts"] <= 2).all()

    def test_monotone_in_interval(self, cfg):
        common = dict(t0=0.0, t=0.05, n_scale=1000, sigma=20.0, gamma=5.0,
                      replicas=25)
        small = eta_statistic(cfg, a=-0.05, b=0.05, **common)
        large = eta_statistic(cfg, a=-0.15, b=0.15, **common)
        assert (large["counts"] >= small["counts"]).all()

    def test_validation(self, cfg):
        with pytest.raises(ValueError):
            eta_statistic(cfg, t0=0.0, t=1.0, a=1.0, b=0.0,
                          n_scale=1000, sigma=1.0, gamma=1.0, replicas=2)


class TestHyperuniformity:
    def test_poisson_control_area_scaling(self):
        rng = np.random.default_rng(6)
        box = {}
        for side in (16, 32, 64, 128, 256):
            counts = rng.poisson(0.5 * side * side, size=200)
            box[side] = {"mean": counts.mean(),
                         "variance": counts.var(ddof=1),
                         "counts": counts}
        out = hyperuniformity_fit(box)
        assert 1.8 < out["alpha"] < 2.2

    def test_degenerate_flagged(self):
        box = {s: {"mean": s * s, "variance": 0.0,
                   "counts": np.full(10, s * s)}
               for s in (16, 32, 64, 128, 256)}
        with pytest.raises(ValueError):
            hyperuniformity_fit(box)

    def test_needs_decade(self):
        box = {s: {"mean": 1.0, "variance": 1.0, "counts": np.ones(5)}
               for s in (16, 24, 32, 48, 64)}
        with pytest.raises(ValueError):
            hyperuniformity_fit(box)


class TestIIDDiagnostics:
    def test_white_noise_passes(self):
        rng = np.random.default_rng(7)
        out = iid_diagnostics(rng.standard_normal(20_000))
        assert out["passed"]
        assert abs(out["acf"][1]) < 0.05

    def test_ar1_rejected(self):
        rng = np.random.default_rng(8)
        n = 20_000
        x = np.empty(n)
        x[0] = 0.0
        eps = rng.standard_normal(n)
        for i in range(1, n):
            x[i] = 0.5 * x[i - 1] + eps[i]
        out = iid_diagnostics(x)
        assert out["acf"][1] == pytest.approx(0.5, abs=0.05)
        assert not out["passed"]

    def test_requires_entries(self):
        with pytest.raises(InsufficientSamples):
            iid_diagnostics(np.zeros(100))


@pytest.mark.slow
def test_eta_b2_trend(cfg):
    # shrinking the start interval drives P(eta >= 3)/epsilon down:
    # effective diffusive units; the trend is scale-free
    ratios = []
    for eps in (0.4, 0.2, 0.1):
        out = eta_statistic(cfg, t0=0.0, t=1.0, a=-eps / 2, b=eps / 2,
                            n_scale=1000, sigma=5.0, gamma=2.0,
                            replicas=200)
        ratios.append(out["p_ge3"] / eps)
    assert ratios[0] >= ratios[-1]
    assert ratios[-1] <= ratios[0] * 0.9 + 1e-9
