import numpy as np
import pytest

from conftest import make_realization
from howardweb.point_process import (
    BoundaryUnsound,
    UpwardLandings,
    WindowSpec,
    materialize_window,
)
from howardweb.renewal import (
    ParabolicEnvelope,
    detect_renewals,
    envelope_contains,
    estimate_sigma_gamma,
    height_cap_for_budget,
    in_event_horizon,
    occupancy_residual,
    out_event,
    renewal_increments,
    shield_product_bound,
    z_process,
)
from howardweb.rng_field import GeometricLaw, LatticeSite, ModelConfig


class TestEnvelope:
    def test_boundary_point(self):
        env = ParabolicEnvelope(apex=LatticeSite(0, 0))
        assert envelope_contains(env, (1, 1))
        assert envelope_contains(env, (-1, 1))

    def test_outside(self):
        env = ParabolicEnvelope(apex=LatticeSite(0, 0))
        assert not envelope_contains(env, (2, 1))
        assert not envelope_contains(env, (0, -1))

    def test_nesting(self):
        # pt inside the envelope implies its envelope nests inside
        env = ParabolicEnvelope(apex=LatticeSite(0, 0))
        rng = np.random.default_rng(0)
        for _ in range(200):
            vy = int(rng.integers(0, 12))
            vx = int(rng.integers(-vy * vy, vy * vy + 1))
            assert envelope_contains(env, (vx, vy))
            inner = ParabolicEnvelope(apex=LatticeSite(vx, vy))
            for _ in range(20):
                wy = vy + int(rng.integers(0, 10))
                r = (wy - vy) ** 2
                wx = vx + int(rng.integers(-r, r + 1))
                assert envelope_contains(inner, (wx, wy))
                assert envelope_contains(env, (wx, wy))


class TestShieldProduct:
    def test_certain_shield(self):
        for l in (1, 5, None):
            assert shield_product_bound(1.0, l) == 1.0

    def test_single_level(self):
        # (1 - 0.875)^2 = 0.015625
        assert shield_product_bound(0.125, 1) == pytest.approx(0.015625, rel=1e-12)

    def test_convergence(self):
        full = shield_product_bound(0.15, None)
        partial = shield_product_bound(0.15, 400)
        assert abs(full - partial) < 1e-15
        assert 0.0 < full < shield_product_bound(0.15, 8)

    def test_monotone_decreasing_in_l(self):
        vals = [shield_product_bound(0.15, l) for l in (1, 2, 4, 8, 16, 32)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            shield_product_bound(0.0, 4)


class TestInEventHorizon:
    def test_straight_up_path(self):
        cfg = ModelConfig(seed=1, p=1.0, law=GeometricLaw(1.0, 1.0))
        real = materialize_window(cfg, WindowSpec(-10, 10, 0, 40))
        assert in_event_horizon(real, cfg, (0, 0), 30)

    def test_immediate_exit(self, cfg):
        real = make_realization({1: [2], 2: [2]}, cfg)
        assert not in_event_horizon(real, cfg, (0, 0), 1)

    def test_horizon_monotone(self, cfg):
        real = materialize_window(cfg, WindowSpec(-150, 150, 0, 140))
        for x0 in range(-20, 21, 5):
            long_ok = in_event_horizon(real, cfg, (x0, 0), 64)
            short_ok = in_event_horizon(real, cfg, (x0, 0), 16)
            if long_ok:
                assert short_ok

    def test_boundary_propagates(self, cfg):
        real = materialize_window(cfg, WindowSpec(-20, 20, 0, 4))
        with pytest.raises(BoundaryUnsound):
            in_event_horizon(real, cfg, (0, 0), 30)


def _realization_with_upward(cfg, landings, x_extent=2000):
    """Synthetic realization whose upward records are exactly `landings`."""
    real = make_realization({0: [0], 1: [0]}, cfg,
                            x_lo=-x_extent, x_hi=x_extent)
    real.spec = WindowSpec(-x_extent, x_extent, -20, 20, epsilon=1e-3)
    xs = np.array([l[0] for l in landings], dtype=np.int64)
    src = np.array([l[1] for l in landings], dtype=np.int64)
    land = np.array([l[2] for l in landings], dtype=np.int64)
    real.upward = UpwardLandings(x=xs, src_y=src, land_y=land)
    return real


class TestOutEvent:
    def test_point_mass_law_always_true(self):
        cfg = ModelConfig(seed=2, p=1.0, law=GeometricLaw(1.0, 1.0))
        real = materialize_window(cfg, WindowSpec(-30, 30, 0, 20))
        for x in range(-5, 6, 2):
            assert out_event(real, (x, 10))

    def test_hand_fixture_occupant(self, cfg):
        # source one row below v flies up 3: lands at (v.x, v.y + 2), inside
        v = (0, 5)
        real = _realization_with_upward(cfg, [(0, 4, 7)])
        assert not out_event(real, v)

    def test_vacuous(self, cfg):
        real = _realization_with_upward(cfg, [(1500, 4, 6)])
        assert out_event(real, (0, 5))

    def test_explored_floor_excludes_deep_sources(self, cfg):
        real = _realization_with_upward(cfg, [(0, 1, 7)])
        assert not out_event(real, (0, 5))
        assert out_event(real, (0, 5), explored_floor=2)

    def test_budget_guard(self, cfg):
        real = _realization_with_upward(cfg, [(0, 4, 7)], x_extent=2000)
        real.spec = WindowSpec(-4, 4, -20, 20, epsilon=1e-9)
        with pytest.raises(BoundaryUnsound):
            out_event(real, (0, 5))


class TestOccupancyBudget:
    def test_residual_decreasing(self, cfg):
        vals = [occupancy_residual(cfg.law, cfg.p, c) for c in (4, 8, 16, 32)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-4

    def test_cap_for_budget(self, cfg):
        cap = height_cap_for_budget(cfg.law, cfg.p, 1e-6)
        assert occupancy_residual(cfg.law, cfg.p, cap) <= 1e-6
        assert occupancy_residual(cfg.law, cfg.p, cap - 1) > 1e-6


@pytest.fixture(scope="module")
def renewal_scan(cfg):
    real = materialize_window(
        cfg, WindowSpec(-4300, 4300, 0, 800, epsilon=1e-9))
    scan = detect_renewals(real, cfg, [(0, 0)], max_steps=700, horizon_l=32)
    return real, scan


class TestDetectRenewals:
    def test_taus_are_in_steps(self, cfg, renewal_scan):
        real, scan = renewal_scan
        assert len(scan.taus) > 100
        for t in scan.taus[:40]:
            assert in_event_horizon(real, cfg, t.positions[0], t.horizon_used)

    def test_renewals_reverify_out_event(self, cfg, renewal_scan):
        real, scan = renewal_scan
        assert scan.renewals, "expected at least one renewal in 700 steps"
        for r in scan.renewals:
            assert out_event(real, r.positions[0], budget=1e-3)

    def test_height_recursion(self, renewal_scan):
        _, scan = renewal_scan
        hs = scan.heights
        assert hs
        for a, b in zip(hs, hs[1:]):
            assert b.L <= max(a.L, b.N_next) - 1
        for h in hs:
            assert h.N_next >= 1
            assert (h.L == 0) == (h.tau in {r.sigma_index for r in scan.renewals}
                                  or h.L == 0)

    def test_renewal_iff_height_zero(self, renewal_scan):
        _, scan = renewal_scan
        renewal_steps = {r.sigma_index for r in scan.renewals}
        for h in scan.heights:
            assert (h.tau in renewal_steps) == (h.L == 0)

    def test_increment_confinement(self, renewal_scan):
        _, scan = renewal_scan
        for r in scan.renewals:
            if r.increment is not None:
                dx, dy = r.increment
                assert dy >= 1
                assert abs(dx) <= dy * dy

    def test_horizon_stability_only_removals(self, cfg, renewal_scan):
        real, _ = renewal_scan
        s16 = detect_renewals(real, cfg, [(0, 0)], max_steps=400,
                              horizon_l=16, emit_heights=False)
        s32 = detect_renewals(real, cfg, [(0, 0)], max_steps=400,
                              horizon_l=32, emit_heights=False)
        taus16 = {t.step_index for t in s16.taus}
        taus32 = {t.step_index for t in s32.taus}
        assert taus32 <= taus16
        ren16 = {r.sigma_index for r in s16.renewals}
        ren32 = {r.sigma_index for r in s32.renewals}
        assert ren32 <= ren16


class TestSegmentedDriverAgreesWithReference:
    def test_same_renewals(self, cfg):
        # same definitions evaluated two ways must agree step for step;
        # the height cap is pinned so both sides see identical occupancy
        cap = 20
        real = materialize_window(
            cfg, WindowSpec(-700, 700, 0, 4600, epsilon=1e-9))
        ref = detect_renewals(real, cfg, [(0, 0)], max_steps=4500,
                              horizon_l=24, emit_heights=False,
                              height_cap=cap)
        ref_marks = [(r.sigma_index, r.positions[0].x) for r in ref.renewals]
        assert len(ref_marks) >= 2

        incs, truncated = renewal_increments(
            cfg, (0, 0), n_renewals=len(ref_marks) - 1, horizon_l=24,
            max_steps=4500, height_cap=cap)
        assert not truncated
        ref_incs = [
            (b[1] - a[1], b[0] - a[0])
            for a, b in zip(ref_marks, ref_marks[1:])
        ]
        assert incs == ref_incs


class TestEstimateSigmaGamma:
    def test_two_point_distribution(self):
        rng = np.random.default_rng(5)
        incs = [(int(rng.choice([-1, 1])), 2) for _ in range(4000)]
        est = estimate_sigma_gamma(incs)
        assert est["gamma"] == 2.0
        assert est["se_gamma"] == 0.0
        assert abs(est["sigma"] - 1.0) < 0.02
        assert est["sigma"] > 0 and est["gamma"] > 0

    def test_requires_samples(self):
        with pytest.raises(ValueError):
            estimate_sigma_gamma([(1, 1)] * 50)


class TestZProcess:
    def test_absorbing_series_found(self, cfg):
        # seed block known to yield a pre-coalescence joint renewal:
        # the series must be nonnegative, strictly positive before the
        # absorbing zero, and end there
        from howardweb.rng_field import derive_seed

        seed = derive_seed(20260809, 930_000 + 305)
        zs, truncated = z_process(cfg, (0, 0), (5, 0), n_renewals=6,
                                  horizon_l=64, eps_out=5e-3,
                                  max_steps=4000, seed=seed)
        assert not truncated
        assert len(zs) >= 2
        assert all(z > 0 for z in zs[:-1])
        assert zs[-1] == 0

    def test_post_merge_renewal_recorded(self, cfg):
        # a close pair coalesces quickly; its first joint renewal then
        # shows the absorbed separation
        zs, truncated = z_process(cfg, (0, 0), (2, 0), n_renewals=5,
                                  horizon_l=16, eps_out=1e-2,
                                  max_steps=30_000)
        assert not truncated
        assert zs and zs[-1] == 0

    def test_validation(self, cfg):
        with pytest.raises(ValueError):
            z_process(cfg, (3, 0), (1, 0), n_renewals=5)


class TestEnvelopeKernelAgreement:
    def test_kernel_envelope_mode_matches_reference(self, cfg):
        # the compiled envelope-exit trial must agree with the reference
        # confinement check step for step
        import dataclasses
        import numpy as np
        from howardweb import _kernels
        from howardweb.network import field_args, trace_path
        from howardweb.rng_field import derive_seed, law_tables

        tab = law_tables(cfg.law)
        l = 24
        for r in range(40):
            m = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, 77_000 + r))
            status, steps, _pos, _mg, exit_step = _kernels.trace_free(
                *field_args(m), tab.x_cut, tab.y_cut,
                np.array([0], dtype=np.int64), 0, l,
                _kernels.MODE_ENVELOPE, l, 40)
            assert status == _kernels.OK
            real = materialize_window(m, WindowSpec(-700, 700, 0, l + 2))
            ref_ok = in_event_horizon(real, m, (0, 0), l)
            assert (exit_step == 0) == ref_ok
            if exit_step:
                # first violation step must match the traced path exactly
                tr = trace_path(real, m, (0, 0), l)
                first = next(k for k, v in enumerate(tr.vertices)
                             if abs(v.x) > k * k)
                assert exit_step == first
