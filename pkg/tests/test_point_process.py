import pytest

from howardweb.point_process import (
    ResourceLimit,
    WindowSpec,
    box_counts,
    dump_realization,
    is_special,
    margin_depths,
    materialize_window,
    parse_dump,
)
from howardweb.rng_field import (
    GeometricLaw,
    ModelConfig,
    law_tables,
    sample_variates,
    site_variates,
)


def brute_force_rows(cfg, spec, margin_factor=4):
    """Independent scalar enumeration with oversized margins (the oracle)."""
    d_x, d_y = margin_depths(cfg.law, spec)
    d_x = max(4 * d_x, 8)
    d_y = max(4 * d_y, 8)
    tab = law_tables(cfg.law)
    d_x = min(d_x * margin_factor // 4 + d_x, 4 * tab.x_cut)
    d_y = min(d_y * margin_factor // 4 + d_y, 4 * tab.y_cut)
    rows = {y: set() for y in range(spec.y_lo, spec.y_hi + 1)}
    for b in range(spec.y_lo - d_y, spec.y_hi + 1):
        for a in range(spec.x_lo - d_x, spec.x_hi + d_x + 1):
            v = site_variates(cfg, (a, b))
            if not v.open:
                continue
            lx, ly = a + v.dx, b + v.dy
            if spec.y_lo <= ly <= spec.y_hi and spec.x_lo <= lx <= spec.x_hi:
                rows[ly].add(lx)
    return {y: sorted(s) for y, s in rows.items()}


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec(0, 0, 0, 5)
    with pytest.raises(ValueError):
        WindowSpec(0, 5, 0, 5, epsilon=0.0)


def test_margin_depths_vacuous_budget():
    law = GeometricLaw(0.5, 0.5)
    spec = WindowSpec(0, 99, 0, 99, epsilon=1.0)
    assert margin_depths(law, spec) == (0, 0)


def test_margin_depths_solves_tail_inequality():
    # oracle: direct minimal-depth solve of the documented union bound
    law = GeometricLaw(0.5, 0.5)
    spec = WindowSpec(0, 99, 0, 99, epsilon=1e-12)
    d_x, d_y = margin_depths(law, spec)
    tab = law_tables(law)

    def miss_y(d):
        return spec.width * sum(law.y_tail(t) for t in range(d + 1, d + 400))

    def miss_x(d, dy):
        rows = spec.height + dy
        return 2 * rows * sum(law.x_tail(t) for t in range(d + 1, d + 400))

    share = spec.epsilon / 2
    assert miss_y(d_y) <= share or d_y == tab.y_cut
    assert d_y == tab.y_cut or miss_y(d_y - 1) > share
    assert miss_x(d_x, d_y) <= share or d_x == tab.x_cut
    assert d_x == tab.x_cut or miss_x(d_x - 1, d_y) > share


def test_margin_depth_doubling_width():
    # pure-exponential y-tail at theta=0.5 decays by exactly 1/2 per row,
    # so doubling the window width deepens the margin by exactly one row
    law = GeometricLaw(0.5, 0.5)
    d1 = margin_depths(law, WindowSpec(0, 99, 0, 99, epsilon=1e-9))[1]
    d2 = margin_depths(law, WindowSpec(0, 199, 0, 99, epsilon=1e-9))[1]
    assert d2 - d1 == 1


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_materialize_matches_bruteforce_oracle(seed):
    cfg = ModelConfig(seed=seed, p=0.5, law=GeometricLaw(0.5, 0.5))
    spec = WindowSpec(-12, 12, 0, 14, epsilon=1e-12)
    real = materialize_window(cfg, spec)
    oracle = brute_force_rows(cfg, spec)
    for y in range(spec.y_lo, spec.y_hi + 1):
        assert real.rows[y].xs == oracle[y], f"row {y} mismatch"


def test_materialize_point_mass_full_lattice():
    cfg = ModelConfig(seed=5, p=1.0, law=GeometricLaw(1.0, 1.0))
    spec = WindowSpec(-5, 5, 0, 5)
    real = materialize_window(cfg, spec)
    for y in range(0, 6):
        row = real.rows[y]
        assert row.xs == list(range(-5, 6))
        assert all(row.special)


def test_materialize_p_zero_empty():
    cfg = ModelConfig(seed=5, p=0.0)
    real = materialize_window(cfg, WindowSpec(-5, 5, 0, 5))
    assert all(not real.rows[y].xs for y in range(0, 6))


def test_window_monotonicity(cfg):
    small = materialize_window(cfg, WindowSpec(-8, 8, 0, 10))
    large = materialize_window(cfg, WindowSpec(-20, 20, -5, 20))
    for y in range(0, 11):
        inner = [x for x in large.rows[y].xs if -8 <= x <= 8]
        assert inner == small.rows[y].xs


def test_special_points_are_fixed_points(cfg):
    spec = WindowSpec(-15, 15, 0, 15)
    real = materialize_window(cfg, spec, provenance=True)
    n_special = 0
    for y, row in real.rows.items():
        for x, sp, prov in zip(row.xs, row.special, row.provenance):
            assert len(prov) >= 1
            for sx, sy in prov:
                assert sy <= y, "perturbation must never point down"
            if sp:
                n_special += 1
                assert (x, y) in prov
                assert is_special(real.cfg, (x, y))
    assert n_special > 0


def test_upward_landings_recorded(cfg):
    spec = WindowSpec(-15, 15, 0, 15)
    real = materialize_window(cfg, spec)
    up = real.upward
    assert (up.land_y > up.src_y).all()
    assert len(up.x) > 0


def test_is_special_trivial_cases(cfg):
    # find one open zero-perturbation site and one closed site
    opens, ties, dxs, dys = sample_variates(cfg, 2000)
    found_special = found_closed = False
    for i in range(2000):
        if opens[i] and dxs[i] == 0 and dys[i] == 0 and not found_special:
            assert is_special(cfg, (i, 0))
            found_special = True
        if not opens[i] and not found_closed:
            assert not is_special(cfg, (i, 0))
            found_closed = True
    assert found_special and found_closed


def test_dump_roundtrip(cfg):
    real = materialize_window(cfg, WindowSpec(-10, 10, 0, 8))
    text = dump_realization(real)
    parsed = parse_dump(text)
    for y in range(0, 9):
        xs, sp = parsed[y]
        assert xs == real.rows[y].xs
        assert sp == real.rows[y].special
    assert dump_realization(real) == text  # stable


def test_resource_cap(cfg):
    with pytest.raises(ResourceLimit):
        materialize_window(cfg, WindowSpec(-10**5, 10**5, 0, 10**4),
                           max_sites=10**6)


def test_box_counts_point_mass_variance_zero():
    cfg = ModelConfig(seed=3, p=1.0, law=GeometricLaw(1.0, 1.0))
    out = box_counts(cfg, [8, 16], replicas=8)
    for side in (8, 16):
        assert out[side]["variance"] == 0.0
        assert out[side]["mean"] == side * side


def test_box_counts_thinning_variance(cfg):
    # at p=1/2 the count has an extensive Bernoulli-thinning component
    out = box_counts(cfg, [32], replicas=220)
    var = out[32]["variance"]
    expected = 0.25 * 32 * 32  # p(1-p) n^2
    assert 0.6 * expected < var < 1.6 * expected


def test_box_counts_validation(cfg):
    with pytest.raises(ValueError):
        box_counts(cfg, [2], replicas=10)
    with pytest.raises(ValueError):
        box_counts(cfg, [8], replicas=1)
