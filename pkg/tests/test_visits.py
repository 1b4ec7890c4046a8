import numpy as np
import pytest
from scipy import integrate

from visitlift.geo import ConfigurationError, GeoPoint, GridConfig
from visitlift.graph import Location, build_graph
from visitlift.visits import (
    FittingError,
    Hit,
    Impression,
    ParcelRule,
    RadiusRule,
    SiteIndex,
    Source,
    StochasticRule,
    Visit,
    daily_matrix,
    daily_series,
    detect_hit,
    detect_hits_bulk,
    fit_stochastic,
    ig_survival,
    lognormal_survival,
    lump_visits,
    lump_visits_bulk,
    point_in_polygon,
    stochastic_weight,
)

DEG = 1.0 / 111194.92664455873
CFG = GridConfig(0.01, 0.01, GeoPoint(0.0, 0.0))


def make_graph(positions_m, k=1):
    locs = [Location(f"L{i}", GeoPoint(0.0, x * DEG)) for i, x in enumerate(positions_m)]
    return build_graph(locs, CFG, 100.0, k=k)


def imp(x_m, t=0, dev="d0"):
    return Impression(dev, t, GeoPoint(0.0, x_m * DEG), Source.LRTB)


def ig_density(x, mu, lam):
    return np.sqrt(lam / (2 * np.pi * x**3)) * np.exp(-lam * (x - mu) ** 2 / (2 * x * mu**2))


# --- hit rules ---------------------------------------------------------------


def test_radius_hit_at_location():
    g = make_graph([0.0, 400.0])
    h = detect_hit(imp(0.0), g, RadiusRule(50.0))
    assert h is not None and h.weight == 1.0 and h.pid == "L0"


def test_radius_miss_just_outside():
    g = make_graph([0.0])
    assert detect_hit(imp(51.0), g, RadiusRule(50.0)) is None


def test_impression_without_location_is_no_hit():
    g = make_graph([0.0])
    assert detect_hit(Impression("d", 0, None, Source.ND), g, RadiusRule(50.0)) is None


def test_radius_monotone_in_k():
    g = make_graph([0.0, 300.0])
    rng = np.random.default_rng(2)
    xs = rng.uniform(-200, 500, 300)
    total_small = sum(detect_hit(imp(x), g, RadiusRule(40.0)) is not None for x in xs)
    total_big = sum(detect_hit(imp(x), g, RadiusRule(80.0)) is not None for x in xs)
    assert total_big >= total_small


def test_stochastic_weight_matches_numeric_integration_oracle():
    mu, lam, r = 60.0, 90.0, 50.0
    rule = StochasticRule(r, mu, lam, 4.0, 0.5)
    for d in [50.5, 55.0, 62.0, 70.0, 74.9]:
        tail, _ = integrate.quad(ig_density, d, np.inf, args=(mu, lam))
        assert float(stochastic_weight(d, rule)) == pytest.approx(tail, abs=1e-6)


def test_stochastic_bands_and_cutoff():
    rule = StochasticRule(50.0, 60.0, 90.0, np.log(80.0), 0.4)
    assert float(stochastic_weight(10.0, rule)) == 1.0
    assert float(stochastic_weight(50.0, rule)) == 1.0
    w_mid = float(stochastic_weight(60.0, rule))
    assert 0.0 < w_mid < 1.0
    w_outer = float(stochastic_weight(100.0, rule))
    assert 0.0 <= w_outer < 1.0
    assert float(stochastic_weight(151.0, rule)) == 0.0


def test_lognormal_survival_oracle():
    from scipy.stats import lognorm

    mu_log, sigma = np.log(80.0), 0.4
    for d in [60.0, 90.0, 130.0]:
        expected = lognorm.sf(d, s=sigma, scale=np.exp(mu_log))
        assert float(lognormal_survival(d, mu_log, sigma)) == pytest.approx(expected, rel=1e-10)


def test_fit_stochastic_recovers_ig_parameters():
    rng = np.random.default_rng(0)
    mu, lam = 2.0, 3.0
    samples = rng.wald(mu, lam, 100_000)
    r = max(samples) / 3.0 + 1.0
    rule = fit_stochastic(samples, r)
    assert rule.ig_mu == pytest.approx(mu, rel=0.05)
    # variance identity: S^2 = mu^3 / lam
    assert rule.ig_lam == pytest.approx(lam, rel=0.05)


def test_fit_stochastic_rejects_degenerate_samples():
    with pytest.raises(FittingError):
        fit_stochastic(np.full(100, 25.0), 50.0)
    with pytest.raises(FittingError):
        fit_stochastic(np.arange(10, dtype=float), 50.0)


def test_fit_records_band_discontinuities():
    rng = np.random.default_rng(5)
    r = 50.0
    samples = np.clip(rng.gamma(4.0, 12.0, 5000), 0.1, 3 * r)
    rule = fit_stochastic(samples, r)
    # survival jumps from 1 to 1-CDF(R) when crossing R from the left
    assert rule.jump_at_r == pytest.approx(1.0 - float(ig_survival(r, rule.ig_mu, rule.ig_lam)))
    assert rule.jump_at_band >= 0.0


def test_hit_density_roughly_linear_within_radius():
    # Visit probability proportional to area means the aggregate hit-distance
    # density grows ~linearly in d over [0, R]: counts in equal-width rings
    # should increase with d.
    rng = np.random.default_rng(9)
    n = 200_000
    r = 50.0
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = r * np.sqrt(rng.uniform(0, 1, n))  # uniform over the disc
    d = np.abs(rad)
    hist, _ = np.histogram(d, bins=5, range=(0, r))
    assert np.all(np.diff(hist) > 0)
    ratio = hist[-1] / hist[0]
    assert 7.0 < ratio < 11.0  # triangular density predicts 9


# --- parcel ------------------------------------------------------------------

SQUARE = (
    GeoPoint(0.0, 0.0),
    GeoPoint(0.0, 100 * DEG),
    GeoPoint(100 * DEG, 100 * DEG),
    GeoPoint(100 * DEG, 0.0),
)


def test_parcel_inside_and_boundary():
    rule = ParcelRule(SQUARE)
    g = make_graph([0.0])
    inside = Impression("d", 0, GeoPoint(50 * DEG, 50 * DEG), Source.ND)
    edge = Impression("d", 0, GeoPoint(0.0, 50 * DEG), Source.ND)
    outside = Impression("d", 0, GeoPoint(150 * DEG, 50 * DEG), Source.ND)
    assert detect_hit(inside, g, rule).weight == 1.0
    assert detect_hit(edge, g, rule).weight == 1.0
    assert detect_hit(outside, g, rule) is None


def test_parcel_validation():
    with pytest.raises(ValueError, match="3 vertices"):
        ParcelRule((GeoPoint(0, 0), GeoPoint(0, 1)))
    bowtie = (GeoPoint(0, 0), GeoPoint(1, 1), GeoPoint(1, 0), GeoPoint(0, 1))
    with pytest.raises(ValueError, match="simple"):
        ParcelRule(bowtie)


def test_radius_superset_of_convex_parcel():
    rule = ParcelRule(SQUARE)
    lat_c = sum(p.lat for p in SQUARE) / 4
    lon_c = sum(p.lon for p in SQUARE) / 4
    from visitlift.geo import distance

    k = max(distance(GeoPoint(lat_c, lon_c), p) for p in SQUARE)
    g = build_graph([Location("c", GeoPoint(lat_c, lon_c))], CFG, 100.0, k=1)
    rng = np.random.default_rng(3)
    for _ in range(300):
        p = GeoPoint(rng.uniform(-0.001, 0.002), rng.uniform(-0.001, 0.002))
        i = Impression("d", 0, p, Source.ND)
        if point_in_polygon(p, SQUARE):
            assert detect_hit(i, g, RadiusRule(k * (1 + 1e-9))) is not None


# --- bulk path ---------------------------------------------------------------


def test_bulk_hits_match_single_path():
    g = make_graph([0.0, 220.0, 700.0])
    index = SiteIndex(g)
    rng = np.random.default_rng(1)
    xs = rng.uniform(-100, 800, 500)
    rule = RadiusRule(60.0)
    dev = np.arange(500) % 7
    t = np.arange(500) * 100
    bd, bt, bs, bw = detect_hits_bulk(index, dev, t, np.zeros(500), xs * DEG, rule)
    got = {(int(d), int(tt)): (index.pids[s], w) for d, tt, s, w in zip(bd, bt, bs, bw)}
    for i, x in enumerate(xs):
        h = detect_hit(Impression(f"{dev[i]}", int(t[i]), GeoPoint(0.0, x * DEG), Source.ND), g, rule)
        key = (int(dev[i]), int(t[i]))
        if h is None:
            assert key not in got
        else:
            assert got[key][0] == h.pid
            assert got[key][1] == pytest.approx(h.weight)


def test_bulk_search_radius_guard():
    g = make_graph([0.0])
    index = SiteIndex(g)
    with pytest.raises(ConfigurationError):
        detect_hits_bulk(
            index, np.zeros(1, int), np.zeros(1, int), np.zeros(1), np.zeros(1), RadiusRule(5000.0)
        )


# --- lumping -----------------------------------------------------------------


def hits_at(times, weights=None, dev="d"):
    weights = weights or [1.0] * len(times)
    return [Hit(dev, t, "L0", w) for t, w in zip(times, weights)]


def test_lump_five_hits_in_ten_minutes():
    hs = hits_at([0, 120, 240, 360, 480])
    vs = lump_visits(hs, 3600, 0.0)
    assert len(vs) == 1
    assert vs[0] == Visit(0, 1.0)


def test_lump_two_days_apart():
    hs = hits_at([0, 2 * 86400])
    vs = lump_visits(hs, 86400, 0.0)
    assert len(vs) == 2


def test_lump_threshold_arithmetic():
    hs = hits_at([0, 60], [0.3, 0.4])
    vs = lump_visits(hs, 3600, 0.5)
    assert len(vs) == 1
    assert vs[0].weight == pytest.approx(0.4)  # min(1, max weight)
    assert lump_visits(hits_at([0], [0.3]), 3600, 0.5) == []


def test_lump_requires_sorted_hits():
    with pytest.raises(ValueError, match="sorted"):
        lump_visits(hits_at([100, 0]), 3600, 0.0)


def test_lump_window_too_long_rejected():
    with pytest.raises(ValueError):
        lump_visits(hits_at([0]), 2 * 86400, 0.0)


def test_bulk_lump_matches_per_device():
    rng = np.random.default_rng(8)
    n_dev = 9
    dev = rng.integers(0, n_dev, 400)
    t = rng.integers(0, 5 * 86400, 400)
    w = rng.uniform(0.1, 1.0, 400)
    bd, bt, bw = lump_visits_bulk(dev, t, w, n_dev, 7200, 0.25)
    for d in range(n_dev):
        mask = dev == d
        order = np.argsort(t[mask], kind="stable")
        hs = hits_at(t[mask][order].tolist(), w[mask][order].tolist())
        expected = lump_visits(hs, 7200, 0.25)
        got = [(int(tt), float(ww)) for dd, tt, ww in zip(bd, bt, bw) if dd == d]
        assert got == [(v.t, pytest.approx(v.weight)) for v in expected]


# --- daily series ------------------------------------------------------------


def test_series_placement():
    vs = [Visit(3 * 86400 + 100, 1.0)]
    s = daily_series(vs, 0, 7)
    np.testing.assert_array_equal(s.counts, [0, 0, 0, 1, 0, 0, 0])


def test_series_additivity_and_fractions():
    vs = [Visit(100, 1.0), Visit(5000, 1.0), Visit(86400 + 10, 0.5), Visit(86400 + 20, 0.25)]
    s = daily_series(vs, 0, 3)
    assert s.counts[0] == 2.0
    assert s.counts[1] == pytest.approx(0.75)


def test_series_drops_out_of_flight():
    vs = [Visit(-86400, 1.0), Visit(10 * 86400, 1.0), Visit(100, 1.0)]
    s = daily_series(vs, 0, 5)
    assert s.dropped == 2
    assert s.counts.sum() == 1.0


def test_series_conservation():
    rng = np.random.default_rng(0)
    t_days = 10
    vs = [Visit(int(rng.integers(0, t_days * 86400)), float(rng.uniform(0, 1))) for _ in range(200)]
    s = daily_series(vs, 0, t_days)
    assert s.counts.sum() == pytest.approx(sum(v.weight for v in vs))


def test_daily_matrix_matches_series():
    rng = np.random.default_rng(4)
    n_dev, t_days = 6, 8
    dev = rng.integers(0, n_dev, 300)
    t = rng.integers(-86400, (t_days + 1) * 86400, 300)
    w = rng.uniform(0, 1, 300)
    mat, dropped = daily_matrix(dev, t, w, n_dev, 0, t_days)
    total_dropped = 0
    for d in range(n_dev):
        mask = dev == d
        series = daily_series(
            [Visit(int(tt), float(ww)) for tt, ww in zip(t[mask], w[mask])], 0, t_days
        )
        np.testing.assert_allclose(mat[d], series.counts)
        total_dropped += series.dropped
    assert dropped == total_dropped
