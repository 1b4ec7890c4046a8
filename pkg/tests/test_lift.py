import math

import numpy as np
import pytest
from scipy.stats import chisquare

from visitlift.lift import (
    UNSEEN,
    Cohort,
    cohort_expectation,
    display_transform,
    exposure_factor,
    general_lift,
    impute_control_fts,
    balanced_lift,
    lift_timeseries,
    make_kernel,
    response,
    response_matrix,
    responses_at_fts,
    step_response_mass,
)
from visitlift.visits import VisitSeries


def cohort(counts, first_seen=None, last_impression=None, t=None):
    counts = np.asarray(counts, dtype=np.float64)
    n, t_days = counts.shape
    fs = np.zeros(n, dtype=np.int64) if first_seen is None else np.asarray(first_seen)
    li = (
        np.full(n, t_days - 1, dtype=np.int64)
        if last_impression is None
        else np.asarray(last_impression)
    )
    return Cohort(counts, fs, li)


# --- kernel ------------------------------------------------------------------


def test_kernel_m1():
    k = make_kernel(1)
    assert k.tap(-1) == -1.0
    assert k.tap(0) == 1.0


def test_kernel_m2_direct_evaluation():
    k = make_kernel(2)
    assert k.tap(-2) == pytest.approx(-math.exp(-1), rel=1e-15)
    assert k.tap(-1) == -1.0
    assert k.tap(0) == 1.0
    assert k.tap(1) == pytest.approx(math.exp(-1), rel=1e-15)


def test_kernel_antisymmetry_exact():
    k = make_kernel(7)
    for tap in range(0, 7):
        assert k.tap(tap) == -k.tap(-(1 + tap))
    paired = sum(k.tap(t) + k.tap(-(1 + t)) for t in range(7))
    assert paired == 0.0


def test_kernel_validation():
    with pytest.raises(ValueError):
        make_kernel(0)


# --- response ----------------------------------------------------------------


def test_constant_series_response_is_exactly_zero():
    s = VisitSeries("d", 0, np.full(20, 3.0), first_seen=0, last_impression=19)
    k = make_kernel(3)
    assert response(s, 10, k) == 0.0


def test_step_response_m2():
    counts = np.zeros(20)
    counts[10:] = 1.0
    s = VisitSeries("d", 0, counts, first_seen=0, last_impression=19)
    val = response(s, 10, make_kernel(2))
    assert val == pytest.approx(1.0 + math.exp(-1.0), abs=1e-12)


def test_zero_series_response_zero():
    s = VisitSeries("d", 0, np.zeros(10), first_seen=0, last_impression=9)
    assert response(s, 5, make_kernel(7)) == 0.0


def test_inactive_device_returns_none():
    s = VisitSeries("d", 0, np.ones(10), first_seen=6, last_impression=9)
    k = make_kernel(2)
    assert response(s, 5, k) is None  # not yet seen
    s2 = VisitSeries("d", 0, np.ones(10), first_seen=0, last_impression=1)
    assert response(s2, 5, k) is None  # last impression before e_{j-M}
    assert response(s2, 3, k) is not None


def test_shift_covariance_on_dyadic_series():
    rng = np.random.default_rng(0)
    base = rng.integers(0, 4, 16).astype(np.float64) * 0.25
    k = make_kernel(3)
    s1 = VisitSeries("d", 0, base, first_seen=0, last_impression=15)
    s2 = VisitSeries("d", 0, base + 2.0, first_seen=0, last_impression=15)
    for epoch in range(3, 13):  # full kernel window inside the flight
        assert response(s1, epoch, k) == response(s2, epoch, k)


def test_response_matrix_matches_scalar_path():
    rng = np.random.default_rng(1)
    counts = rng.poisson(1.0, (8, 12)).astype(np.float64)
    fs = rng.integers(0, 6, 8)
    li = rng.integers(6, 12, 8)
    co = Cohort(counts, fs, li)
    k = make_kernel(4)
    resp, act = response_matrix(co, k)
    for d in range(8):
        s = VisitSeries("d", 0, counts[d], first_seen=int(fs[d]), last_impression=int(li[d]))
        for j in range(12):
            single = response(s, j, k)
            if single is None:
                assert not act[d, j]
            else:
                assert act[d, j]
                assert resp[d, j] == pytest.approx(single, rel=1e-12, abs=1e-12)


# --- expectations ------------------------------------------------------------


def test_expectation_zeros():
    resp = np.zeros((5, 4))
    act = np.ones((5, 4), dtype=bool)
    assert cohort_expectation(resp, act) == 0.0


def test_expectation_single_record():
    resp = np.array([[0.7]])
    act = np.array([[True]])
    assert cohort_expectation(resp, act) == pytest.approx(0.7)


def test_expectation_two_level_average():
    # two epochs with means 0.1 and 0.3 -> 0.2
    resp = np.array([[0.1, 0.4], [0.1, 0.2]])
    act = np.array([[True, True], [True, True]])
    assert cohort_expectation(resp, act) == pytest.approx(0.2)


def test_expectation_requires_activity():
    with pytest.raises(ValueError):
        cohort_expectation(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))


# --- general lift ------------------------------------------------------------


def test_identical_cohorts_zero_lift():
    rng = np.random.default_rng(2)
    counts = rng.poisson(0.5, (50, 10)).astype(np.float64)
    e = cohort(counts)
    c = cohort(counts.copy())
    rep = general_lift(e, c, make_kernel(3), bootstrap_b=0)
    assert rep.lift == 0.0


def test_lift_formula_arithmetic():
    e = cohort([[0.02]])
    c = cohort([[0.01]])
    rep = general_lift(e, c, make_kernel(2), bootstrap_b=0)
    assert rep.lift == pytest.approx(0.01)
    assert rep.lift_p == pytest.approx(100.0)
    assert not rep.lift_p_unstable


def test_cohort_swap_antisymmetry():
    rng = np.random.default_rng(3)
    a = cohort(rng.poisson(1.0, (30, 8)).astype(np.float64))
    b = cohort(rng.poisson(0.6, (40, 8)).astype(np.float64))
    k = make_kernel(2)
    assert general_lift(a, b, k, bootstrap_b=0).lift == pytest.approx(
        -general_lift(b, a, k, bootstrap_b=0).lift, rel=1e-12
    )


def test_lift_p_unstable_guard():
    e = cohort([[0.5]])
    c = cohort([[0.0]])
    rep = general_lift(e, c, make_kernel(1), bootstrap_b=0)
    assert rep.lift_p is None
    assert rep.lift_p_unstable


def test_null_split_within_bootstrap_ci():
    rng = np.random.default_rng(4)
    counts = rng.poisson(0.4, (3000, 14)).astype(np.float64)
    half = 1500
    e = cohort(counts[:half])
    c = cohort(counts[half:])
    rep = general_lift(e, c, make_kernel(7), bootstrap_b=400, seed=0)
    assert rep.bootstrap.ci_low <= 0.0 <= rep.bootstrap.ci_high


def test_general_lift_bootstrap_deterministic():
    rng = np.random.default_rng(5)
    counts = rng.poisson(0.5, (200, 10)).astype(np.float64)
    e, c = cohort(counts[:100]), cohort(counts[100:])
    k = make_kernel(3)
    r1 = general_lift(e, c, k, bootstrap_b=200, seed=7)
    r2 = general_lift(e, c, k, bootstrap_b=200, seed=7)
    assert r1.bootstrap.sigma_mu == r2.bootstrap.sigma_mu
    assert r1.bootstrap.mean == r2.bootstrap.mean


# --- time series -------------------------------------------------------------


def test_single_epoch_timeseries_equals_general_lift():
    e = cohort([[0.4], [0.8]])
    c = cohort([[0.1], [0.3]])
    k = make_kernel(1)
    ts = lift_timeseries(e, c, k)
    rep = general_lift(e, c, k, bootstrap_b=0)
    assert len(ts) == 1
    assert ts[0]["lift"] == pytest.approx(rep.lift)


def test_injected_step_shows_in_timeseries():
    rng = np.random.default_rng(6)
    t = 30
    base = rng.poisson(0.5, (800, t)).astype(np.float64)
    boosted = base.copy()
    boosted[:, 10:] += rng.poisson(0.6, (800, t - 10))
    e = cohort(boosted)
    c = cohort(rng.poisson(0.5, (800, t)).astype(np.float64))
    ts = lift_timeseries(e, c, make_kernel(3))
    lifts = np.array([row["lift"] for row in ts])
    assert lifts[10] > 0.3
    assert abs(lifts[:7]).max() < lifts[10]


# --- FTS imputation and balanced lift ----------------------------------------


def test_impute_point_distribution():
    exposed_fts = np.full(50, 3, dtype=np.int64)
    first = np.array([0, 0, 4], dtype=np.int64)
    last = np.array([10, 2, 10], dtype=np.int64)
    fts = impute_control_fts(first, last, exposed_fts, seed=0)
    assert fts[0] == 3
    assert fts[1] == UNSEEN  # span [0, 2] cannot host day 3
    assert fts[2] == UNSEEN  # span [4, 10] cannot host day 3


def test_impute_deterministic():
    rng = np.random.default_rng(7)
    exposed_fts = rng.integers(0, 20, 500)
    first = rng.integers(0, 5, 300)
    last = rng.integers(10, 20, 300)
    a = impute_control_fts(first, last, exposed_fts, seed=3)
    b = impute_control_fts(first, last, exposed_fts, seed=3)
    np.testing.assert_array_equal(a, b)


def test_impute_marginal_matches_exposed():
    rng = np.random.default_rng(8)
    t = 15
    exposed_fts = rng.integers(0, t, 30_000)
    first = np.zeros(30_000, dtype=np.int64)
    last = np.full(30_000, t - 1, dtype=np.int64)
    fts = impute_control_fts(first, last, exposed_fts, seed=1)
    obs = np.bincount(fts, minlength=t)
    expected_p = np.bincount(exposed_fts, minlength=t) / exposed_fts.size
    stat = chisquare(obs, expected_p * fts.size)
    assert stat.pvalue > 0.01


def test_responses_at_fts_excludes_inactive():
    counts = np.ones((2, 10))
    fs = np.array([2, UNSEEN], dtype=np.int64)
    li = np.array([9, 9], dtype=np.int64)
    co = Cohort(counts, fs, li)
    vals = responses_at_fts(co, fs, make_kernel(2))
    assert not np.isnan(vals[0])
    assert np.isnan(vals[1])


def test_balanced_mirror_cohorts_zero_lift():
    rng = np.random.default_rng(9)
    counts = rng.poisson(0.8, (300, 12)).astype(np.float64)
    fs = rng.integers(2, 9, 300)
    e = Cohort(counts, fs, np.full(300, 11))
    c = Cohort(counts.copy(), np.zeros(300, dtype=np.int64), np.full(300, 11))
    rep = balanced_lift(e, c, fs.copy(), make_kernel(2), seed=0, bootstrap_b=0)
    assert rep.lift == pytest.approx(0.0, abs=1e-12)
    assert rep.metadata["n_pairs"] == 300


def test_balanced_requires_control_at_least_exposed():
    e = cohort(np.ones((10, 5)))
    c = cohort(np.ones((5, 5)))
    with pytest.raises(ValueError, match="at least as large"):
        balanced_lift(e, c, np.zeros(5, dtype=np.int64), make_kernel(1), bootstrap_b=0)


def test_balanced_detects_injected_lift_across_seeds():
    rng = np.random.default_rng(10)
    t = 24
    n = 1200
    fs = rng.integers(4, 16, n)
    base = rng.poisson(0.5, (n, t)).astype(np.float64)
    extra = rng.poisson(0.8, (n, t)).astype(np.float64)
    mask = np.arange(t)[None, :] >= fs[:, None]
    exposed_counts = base + extra * mask
    e = Cohort(exposed_counts, fs, np.full(n, t - 1))
    c_counts = rng.poisson(0.5, (2 * n, t)).astype(np.float64)
    c = Cohort(c_counts, np.zeros(2 * n, dtype=np.int64), np.full(2 * n, t - 1))
    c_fts = impute_control_fts(c.first_seen, c.last_impression, fs, seed=0)
    signs = []
    for seed in range(20):
        rep = balanced_lift(e, c, c_fts, make_kernel(7), seed=seed, bootstrap_b=0)
        signs.append(rep.lift > 0)
    assert all(signs)


# --- factors and display -----------------------------------------------------


def test_step_response_mass_zero_away_from_step():
    k = make_kernel(3)
    # epoch far past the step sees a constant series: zero mass
    assert step_response_mass(k, 100, 50, 10) == pytest.approx(0.0, abs=1e-15)
    # epoch at the step sees the positive taps only
    expected = sum(math.exp(-i) for i in range(3))
    assert step_response_mass(k, 100, 10, 10) == pytest.approx(expected, rel=1e-12)


def test_exposure_factor_converts_step_to_rate():
    # Synthetic sustained step of height delta: lift / factor must recover delta.
    rng = np.random.default_rng(11)
    t, n = 30, 4000
    fs = rng.integers(0, t, n)
    delta = 0.35
    mask = np.arange(t)[None, :] >= fs[:, None]
    counts = delta * mask
    co = Cohort(counts, fs, np.full(n, t - 1))
    k = make_kernel(7)
    resp, act = response_matrix(co, k)
    lift = cohort_expectation(resp, act)
    factor = exposure_factor(co.first_seen, act, k)
    assert lift / factor == pytest.approx(delta, rel=1e-9)


def test_display_transform():
    vals = np.array([-150.0, -1.0, 0.25, 1.0, 1000.0])
    out = display_transform(vals)
    np.testing.assert_allclose(out, [-(1 + np.log10(150.0)), -1.0, 0.25, 1.0, 4.0])
