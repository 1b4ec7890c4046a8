import numpy as np
import pytest

from visitlift.geo import GeoPoint, GridConfig
from visitlift.graph import Location, build_graph
from visitlift.profiles import (
    ImpressionFeatureBundle,
    PriorRecord,
    UserProfile,
    derive_features,
    mix_bundle,
    reconcile_priors,
    update_profile,
)

GENDER = ((0, 1),)  # keywords 0/1 are mutually exclusive
K = 4


def fresh(rho=0.5):
    return UserProfile.new("dev", K, rho)


def test_prior_assertion_sets_keyword_and_zeroes_peer():
    p = reconcile_priors(fresh(), PriorRecord("dev", 1, {0: 1.0}), GENDER)
    assert p.keywords[0] == 1.0
    assert p.keywords[1] == 0.0
    assert p.pins == {0: 1.0}


def test_conflicting_assertions_clear_the_group():
    p = reconcile_priors(fresh(), PriorRecord("dev", 1, {0: 1.0}), GENDER)
    p = reconcile_priors(p, PriorRecord("dev", 2, {1: 1.0}), GENDER)
    assert p.keywords[0] == 0.0 and p.keywords[1] == 0.0
    assert not p.pins


def test_empty_prior_is_identity():
    base = fresh()
    base.keywords[2] = 0.3
    out = reconcile_priors(base, PriorRecord("dev", 1, {}), GENDER)
    np.testing.assert_array_equal(out.keywords, base.keywords)
    assert out.pins == base.pins


def test_reconciliation_is_idempotent():
    p = reconcile_priors(fresh(), PriorRecord("dev", 1, {0: 1.0}), GENDER)
    rec = PriorRecord("dev", 2, {1: 1.0})
    once = reconcile_priors(p, rec, GENDER)
    twice = reconcile_priors(once, rec, GENDER)
    np.testing.assert_array_equal(once.keywords, twice.keywords)
    assert once.pins == twice.pins
    assert once.cleared_groups == twice.cleared_groups


def test_cleared_group_reopens_on_newer_consistent_prior():
    p = reconcile_priors(fresh(), PriorRecord("dev", 1, {0: 1.0}), GENDER)
    p = reconcile_priors(p, PriorRecord("dev", 2, {1: 1.0}), GENDER)  # conflict
    p = reconcile_priors(p, PriorRecord("dev", 3, {1: 1.0}), GENDER)  # newer, consistent
    assert p.keywords[1] == 1.0
    assert p.pins == {1: 1.0}


def test_explicit_clear_unpins():
    p = reconcile_priors(fresh(), PriorRecord("dev", 1, {2: 0.7}))
    p = reconcile_priors(p, PriorRecord("dev", 2, {2: "clear"}))
    assert p.keywords[2] == 0.0
    assert 2 not in p.pins


def test_update_rho_one_keeps_reconciled_state():
    prof = fresh(rho=0.0)
    prof.rho = np.full(K, 0.99999)  # effectively rho -> 1
    bundle = ImpressionFeatureBundle(np.full(K, 1.0), np.full(K, 1.0))
    out = update_profile(prof, PriorRecord("dev", 1, {3: 0.25}), bundle, 0.5, 0.5)
    assert out.keywords[3] == 0.25


def test_update_rho_zero_no_prior_equals_bundle():
    prof = fresh(rho=0.0)
    bundle = ImpressionFeatureBundle(np.array([0.2, 0.4, 0.6, 0.8]), np.zeros(K))
    out = update_profile(prof, None, bundle, gamma_f=1.0, gamma_g=0.0)
    np.testing.assert_allclose(out.keywords, bundle.f)


def test_update_direct_formula_oracle():
    prof = fresh(rho=0.5)
    prof.keywords[2] = 0.2
    bundle = ImpressionFeatureBundle(np.zeros(K), np.zeros(K))
    bundle.f[2] = 0.6
    out = update_profile(prof, None, bundle, gamma_f=1.0, gamma_g=0.0)
    assert out.keywords[2] == pytest.approx(0.5 * 0.2 + 0.5 * 0.6)


def test_prior_priority_beats_bundle():
    prof = fresh(rho=0.5)
    bundle = ImpressionFeatureBundle(np.full(K, 1.0), np.full(K, 1.0))
    out = update_profile(prof, PriorRecord("dev", 1, {0: 1.0}), bundle, 0.5, 0.5, GENDER)
    assert out.keywords[0] == 1.0


def test_profile_range_preserved_under_random_updates():
    rng = np.random.default_rng(4)
    prof = fresh(rho=0.3)
    for step in range(30):
        bundle = ImpressionFeatureBundle(rng.uniform(0, 1, K), rng.uniform(0, 1, K))
        prior = None
        if rng.random() < 0.4:
            prior = PriorRecord("dev", step, {int(rng.integers(0, K)): float(rng.uniform(0, 1))})
        prof = update_profile(prof, prior, bundle, 0.6, 0.6, GENDER)
        assert prof.keywords.min() >= 0.0 and prof.keywords.max() <= 1.0


def test_mix_bundle_clamps():
    b = ImpressionFeatureBundle(np.full(K, 0.9), np.full(K, 0.9))
    assert mix_bundle(b, 1.0, 1.0).max() == 1.0


# --- derive_features against a real graph ----------------------------------

DEG = 1.0 / 111194.92664455873
CFG = GridConfig(0.01, 0.01, GeoPoint(0.0, 0.0))


def make_graph_with_keywords():
    locs = [
        Location("a", GeoPoint(0.0, 0.0)),
        Location("b", GeoPoint(0.0, 400 * DEG)),
    ]
    g = build_graph(locs, CFG, 100.0, k=2)
    combined = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    return g, combined


def test_single_impression_at_location_gives_its_keywords():
    g, combined = make_graph_with_keywords()
    bundle = derive_features([GeoPoint(0.0, 0.0)], g, combined, 50.0, 0.5, 0.5)
    np.testing.assert_allclose(bundle.g, combined["a"])
    np.testing.assert_allclose(bundle.f, combined["a"])


def test_two_equal_visits_average_keywords():
    g, combined = make_graph_with_keywords()
    bundle = derive_features(
        [GeoPoint(0.0, 0.0), GeoPoint(0.0, 400 * DEG)], g, combined, 50.0, 0.5, 0.5
    )
    np.testing.assert_allclose(bundle.g, [0.5, 0.5])


def test_gamma_f_zero_uses_only_visits():
    g, combined = make_graph_with_keywords()
    bundle = derive_features([GeoPoint(0.0, 0.0)], g, combined, 50.0, 0.0, 0.8)
    np.testing.assert_allclose(mix_bundle(bundle, 0.0, 0.8), 0.8 * bundle.g)


def test_no_impressions_gives_zero_bundle():
    g, combined = make_graph_with_keywords()
    bundle = derive_features([], g, combined, 50.0, 0.5, 0.5)
    assert not bundle.f.any() and not bundle.g.any()


def test_far_impression_counts_for_f_not_g():
    g, combined = make_graph_with_keywords()
    # 80 m from location a: inside the window, outside the 50 m visit radius.
    bundle = derive_features([GeoPoint(0.0, 80 * DEG)], g, combined, 50.0, 0.5, 0.5)
    np.testing.assert_allclose(bundle.f, combined["a"])
    assert not bundle.g.any()
