import numpy as np
import pytest

from visitlift import _kernels
from visitlift._kernels import _pure

BACKENDS = _kernels.backends()
HAS_COMPILED = "compiled" in BACKENDS

pytestmark = pytest.mark.skipif(
    not HAS_COMPILED, reason="compiled extension not built; only the fallback exists"
)


def test_compiled_backend_selected_by_default():
    assert _kernels.backend_name() == "compiled"


def test_sweep_labels_equivalence():
    rng = np.random.default_rng(0)
    compiled = BACKENDS["compiled"]
    for trial in range(30):
        scores = np.sort(rng.choice(rng.uniform(0, 1, 20), 300))
        for caliper in (-1.0, 0.0, 1e-4, 0.05, 0.3):
            a = compiled.sweep_labels(scores, caliper)
            b = _pure.sweep_labels(scores, caliper)
            np.testing.assert_array_equal(a, b)


def test_sweep_labels_empty_and_single():
    for impl in BACKENDS.values():
        assert impl.sweep_labels(np.empty(0), -1.0).shape == (0,)
        np.testing.assert_array_equal(impl.sweep_labels(np.array([0.5]), -1.0), [0])


def test_nearest_site_equivalence():
    rng = np.random.default_rng(1)
    compiled = BACKENDS["compiled"]
    n_sites, n_queries, n_groups = 40, 500, 12
    site_lat = rng.uniform(-60, 60, n_sites)
    site_lon = rng.uniform(-170, 170, n_sites)
    q_lat = rng.uniform(-60, 60, n_queries)
    q_lon = rng.uniform(-170, 170, n_queries)
    group_start = np.sort(rng.choice(n_queries, n_groups - 1, replace=False))
    group_start = np.concatenate([[0], group_start, [n_queries]]).astype(np.int64)
    cand_chunks = [
        rng.choice(n_sites, rng.integers(0, 8), replace=False).astype(np.int64)
        for _ in range(n_groups)
    ]
    cand_start = np.concatenate([[0], np.cumsum([c.size for c in cand_chunks])]).astype(np.int64)
    cand_sites = (
        np.concatenate(cand_chunks) if cand_chunks else np.empty(0, dtype=np.int64)
    )
    ia, da = compiled.nearest_site(q_lat, q_lon, group_start, cand_start, cand_sites, site_lat, site_lon)
    ib, db = _pure.nearest_site(q_lat, q_lon, group_start, cand_start, cand_sites, site_lat, site_lon)
    np.testing.assert_array_equal(ia, ib)
    finite = np.isfinite(da)
    np.testing.assert_array_equal(finite, np.isfinite(db))
    np.testing.assert_allclose(da[finite], db[finite], rtol=1e-9)


def test_lump_windows_equivalence():
    rng = np.random.default_rng(2)
    compiled = BACKENDS["compiled"]
    n_dev = 25
    counts = rng.integers(0, 30, n_dev)
    dev_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    total = int(dev_start[-1])
    times = np.concatenate(
        [np.sort(rng.integers(0, 200_000, c)) for c in counts]
    ).astype(np.int64)
    weights = rng.uniform(0.05, 1.0, total)
    for delta_t, thresh in ((3600, 0.0), (7200, 0.5), (86400, 1.5)):
        a = compiled.lump_windows(times, weights, dev_start, delta_t, thresh)
        b = _pure.lump_windows(times, weights, dev_start, delta_t, thresh)
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y)


def test_forced_pure_env(tmp_path):
    import subprocess
    import sys

    code = (
        "from visitlift import _kernels; print(_kernels.backend_name())"
    )
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True,
        text=True,
        env={"PATH": "/usr/bin:/bin", "VISITLIFT_PURE": "1"},
    )
    assert out.stdout.strip() == "pure"
