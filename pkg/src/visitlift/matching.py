"""Targeting-bias removal: propensity scoring, the sorted-score cluster
sweep with optional caliper activation, a k-means label variant, and the
matched (ATT-weighted) lift."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .lift import LiftReport, _relative_lift, _visit_normalized
from .quality import bootstrap_paired, matched_quality_report

DEFAULT_CALIPER = 1e-3
MAX_ADAPTIVE_CALIPER = 0.05
RIDGE = 1e-6


@dataclass
class FeatureMatrix:
    """N users by K features in [0, 1] plus the exposure labels."""

    x: np.ndarray
    z: np.ndarray
    device_ids: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.int8)
        self.device_ids = np.asarray(self.device_ids)
        if self.x.ndim != 2 or self.x.shape[0] != self.z.shape[0]:
            raise ValueError("features and labels must align")
        if not np.isfinite(self.x).all():
            raise ValueError("features must be finite")
        if self.z.min() < 0 or self.z.max() > 1 or not (self.z == 1).any() or not (self.z == 0).any():
            raise ValueError("need binary exposure labels with both classes present")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]


def add_time_features(fm: FeatureMatrix, first_seen, active_days, t_days: int) -> FeatureMatrix:
    """Append the two time features: first-seen day and active-day count,
    both scaled into [0, 1]."""
    fs = np.clip(np.asarray(first_seen, dtype=np.float64), 0, t_days) / max(t_days, 1)
    ad = np.clip(np.asarray(active_days, dtype=np.float64), 0, t_days) / max(t_days, 1)
    return FeatureMatrix(np.column_stack([fm.x, fs, ad]), fm.z, fm.device_ids)


@dataclass
class PropensityModel:
    beta: np.ndarray          # intercept first; dropped columns get 0
    iterations: int
    converged: bool
    dropped_columns: list[int] = field(default_factory=list)


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_likelihood(z, p, beta, ridge) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    ll = float(z @ np.log(p) + (1 - z) @ np.log(1 - p))
    return ll - 0.5 * ridge * float(beta @ beta)


def fit_propensity(
    fm: FeatureMatrix, max_iter: int = 10, ridge: float = RIDGE, tol: float = 1e-8
) -> PropensityModel:
    """Logistic regression by iteratively reweighted least squares with a
    small ridge term to keep separable corpora finite. Constant feature
    columns are dropped with a warning."""
    if fm.n < fm.k + 1:
        raise ValueError(f"need at least K+1={fm.k + 1} users, got {fm.n}")
    spans = fm.x.max(axis=0) - fm.x.min(axis=0)
    dropped = np.flatnonzero(spans == 0.0).tolist()
    if dropped:
        warnings.warn(f"dropping constant feature columns {dropped}", stacklevel=2)
    kept = np.flatnonzero(spans > 0.0)
    design = np.column_stack([np.ones(fm.n), fm.x[:, kept]])
    z = fm.z.astype(np.float64)
    beta = np.zeros(design.shape[1])
    ll = _log_likelihood(z, _sigmoid(design @ beta), beta, ridge)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(design @ beta)
        w = np.maximum(p * (1.0 - p), 1e-12)
        # One weighted-least-squares pass on the working response.
        wx = design * w[:, None]
        h = design.T @ wx + ridge * np.eye(design.shape[1])
        g = design.T @ (z - p) - ridge * beta
        beta = beta + np.linalg.solve(h, g)
        new_ll = _log_likelihood(z, _sigmoid(design @ beta), beta, ridge)
        if abs(new_ll - ll) < tol * (abs(ll) + 1e-12):
            converged = True
            ll = new_ll
            break
        ll = new_ll
    full = np.zeros(fm.k + 1)
    full[0] = beta[0]
    full[1 + kept] = beta[1:]
    return PropensityModel(full, it, converged, dropped)


def score(model: PropensityModel, x: np.ndarray) -> np.ndarray:
    """Inverse-logit scores in (0, 1); identical features score identically."""
    x = np.asarray(x, dtype=np.float64)
    eta = model.beta[0] + x @ model.beta[1:]
    return np.clip(_sigmoid(eta), 1e-15, 1.0 - 1e-15)


@dataclass
class ScoredCorpora:
    """Users sorted ascending by score (ties broken by device id)."""

    scores: np.ndarray
    exposed: np.ndarray
    responses: np.ndarray
    device_ids: np.ndarray
    order: np.ndarray  # original row index per sorted position

    @classmethod
    def from_scores(cls, scores, exposed, responses, device_ids) -> "ScoredCorpora":
        scores = np.asarray(scores, dtype=np.float64)
        order = np.lexsort((np.asarray(device_ids), scores))
        return cls(
            scores[order],
            np.asarray(exposed, dtype=np.int8)[order],
            np.asarray(responses, dtype=np.float64)[order],
            np.asarray(device_ids)[order],
            order.astype(np.int64),
        )


@dataclass
class MatchCluster:
    label: float
    exposed_rows: np.ndarray   # original row indices
    control_rows: np.ndarray
    control_weight: float


@dataclass
class MatchResult:
    clusters: list[MatchCluster]
    mode: str                   # "balanced" | "unbalanced"
    method: str                 # "sort" | "kmeans"
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def retained_rows(self) -> np.ndarray:
        if not self.clusters:
            return np.empty(0, dtype=np.int64)
        return np.sort(
            np.concatenate(
                [np.concatenate([c.exposed_rows, c.control_rows]) for c in self.clusters]
            )
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "method": self.method,
            "seed": self.seed,
            "params": self.params,
            "clusters": [
                {
                    "label": c.label,
                    "exposed": c.exposed_rows.tolist(),
                    "control": c.control_rows.tolist(),
                    "control_weight": c.control_weight,
                }
                for c in self.clusters
            ],
        }


def cluster_match(
    corpora: ScoredCorpora,
    balanced: bool = False,
    caliper: bool = False,
    caliper_width: float = DEFAULT_CALIPER,
    seed: int = 0,
    strict_pair: bool = False,
) -> MatchResult:
    """One linear sweep over the sorted corpora.

    A cluster is a run of equal scores, or, with caliper activation, a run
    staying within `caliper_width` of the cluster's opening score. Clusters
    missing a side are dropped (`strict_pair` restores the >1 variant).
    Balanced mode subsamples the larger side of each cluster to the smaller
    side's count; unbalanced keeps everyone with control weight TE/TC.
    """
    labels = _kernels.sweep_labels(
        np.ascontiguousarray(corpora.scores), caliper_width if caliper else -1.0
    )
    rng = np.random.default_rng(seed)
    min_side = 2 if strict_pair else 1
    clusters: list[MatchCluster] = []
    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [labels.shape[0]]])
    for s, e in zip(starts, ends):
        flags = corpora.exposed[s:e]
        rows = corpora.order[s:e]
        e_rows = rows[flags == 1]
        c_rows = rows[flags == 0]
        te, tc = e_rows.shape[0], c_rows.shape[0]
        if te < min_side or tc < min_side:
            continue
        if balanced:
            n_keep = min(te, tc)
            if te > n_keep:
                e_rows = e_rows[np.sort(rng.choice(te, n_keep, replace=False))]
            if tc > n_keep:
                c_rows = c_rows[np.sort(rng.choice(tc, n_keep, replace=False))]
            weight = 1.0
        else:
            weight = te / tc
        clusters.append(MatchCluster(float(corpora.scores[s]), e_rows, c_rows, weight))
    return MatchResult(
        clusters,
        "balanced" if balanced else "unbalanced",
        "sort",
        seed,
        {"caliper": caliper, "caliper_width": caliper_width if caliper else None,
         "strict_pair": strict_pair},
    )


def count_caliper_clusters(scores: np.ndarray, width: float) -> int:
    labels = _kernels.sweep_labels(np.ascontiguousarray(np.sort(scores)), width)
    return int(labels[-1]) + 1 if labels.shape[0] else 0


def adaptive_cluster_count(corpora: ScoredCorpora, width: float = DEFAULT_CALIPER) -> int:
    """Estimate a cluster count by widening the caliper until every cluster
    has both exposed and control members (or the width cap is reached)."""
    exposed = corpora.exposed.astype(np.int64)
    while True:
        labels = _kernels.sweep_labels(np.ascontiguousarray(corpora.scores), width)
        n_clusters = int(labels[-1]) + 1
        n_exposed = np.bincount(labels, weights=exposed, minlength=n_clusters)
        sizes = np.bincount(labels, minlength=n_clusters)
        degenerate = bool(((n_exposed == 0) | (n_exposed == sizes)).any())
        if not degenerate or width >= MAX_ADAPTIVE_CALIPER:
            return n_clusters
        width *= 2.0


def kmeans(
    x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Lloyd iteration; empty clusters are re-seeded from the point
    farthest from its centroid. Returns (labels, centers)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(n, size=k, replace=False)].copy()
    x_sq = (x**2).sum(axis=1)

    def assign(cs):
        # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2, one (n, k) matrix
        d2 = x_sq[:, None] - 2.0 * (x @ cs.T) + (cs**2).sum(axis=1)[None, :]
        lab = d2.argmin(axis=1)
        return lab, d2[np.arange(n), lab]

    for _ in range(max_iter):
        labels, nearest = assign(centers)
        new_centers = centers.copy()
        sizes = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        occupied = sizes > 0
        new_centers[occupied] = sums[occupied] / sizes[occupied, None]
        for c in np.flatnonzero(~occupied):
            far = int(np.argmax(nearest))
            new_centers[c] = x[far]
            nearest[far] = 0.0
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift < tol:
            break
    labels, _ = assign(centers)
    return labels.astype(np.int64), centers


def kmeans_match(
    fm: FeatureMatrix,
    responses: np.ndarray,
    k: int | str = "auto",
    balanced: bool = False,
    seed: int = 0,
    max_iter: int = 10,
) -> MatchResult:
    """Cluster on the feature space and feed the labels through the same
    sweep; k='auto' takes the adaptive-caliper cluster count of a propensity
    pass as the number of centroids."""
    if k == "auto":
        model = fit_propensity(fm, max_iter=max_iter)
        s = score(model, fm.x)
        corpora = ScoredCorpora.from_scores(s, fm.z, responses, fm.device_ids)
        k = max(1, adaptive_cluster_count(corpora))
    labels, _ = kmeans(fm.x, int(k), seed=seed)
    corpora = ScoredCorpora.from_scores(
        labels.astype(np.float64), fm.z, responses, fm.device_ids
    )
    result = cluster_match(corpora, balanced=balanced, caliper=False, seed=seed)
    result.method = "kmeans"
    result.params["k"] = int(k)
    return result


def matched_lift(
    result: MatchResult,
    responses: np.ndarray,
    total_visits: float | None = None,
    step_factor: float | None = None,
    post_exposure_days: float | None = None,
    bootstrap_b: int = 1000,
    exposed_flags: np.ndarray | None = None,
) -> LiftReport:
    """ATT lift over the retained clusters: per-cluster exposed mean minus
    weighted control mean, pooled with exposed-count weights. Diagnostics
    compare the retained response distributions against the full corpora."""
    if not result.clusters:
        raise ValueError("empty match result")
    responses = np.asarray(responses, dtype=np.float64)
    per_cluster = []
    diffs_all: list[np.ndarray] = []
    cluster_diffs: list[np.ndarray] = []
    te_total = 0
    pooled_lift = 0.0
    pooled_control = 0.0
    for c in result.clusters:
        r_e = responses[c.exposed_rows]
        r_c = responses[c.control_rows]
        c_mean = float(r_c.mean())
        cl_lift = float(r_e.mean()) - c_mean
        te = r_e.shape[0]
        per_cluster.append(
            {
                "label": c.label,
                "lift": cl_lift,
                "n_exposed": te,
                "n_control": int(r_c.shape[0]),
                "control_weight": c.control_weight,
            }
        )
        d = r_e - c_mean
        diffs_all.append(d)
        cluster_diffs.append(d)
        pooled_lift += te * cl_lift
        pooled_control += te * c_mean
        te_total += te
    lift = pooled_lift / te_total
    control_expectation = pooled_control / te_total
    lift_p, unstable = _relative_lift(lift, control_expectation)
    diffs = np.concatenate(diffs_all)
    boot = bootstrap_paired(diffs, bootstrap_b, result.seed) if bootstrap_b else None
    rate, lift_v = (None, None)
    if step_factor is not None and post_exposure_days is not None:
        rate, lift_v = _visit_normalized(lift, step_factor, post_exposure_days, total_visits)

    diagnostics = None
    if exposed_flags is not None:
        exposed_flags = np.asarray(exposed_flags).astype(bool)
        e_after = np.concatenate([responses[c.exposed_rows] for c in result.clusters])
        c_after = np.concatenate([responses[c.control_rows] for c in result.clusters])
        diagnostics = matched_quality_report(
            responses[exposed_flags],
            responses[~exposed_flags],
            e_after,
            c_after,
            cluster_diffs,
            diffs,
        )
    return LiftReport(
        lift=lift,
        lift_p=lift_p,
        lift_p_unstable=unstable,
        lift_v=lift_v,
        rate_estimate=rate,
        per_epoch=[],
        bootstrap=boot,
        diagnostics=diagnostics,
        metadata={
            "mode": f"matched-{result.mode}",
            "method": result.method,
            "n_clusters": len(result.clusters),
            "n_exposed_retained": int(te_total),
            "n_control_retained": int(sum(len(c.control_rows) for c in result.clusters)),
            "control_expectation": control_expectation,
            "per_cluster": per_cluster,
            "exposure_factor": step_factor,
            "total_visits": total_visits,
        },
    )


# --- features file -----------------------------------------------------------


def load_features_csv(path: str) -> FeatureMatrix:
    """Features CSV: header row, device_id, K feature columns, exposed flag."""
    device_ids: list[str] = []
    rows: list[list[float]] = []
    flags: list[int] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "device_id" or header[-1] != "exposed":
            raise ValueError(f"{path}: expected header device_id,<features...>,exposed")
        width = len(header)
        for line_no, row in enumerate(reader, 2):
            if len(row) != width:
                raise ValueError(f"{path}:{line_no}: expected {width} columns")
            device_ids.append(row[0])
            rows.append([float(v) for v in row[1:-1]])
            flags.append(int(row[-1]))
    return FeatureMatrix(np.array(rows), np.array(flags), np.array(device_ids))


def save_features_csv(path: str, fm: FeatureMatrix) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id"] + [f"f{i}" for i in range(fm.k)] + ["exposed"])
        for i in range(fm.n):
            writer.writerow(
                [str(fm.device_ids[i])]
                + [repr(float(v)) for v in fm.x[i]]
                + [int(fm.z[i])]
            )
