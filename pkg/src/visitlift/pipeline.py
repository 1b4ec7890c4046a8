"""Batch composition of the measurement stages: impressions -> activity ->
hits -> visits -> cohorts -> lift reports. The CLI wraps these functions with
file I/O; calling them directly reproduces every reported number."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lift import (
    UNSEEN,
    Cohort,
    LiftReport,
    WeightKernel,
    balanced_lift,
    general_lift,
    impute_control_fts,
    responses_at_fts,
    step_response_mass,
)
from .matching import (
    FeatureMatrix,
    ScoredCorpora,
    cluster_match,
    fit_propensity,
    kmeans_match,
    matched_lift,
    score,
)
from .synth import ImpressionArrays
from .visits import HitRule, SiteIndex, daily_matrix, detect_hits_bulk, lump_visits_bulk


@dataclass
class DeviceTable:
    device_ids: list[str]
    exposed: np.ndarray          # bool
    first_seen: np.ndarray       # first ND day (exposed) / first day (control)
    last_impression: np.ndarray
    active_days: np.ndarray      # distinct days with any impression

    @property
    def n(self) -> int:
        return self.exposed.shape[0]


def compute_activity(
    imp: ImpressionArrays,
    n_devices: int,
    exposed: np.ndarray,
    flight_start_epoch: int,
) -> DeviceTable:
    """First-seen and last-impression day per device. Exposed devices are
    first seen at their first delivered (ND) impression; control devices at
    their first impression of any kind."""
    day = (imp.t - flight_start_epoch) // 86400
    big = np.int64(UNSEEN)
    first_any = np.full(n_devices, big)
    last_any = np.full(n_devices, -big)
    np.minimum.at(first_any, imp.dev, day)
    np.maximum.at(last_any, imp.dev, day)
    first_nd = np.full(n_devices, big)
    nd = imp.source == 0
    np.minimum.at(first_nd, imp.dev[nd], day[nd])
    exposed = np.asarray(exposed, dtype=bool)
    first_seen = np.where(exposed, first_nd, first_any)
    first_seen = np.where(first_seen >= big, UNSEEN, first_seen)
    last = np.where(last_any <= -big, -UNSEEN, last_any)
    # distinct (device, day) pairs; days are offset to stay non-negative
    pair_codes = imp.dev * np.int64(1 << 20) + (day + np.int64(1 << 19))
    active_days = np.zeros(n_devices, dtype=np.int64)
    uniq = np.unique(pair_codes)
    np.add.at(active_days, (uniq >> np.int64(20)).astype(np.int64), 1)
    return DeviceTable(
        device_ids=[],
        exposed=exposed,
        first_seen=first_seen.astype(np.int64),
        last_impression=last.astype(np.int64),
        active_days=active_days,
    )


def visits_from_impressions(
    imp: ImpressionArrays,
    index: SiteIndex,
    rule: HitRule,
    n_devices: int,
    flight_start_epoch: int,
    t_days: int,
    lump_window_s: int = 3600,
    lump_threshold: float = 0.0,
) -> tuple[np.ndarray, dict]:
    """Hits -> lumped visits -> per-device daily matrix.

    Returns the (n_devices, t_days) visit-weight matrix and stage counters.
    """
    has_loc = ~np.isnan(imp.lat)
    hd, ht, hs, hw = detect_hits_bulk(
        index, imp.dev[has_loc], imp.t[has_loc], imp.lat[has_loc], imp.lon[has_loc], rule
    )
    vd, vt, vw = lump_visits_bulk(hd, ht, hw, n_devices, lump_window_s, lump_threshold)
    counts, dropped = daily_matrix(vd, vt, vw, n_devices, flight_start_epoch, t_days)
    stats = {
        "impressions": int(len(imp)),
        "located_impressions": int(has_loc.sum()),
        "hits": int(hd.shape[0]),
        "visits": int(vd.shape[0]),
        "visit_weight": float(vw.sum()),
        "dropped_out_of_flight": dropped,
    }
    return counts, stats


def split_cohorts(
    counts: np.ndarray, table: DeviceTable
) -> tuple[Cohort, Cohort, np.ndarray, np.ndarray]:
    """(exposed cohort, control cohort, exposed rows, control rows)."""
    e_rows = np.flatnonzero(table.exposed)
    c_rows = np.flatnonzero(~table.exposed)
    if e_rows.size == 0 or c_rows.size == 0:
        raise ValueError("need both an exposed and a control cohort")
    e = Cohort(counts[e_rows], table.first_seen[e_rows], table.last_impression[e_rows])
    c = Cohort(counts[c_rows], table.first_seen[c_rows], table.last_impression[c_rows])
    return e, c, e_rows, c_rows


def fts_for_control(
    control: Cohort, exposed: Cohort, seed: int
) -> np.ndarray:
    return impute_control_fts(
        control.first_seen, control.last_impression, exposed.first_seen, seed
    )


@dataclass
class MatchInputs:
    """Per-user rows aligned across features, FTS responses and flags,
    restricted to devices evaluable at their (imputed) first-seen epoch."""

    fm: FeatureMatrix
    responses: np.ndarray
    rows: np.ndarray          # original device rows
    fts: np.ndarray
    exposed: np.ndarray


def build_match_inputs(
    fm_all: FeatureMatrix,
    counts: np.ndarray,
    table: DeviceTable,
    kernel: WeightKernel,
    seed: int,
) -> MatchInputs:
    """Evaluate every device once at its (imputed) first-seen epoch and keep
    the evaluable ones as the matching corpus."""
    exposed, control, e_rows, c_rows = split_cohorts(counts, table)
    c_fts = fts_for_control(control, exposed, seed)
    r_e = responses_at_fts(exposed, exposed.first_seen, kernel)
    r_c = responses_at_fts(control, c_fts, kernel)
    rows = np.concatenate([e_rows, c_rows])
    resp = np.concatenate([r_e, r_c])
    fts = np.concatenate([exposed.first_seen, c_fts])
    ok = ~np.isnan(resp)
    rows, resp, fts = rows[ok], resp[ok], fts[ok]
    fm = FeatureMatrix(
        fm_all.x[rows], table.exposed[rows].astype(np.int8), fm_all.device_ids[rows]
    )
    return MatchInputs(fm, resp, rows, fts.astype(np.int64), table.exposed[rows])


def matched_report(
    inputs: MatchInputs,
    kernel: WeightKernel,
    t_days: int,
    method: str = "sort",
    balanced: bool = False,
    caliper: bool = True,
    caliper_width: float = 1e-3,
    k: int | str = "auto",
    seed: int = 0,
    total_visits: float | None = None,
    bootstrap_b: int = 1000,
    max_iter: int = 10,
) -> tuple[LiftReport, dict]:
    """Propensity (or k-means) matching plus the ATT lift on FTS responses."""
    if method == "sort":
        model = fit_propensity(inputs.fm, max_iter=max_iter)
        scores = score(model, inputs.fm.x)
        corpora = ScoredCorpora.from_scores(
            scores, inputs.fm.z, inputs.responses, inputs.fm.device_ids
        )
        result = cluster_match(
            corpora, balanced=balanced, caliper=caliper, caliper_width=caliper_width, seed=seed
        )
    elif method == "kmeans":
        result = kmeans_match(
            inputs.fm, inputs.responses, k=k, balanced=balanced, seed=seed, max_iter=max_iter
        )
    else:
        raise ValueError(f"unknown matching method {method!r}")
    if not result.clusters:
        raise ValueError("matching produced no usable cluster")
    # responses live in corpus order; map cluster rows back through it
    retained = result.retained_rows
    retained_exposed = retained[inputs.exposed[retained]]
    masses = np.array(
        [
            step_response_mass(kernel, t_days, int(f), int(f))
            for f in inputs.fts[retained_exposed]
        ]
    )
    step_factor = float(masses.mean()) if masses.size else None
    post_days = float(np.clip(t_days - inputs.fts[retained_exposed], 0, None).sum())
    report = matched_lift(
        result,
        inputs.responses,
        total_visits=total_visits,
        step_factor=step_factor,
        post_exposure_days=post_days,
        bootstrap_b=bootstrap_b,
        exposed_flags=inputs.exposed,
    )
    return report, result.to_dict()


def run_general(
    counts: np.ndarray,
    table: DeviceTable,
    kernel: WeightKernel,
    bootstrap_b: int = 1000,
    seed: int = 0,
) -> LiftReport:
    exposed, control, _, _ = split_cohorts(counts, table)
    return general_lift(
        exposed,
        control,
        kernel,
        total_visits=float(counts.sum()),
        bootstrap_b=bootstrap_b,
        seed=seed,
    )


def run_balanced(
    counts: np.ndarray,
    table: DeviceTable,
    kernel: WeightKernel,
    bootstrap_b: int = 1000,
    seed: int = 0,
) -> LiftReport:
    exposed, control, _, _ = split_cohorts(counts, table)
    c_fts = fts_for_control(control, exposed, seed)
    return balanced_lift(
        exposed,
        control,
        c_fts,
        kernel,
        seed=seed,
        bootstrap_b=bootstrap_b,
        total_visits=float(counts.sum()),
    )
