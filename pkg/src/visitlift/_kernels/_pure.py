"""Pure numpy/python fallback implementations of the hot kernels.

Signatures mirror the compiled extension exactly; see _speedups.pyx.
"""

from __future__ import annotations

import numpy as np

from ..geo import haversine_m


def sweep_labels(scores: np.ndarray, caliper: float) -> np.ndarray:
    """Label each entry of an ascending score array with a cluster id.

    caliper < 0: a cluster is a maximal run of exactly equal scores.
    caliper >= 0: a cluster is a maximal run whose scores stay within
    `caliper` of the cluster's opening score.
    """
    n = scores.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if caliper < 0.0:
        breaks = np.empty(n, dtype=bool)
        breaks[0] = True
        breaks[1:] = scores[1:] != scores[:-1]
        return np.cumsum(breaks, dtype=np.int64) - 1
    labels = np.empty(n, dtype=np.int64)
    anchor = scores[0]
    label = 0
    for idx in range(n):
        s = scores[idx]
        if s > anchor + caliper:
            label += 1
            anchor = s
        labels[idx] = label
    return labels


def nearest_site(
    q_lat: np.ndarray,
    q_lon: np.ndarray,
    group_start: np.ndarray,
    cand_start: np.ndarray,
    cand_sites: np.ndarray,
    site_lat: np.ndarray,
    site_lon: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest candidate site per query point.

    Queries are pre-sorted into groups (one group per occupied grid cell):
    group g covers queries [group_start[g], group_start[g+1]) and candidate
    site ids cand_sites[cand_start[g]:cand_start[g+1]]. Returns (site index
    or -1, distance in meters or +inf) per query.
    """
    nq = q_lat.shape[0]
    out_idx = np.full(nq, -1, dtype=np.int64)
    out_dist = np.full(nq, np.inf, dtype=np.float64)
    for g in range(group_start.shape[0] - 1):
        q0, q1 = group_start[g], group_start[g + 1]
        c0, c1 = cand_start[g], cand_start[g + 1]
        if q1 == q0 or c1 == c0:
            continue
        sites = cand_sites[c0:c1]
        d = haversine_m(
            q_lat[q0:q1, None], q_lon[q0:q1, None], site_lat[sites][None, :], site_lon[sites][None, :]
        )
        best = np.argmin(d, axis=1)
        rows = np.arange(q1 - q0)
        out_idx[q0:q1] = sites[best]
        out_dist[q0:q1] = d[rows, best]
    return out_idx, out_dist


def lump_windows(
    times: np.ndarray,
    weights: np.ndarray,
    dev_start: np.ndarray,
    delta_t: int,
    threshold: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy forward lumping of time-sorted hits into visits, per device.

    A window opens at the first unconsumed hit t0 and consumes every hit
    with t in [t0, t0 + delta_t); the window yields one visit iff the summed
    weights exceed `threshold`, with visit weight min(1, max single weight).
    Returns (device row, anchor time, weight) arrays.
    """
    out_dev: list[int] = []
    out_t: list[int] = []
    out_w: list[float] = []
    for dev in range(dev_start.shape[0] - 1):
        i = int(dev_start[dev])
        end = int(dev_start[dev + 1])
        while i < end:
            t0 = times[i]
            total = 0.0
            peak = 0.0
            j = i
            while j < end and times[j] - t0 < delta_t:
                w = weights[j]
                total += w
                if w > peak:
                    peak = w
                j += 1
            if total > threshold:
                out_dev.append(dev)
                out_t.append(int(t0))
                out_w.append(min(1.0, peak))
            i = j
    return (
        np.asarray(out_dev, dtype=np.int64),
        np.asarray(out_t, dtype=np.int64),
        np.asarray(out_w, dtype=np.float64),
    )
