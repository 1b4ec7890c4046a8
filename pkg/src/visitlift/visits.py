"""Impressions to hits to visits: deterministic radius and parcel rules, a
stochastic survival-weighted band just outside the radius, hit lumping, and
per-day visit series."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.special import log_ndtr, ndtr

from . import _kernels
from .geo import (
    EARTH_RADIUS_M,
    CellIndex,
    ConfigurationError,
    GeoPoint,
    cell_diagonal_m,
    haversine_m,
)
from .graph import LocationGraph, _lon_side_floor_m

SECONDS_PER_DAY = 86_400


class Source(IntEnum):
    ND = 0     # won/delivered impressions
    LRTB = 1   # listening sample
    URTB = 2   # unwanted remainder


@dataclass(frozen=True)
class Impression:
    device_id: str
    t: int
    loc: GeoPoint | None
    source: Source


@dataclass(frozen=True)
class Hit:
    device_id: str
    t: int
    pid: str
    weight: float


@dataclass(frozen=True)
class Visit:
    t: int
    weight: float


# --- hit rules --------------------------------------------------------------


@dataclass(frozen=True)
class RadiusRule:
    """Binary hit: weight 1 iff the nearest campaign location is closer
    than `k_m` meters."""

    k_m: float

    def __post_init__(self):
        if not self.k_m > 0:
            raise ValueError("radius must be positive")

    @property
    def max_distance_m(self) -> float:
        return self.k_m


@dataclass(frozen=True)
class ParcelRule:
    """Binary hit: weight 1 iff the impression falls inside the parcel
    polygon (boundary counts as inside)."""

    polygon: tuple[GeoPoint, ...]

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if _self_intersects(self.polygon):
            raise ValueError("polygon must be simple (non-self-intersecting)")

    @property
    def max_distance_m(self) -> float:
        pts = self.polygon
        lat_c = sum(p.lat for p in pts) / len(pts)
        lon_c = sum(p.lon for p in pts) / len(pts)
        return max(float(haversine_m(lat_c, lon_c, p.lat, p.lon)) for p in pts) * 2.0


@dataclass(frozen=True)
class StochasticRule:
    """Certain hit up to `r_m`; survival-weighted inside (R, 1.5R] via a
    fitted inverse Gaussian and inside (1.5R, 3R] via a fitted log-normal;
    nothing beyond 3R. The junctions are not glued: the recorded jumps are
    the survival discontinuities at R and 1.5R."""

    r_m: float
    ig_mu: float
    ig_lam: float
    logn_mu: float
    logn_sigma: float
    jump_at_r: float = 0.0
    jump_at_band: float = 0.0

    def __post_init__(self):
        if not self.r_m > 0:
            raise ValueError("radius must be positive")

    @property
    def max_distance_m(self) -> float:
        return 3.0 * self.r_m


HitRule = RadiusRule | ParcelRule | StochasticRule


class FittingError(ValueError):
    """Raised when a stochastic rule cannot be fitted; callers fall back to
    a plain radius rule."""


def ig_survival(x, mu: float, lam: float):
    """1 - CDF of the inverse Gaussian IG(mu, lam) (vectorised)."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        s = np.sqrt(lam / x)
        a = ndtr(s * (x / mu - 1.0))
        # exp(2*lam/mu) * Phi(-s*(x/mu+1)) computed in log space to avoid overflow
        b = np.exp(2.0 * lam / mu + log_ndtr(-s * (x / mu + 1.0)))
    out = 1.0 - (a + b)
    return np.clip(out, 0.0, 1.0)


def lognormal_survival(x, mu_log: float, sigma_log: float):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = (np.log(x) - mu_log) / sigma_log
    return np.clip(1.0 - ndtr(z), 0.0, 1.0)


def fit_stochastic(distances, r_m: float) -> StochasticRule:
    """Fit the stochastic bands from observed hit distances (all <= 3R).

    The inverse Gaussian takes the sample mean and lam = mean^3/variance;
    the log-normal band is fitted by log-moment matching.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size < 30:
        raise FittingError(f"need at least 30 distance samples, got {d.size}")
    if d.min() < 0 or d.max() > 3.0 * r_m:
        raise FittingError("distance samples must lie in [0, 3R]")
    mu = float(d.mean())
    s2 = float(d.var(ddof=1))
    if s2 <= 0.0 or mu <= 0.0:
        raise FittingError("degenerate sample (zero variance or mean)")
    lam = mu**3 / s2
    pos = d[d > 0]
    if pos.size < 30:
        raise FittingError("need at least 30 positive distances for the log-normal band")
    logs = np.log(pos)
    logn_mu = float(logs.mean())
    logn_sigma = float(logs.std(ddof=1))
    if logn_sigma <= 0.0:
        raise FittingError("degenerate log-variance")
    band = 1.5 * r_m
    jump_r = 1.0 - float(ig_survival(r_m, mu, lam))
    jump_band = abs(float(ig_survival(band, mu, lam)) - float(lognormal_survival(band, logn_mu, logn_sigma)))
    return StochasticRule(r_m, mu, lam, logn_mu, logn_sigma, jump_r, jump_band)


def stochastic_weight(d, rule: StochasticRule):
    """Piecewise hit weight: 1 on [0, R], IG survival on (R, 1.5R],
    log-normal survival on (1.5R, 3R], 0 beyond."""
    d = np.asarray(d, dtype=np.float64)
    w = np.zeros_like(d)
    w = np.where(d <= rule.r_m, 1.0, w)
    mid = (d > rule.r_m) & (d <= 1.5 * rule.r_m)
    outer = (d > 1.5 * rule.r_m) & (d <= 3.0 * rule.r_m)
    if mid.any():
        w[mid] = ig_survival(d[mid], rule.ig_mu, rule.ig_lam)
    if outer.any():
        w[outer] = lognormal_survival(d[outer], rule.logn_mu, rule.logn_sigma)
    return w


# --- point in polygon -------------------------------------------------------


def _on_segment(px, py, ax, ay, bx, by, eps=1e-12) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if abs(cross) > eps:
        return False
    return min(ax, bx) - eps <= px <= max(ax, bx) + eps and min(ay, by) - eps <= py <= max(ay, by) + eps


def point_in_polygon(p: GeoPoint, polygon: tuple[GeoPoint, ...]) -> bool:
    """Ray casting in the lon/lat plane; points on an edge count as inside."""
    x, y = p.lon, p.lat
    n = len(polygon)
    inside = False
    for i in range(n):
        a = polygon[i]
        b = polygon[(i + 1) % n]
        if _on_segment(x, y, a.lon, a.lat, b.lon, b.lat):
            return True
        if (a.lat > y) != (b.lat > y):
            x_cross = a.lon + (y - a.lat) * (b.lon - a.lon) / (b.lat - a.lat)
            if x < x_cross:
                inside = not inside
    return inside


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-18 else (1 if v > 0 else -1)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4


def _self_intersects(polygon: tuple[GeoPoint, ...]) -> bool:
    pts = [(p.lon, p.lat) for p in polygon]
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share an endpoint
            if _segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                return True
    return False


# --- nearest-site index -----------------------------------------------------


def _encode_cells(i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return (i.astype(np.int64) << 32) ^ (j.astype(np.int64) & 0xFFFFFFFF)


class SiteIndex:
    """Flat cell-bucketed view of the graph's locations for bulk
    nearest-site queries through the hot kernel."""

    def __init__(self, graph: LocationGraph):
        self.graph = graph
        self.cfg = graph.cfg
        self.pids = sorted(graph.nodes)
        self.lat = np.array([graph.nodes[p].location.point.lat for p in self.pids])
        self.lon = np.array([graph.nodes[p].location.point.lon for p in self.pids])
        self.by_cell: dict[int, np.ndarray] = {}
        buckets: dict[int, list[int]] = {}
        for idx, pid in enumerate(self.pids):
            key = graph.cell_key(graph.nodes[pid].location.point)
            code = int(_encode_cells(np.int64(key[0]), np.int64(key[1])))
            buckets.setdefault(code, []).append(idx)
        self.by_cell = {code: np.asarray(ids, dtype=np.int64) for code, ids in buckets.items()}

    def check_search_radius(self, radius_m: float) -> None:
        """The 9-cell window only sees sites within one cell in each axis."""
        lat_side = self.cfg.delta_lat * math.pi * EARTH_RADIUS_M / 180.0
        for pid in self.pids:
            key = self.graph.cell_key(self.graph.nodes[pid].location.point)
            cap = min(
                cell_diagonal_m(CellIndex(*key), self.cfg) / 2.0,
                lat_side,
                _lon_side_floor_m(key, self.cfg),
            )
            if radius_m > cap:
                raise ConfigurationError(
                    f"hit search radius {radius_m:.1f} m exceeds the safe cap "
                    f"{cap:.1f} m for this grid; use larger grid deltas"
                )

    def _window_codes(self, code: int) -> list[int]:
        i = code >> 32
        j = code & 0xFFFFFFFF
        if j >= 1 << 31:
            j -= 1 << 32
        center = CellIndex(i, j)
        cells = [center]
        cells.extend(_neighbor_cells_wrapped(center, self.cfg))
        return [int(_encode_cells(np.int64(c.i), np.int64(c.j))) for c in cells]

    def nearest(self, q_lat: np.ndarray, q_lon: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest site per query point within its 9-cell window.

        Returns (site index or -1, distance in meters or inf).
        """
        from .geo import cell_indices

        nq = q_lat.shape[0]
        if nq == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        qi, qj = cell_indices(q_lat, q_lon, self.cfg)
        codes = _encode_cells(qi, qj)
        order = np.argsort(codes, kind="stable")
        uniq, starts = np.unique(codes[order], return_index=True)
        group_start = np.append(starts, nq).astype(np.int64)
        cand_chunks: list[np.ndarray] = []
        cand_start = np.zeros(uniq.shape[0] + 1, dtype=np.int64)
        for g, code in enumerate(uniq):
            sites: list[np.ndarray] = []
            for wcode in self._window_codes(int(code)):
                hit = self.by_cell.get(wcode)
                if hit is not None:
                    sites.append(hit)
            chunk = (
                np.concatenate(sites) if sites else np.empty(0, dtype=np.int64)
            )
            cand_chunks.append(chunk)
            cand_start[g + 1] = cand_start[g] + chunk.shape[0]
        cand_sites = (
            np.concatenate(cand_chunks) if cand_chunks else np.empty(0, dtype=np.int64)
        )
        idx_sorted, dist_sorted = _kernels.nearest_site(
            np.ascontiguousarray(q_lat[order], dtype=np.float64),
            np.ascontiguousarray(q_lon[order], dtype=np.float64),
            group_start,
            cand_start,
            cand_sites,
            self.lat,
            self.lon,
        )
        idx = np.empty(nq, dtype=np.int64)
        dist = np.empty(nq, dtype=np.float64)
        idx[order] = idx_sorted
        dist[order] = dist_sorted
        return idx, dist


def _neighbor_cells_wrapped(c: CellIndex, cfg):
    from .geo import neighbor_cells, wrap_cell

    return [wrap_cell(nb, cfg) for nb in neighbor_cells(c)]


# --- hit detection ----------------------------------------------------------


def hit_weights(dist: np.ndarray, rule: HitRule) -> np.ndarray:
    """Distance-based weight for Radius/Stochastic rules (0 where no hit)."""
    if isinstance(rule, RadiusRule):
        return np.where(dist < rule.k_m, 1.0, 0.0)
    if isinstance(rule, StochasticRule):
        return stochastic_weight(dist, rule)
    raise TypeError("parcel rules are containment-based; use detect_hit")


def detect_hit(imp: Impression, graph: LocationGraph, rule: HitRule) -> Hit | None:
    """Single-impression hit check via the impression's 9-cell window."""
    if imp.loc is None:
        return None
    best_pid, best_d = None, np.inf
    for pid in graph.candidates_near(imp.loc):
        node = graph.nodes[pid]
        d = float(
            haversine_m(imp.loc.lat, imp.loc.lon, node.location.point.lat, node.location.point.lon)
        )
        if d < best_d:
            best_pid, best_d = pid, d
    if isinstance(rule, ParcelRule):
        if point_in_polygon(imp.loc, rule.polygon):
            return Hit(imp.device_id, imp.t, best_pid if best_pid else "parcel", 1.0)
        return None
    if best_pid is None:
        return None
    w = float(hit_weights(np.array([best_d]), rule)[0])
    if w <= 0.0:
        return None
    return Hit(imp.device_id, imp.t, best_pid, w)


def detect_hits_bulk(
    index: SiteIndex,
    dev: np.ndarray,
    t: np.ndarray,
    lat: np.ndarray,
    lon: np.ndarray,
    rule: RadiusRule | StochasticRule,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised hit detection for located impressions.

    Returns (device row, time, site index, weight) for impressions whose
    weight is positive.
    """
    index.check_search_radius(rule.max_distance_m)
    site, dist = index.nearest(lat, lon)
    w = np.zeros(dev.shape[0])
    found = site >= 0
    w[found] = hit_weights(dist[found], rule)
    keep = w > 0.0
    return dev[keep], t[keep], site[keep], w[keep]


# --- lumping and series -----------------------------------------------------


def lump_visits(hits: list[Hit], delta_t: int, threshold: float) -> list[Visit]:
    """Collapse time-sorted hits of one device into visits.

    Greedy forward windows of `delta_t` seconds anchored at the first
    unconsumed hit; a window yields a visit iff the summed weights exceed
    `threshold`, and the visit weight is min(1, max single-hit weight), so a
    cloud of low-probability hits cannot fabricate a certain visit.
    """
    if delta_t <= 0 or delta_t > SECONDS_PER_DAY:
        raise ValueError("delta_t must be in (0, 86400] seconds")
    times = np.array([h.t for h in hits], dtype=np.int64)
    if times.size and np.any(np.diff(times) < 0):
        raise ValueError("hits must be time-sorted")
    weights = np.array([h.weight for h in hits], dtype=np.float64)
    dev_start = np.array([0, times.size], dtype=np.int64)
    _, vt, vw = _kernels.lump_windows(times, weights, dev_start, delta_t, threshold)
    return [Visit(int(tt), float(ww)) for tt, ww in zip(vt, vw)]


def lump_visits_bulk(
    dev: np.ndarray,
    t: np.ndarray,
    w: np.ndarray,
    n_devices: int,
    delta_t: int,
    threshold: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lump hits for all devices at once; returns (device, time, weight)."""
    order = np.lexsort((t, dev))
    dev_s, t_s, w_s = dev[order], t[order], w[order]
    counts = np.bincount(dev_s, minlength=n_devices)
    dev_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return _kernels.lump_windows(
        np.ascontiguousarray(t_s),
        np.ascontiguousarray(w_s, dtype=np.float64),
        dev_start,
        delta_t,
        threshold,
    )


@dataclass
class VisitSeries:
    """Daily visit weights for one device over the flight, plus the fields
    the response computation needs to decide activity."""

    device_id: str
    start_epoch: int
    counts: np.ndarray
    first_seen: int | None = None
    last_impression: int | None = None
    dropped: int = 0


def day_index(t: np.ndarray | int, flight_start_epoch: int):
    return np.floor_divide(np.asarray(t) - flight_start_epoch, SECONDS_PER_DAY)


def daily_series(
    visits: list[Visit],
    flight_start_epoch: int,
    t_days: int,
    device_id: str = "",
    first_seen: int | None = None,
    last_impression: int | None = None,
) -> VisitSeries:
    """Per-day sums of visit weights inside the flight; out-of-flight visits
    are dropped and counted."""
    if t_days < 1:
        raise ValueError("flight must span at least one day")
    counts = np.zeros(t_days)
    dropped = 0
    for v in visits:
        d = int(day_index(v.t, flight_start_epoch))
        if 0 <= d < t_days:
            counts[d] += v.weight
        else:
            dropped += 1
    return VisitSeries(device_id, flight_start_epoch, counts, first_seen, last_impression, dropped)


def daily_matrix(
    dev: np.ndarray,
    t: np.ndarray,
    w: np.ndarray,
    n_devices: int,
    flight_start_epoch: int,
    t_days: int,
) -> tuple[np.ndarray, int]:
    """Bulk version of daily_series: (n_devices, t_days) weight matrix and
    the count of dropped out-of-flight visits."""
    days = day_index(t, flight_start_epoch)
    keep = (days >= 0) & (days < t_days)
    counts = np.zeros((n_devices, t_days))
    np.add.at(counts, (dev[keep], days[keep].astype(np.int64)), w[keep])
    return counts, int((~keep).sum())
