"""Cell-keyed location graph with distance edges and three-channel keyword
propagation (neighbor smoothing, visit-weighted smoothing, visitor keywords).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geo import (
    EARTH_RADIUS_M,
    CellIndex,
    ConfigurationError,
    GeoPoint,
    GridConfig,
    cell_corner,
    cell_diagonal_m,
    cell_of,
    haversine_m,
    neighbor_cells,
    wrap_cell,
)

GRAPH_FORMAT_VERSION = 1
DEFAULT_KEYWORDS = 25


def as_keyword_vector(values, k: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (k,):
        raise ValueError(f"keyword vector must have length {k}, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("keyword values must be probabilities in [0, 1]")
    return arr


@dataclass(frozen=True)
class Location:
    """A point of interest; `prior` maps keyword index -> asserted probability."""

    pid: str
    point: GeoPoint
    prior: dict[int, float] | None = None
    is_prior_node: bool = False


@dataclass
class KeywordState:
    """Per-location keyword rows: n (neighbors), v (visit-weighted),
    u (visitor keywords), all length-K, plus the propagation step counter."""

    n: np.ndarray
    v: np.ndarray
    u: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, k: int) -> "KeywordState":
        return cls(np.zeros(k), np.zeros(k), np.zeros(k), 0)

    def copy(self) -> "KeywordState":
        return KeywordState(self.n.copy(), self.v.copy(), self.u.copy(), self.step)


@dataclass(frozen=True)
class SmoothingParams:
    """Per-keyword smoothing factors in [0, 1) and profile-side mix weights.

    `legacy_neighbor_norm` restores the D/N normalisation variant of the
    neighbor update; the default divides by the summed inverse distances so
    that a constant neighborhood is a fixed point.
    """

    lam: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    gamma_f: float = 0.5
    gamma_g: float = 0.5
    exclusive_groups: tuple[tuple[int, ...], ...] = ()
    legacy_neighbor_norm: bool = False

    @classmethod
    def uniform(
        cls,
        k: int,
        lam: float = 0.5,
        mu: float = 0.5,
        nu: float = 0.5,
        **kwargs,
    ) -> "SmoothingParams":
        for name, val in (("lam", lam), ("mu", mu), ("nu", nu)):
            if not 0.0 <= val < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {val}")
        return cls(np.full(k, lam), np.full(k, mu), np.full(k, nu), **kwargs)


@dataclass
class Node:
    location: Location
    state: KeywordState
    edges: list[tuple[str, float]] = field(default_factory=list)


class LocationGraph:
    """Locations bucketed by grid cell, with symmetric distance edges shorter
    than `edge_threshold` (which therefore never leave a 9-cell window)."""

    def __init__(self, cfg: GridConfig, edge_threshold: float, k: int = DEFAULT_KEYWORDS):
        self.cfg = cfg
        self.edge_threshold = float(edge_threshold)
        self.k = int(k)
        self.nodes: dict[str, Node] = {}
        self.cells: dict[tuple[int, int], list[str]] = {}
        self.step = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def cell_key(self, point: GeoPoint) -> tuple[int, int]:
        c = wrap_cell(cell_of(point, self.cfg), self.cfg)
        return (c.i, c.j)

    def window_pids(self, key: tuple[int, int]) -> list[str]:
        """All pids in the cell `key` and its 8 (wrapped) neighbors."""
        out = list(self.cells.get(key, ()))
        for nb in neighbor_cells(CellIndex(*key)):
            nb = wrap_cell(nb, self.cfg)
            out.extend(self.cells.get((nb.i, nb.j), ()))
        return out

    def candidates_near(self, point: GeoPoint) -> list[str]:
        return self.window_pids(self.cell_key(point))

    def edge_set(self) -> set[tuple[str, str, float]]:
        """Undirected edge set with pids ordered lexicographically."""
        out = set()
        for pid, node in self.nodes.items():
            for other, d in node.edges:
                a, b = (pid, other) if pid < other else (other, pid)
                out.add((a, b, round(d, 9)))
        return out

    def copy(self) -> "LocationGraph":
        g = LocationGraph(self.cfg, self.edge_threshold, self.k)
        g.step = self.step
        g.cells = {key: list(pids) for key, pids in self.cells.items()}
        g.nodes = {
            pid: Node(node.location, node.state.copy(), list(node.edges))
            for pid, node in self.nodes.items()
        }
        return g


def _lon_side_floor_m(key: tuple[int, int], cfg: GridConfig) -> float:
    """Shortest east-west extent of the cell or its row neighbors."""
    lat0, _ = cell_corner(CellIndex(*key), cfg)
    phi = min(90.0, max(abs(lat0), abs(lat0 + cfg.delta_lat)) + cfg.delta_lat)
    half = math.radians(cfg.delta_lon) / 2.0
    return 2.0 * EARTH_RADIUS_M * math.cos(math.radians(phi)) * math.sin(half)


def _check_threshold(g: LocationGraph) -> None:
    # Neighbors beyond one cell in either axis would escape the 9-cell
    # window, so the threshold is capped by the cell geometry.
    lat_side = g.cfg.delta_lat * math.pi * EARTH_RADIUS_M / 180.0
    for key in g.cells:
        diag = cell_diagonal_m(CellIndex(*key), g.cfg)
        cap = min(diag / 2.0, lat_side, _lon_side_floor_m(key, g.cfg))
        if g.edge_threshold > cap:
            raise ConfigurationError(
                f"edge threshold {g.edge_threshold:.1f} m exceeds the safe cap "
                f"{cap:.1f} m for cell {key}; use larger grid deltas"
            )


def _initial_state(loc: Location, k: int) -> KeywordState:
    state = KeywordState.zeros(k)
    if loc.prior:
        for kw, val in loc.prior.items():
            if not 0 <= kw < k:
                raise ValueError(f"prior keyword index {kw} outside [0, {k})")
            for row in (state.n, state.v, state.u):
                row[kw] = val
    return state


def _link_window(g: LocationGraph, pid: str) -> None:
    """(Re)compute edges of `pid` against its 9-cell window, symmetrically."""
    node = g.nodes[pid]
    p = node.location.point
    cand = [c for c in g.candidates_near(p) if c != pid]
    if not cand:
        return
    lats = np.array([g.nodes[c].location.point.lat for c in cand])
    lons = np.array([g.nodes[c].location.point.lon for c in cand])
    d = haversine_m(p.lat, p.lon, lats, lons)
    for other, dist in zip(cand, d):
        if dist < g.edge_threshold:
            node.edges.append((other, float(dist)))
            g.nodes[other].edges.append((pid, float(dist)))


def build_graph(
    locations: list[Location],
    cfg: GridConfig,
    edge_threshold: float,
    k: int = DEFAULT_KEYWORDS,
) -> LocationGraph:
    """Bucket locations into cells and connect every pair closer than
    `edge_threshold` meters. Raises on duplicate pids or an unsafe threshold."""
    g = LocationGraph(cfg, edge_threshold, k)
    for loc in locations:
        if loc.pid in g.nodes:
            raise ValueError(f"duplicate pid {loc.pid!r}")
        g.nodes[loc.pid] = Node(loc, _initial_state(loc, k))
        g.cells.setdefault(g.cell_key(loc.point), []).append(loc.pid)
    _check_threshold(g)

    # One pass per cell against its window; each edge is found from both
    # endpoints, so only the (pid < other) half is materialised here.
    for key, pids in g.cells.items():
        cand = g.window_pids(key)
        cand_lat = np.array([g.nodes[c].location.point.lat for c in cand])
        cand_lon = np.array([g.nodes[c].location.point.lon for c in cand])
        for pid in pids:
            p = g.nodes[pid].location.point
            d = haversine_m(p.lat, p.lon, cand_lat, cand_lon)
            for other, dist in zip(cand, d):
                if other > pid and dist < edge_threshold:
                    g.nodes[pid].edges.append((other, float(dist)))
                    g.nodes[other].edges.append((pid, float(dist)))
    return g


def update_graph(
    g: LocationGraph, adds: list[Location], deletes: list[str]
) -> LocationGraph:
    """Apply node additions/deletions; edges change only inside the affected
    9-cell windows and surviving nodes keep their keyword state."""
    out = g.copy()
    for pid in deletes:
        if pid not in out.nodes:
            raise KeyError(f"unknown pid {pid!r} on delete")
    add_pids = {loc.pid for loc in adds}
    if len(add_pids) != len(adds):
        raise ValueError("duplicate pid among adds")
    for pid in add_pids:
        if pid in out.nodes and pid not in deletes:
            raise ValueError(f"pid {pid!r} already present")

    for pid in deletes:
        node = out.nodes.pop(pid)
        key = out.cell_key(node.location.point)
        out.cells[key].remove(pid)
        if not out.cells[key]:
            del out.cells[key]
        for other, _ in node.edges:
            if other in out.nodes:
                out.nodes[other].edges = [
                    e for e in out.nodes[other].edges if e[0] != pid
                ]
    for loc in adds:
        out.nodes[loc.pid] = Node(loc, _initial_state(loc, out.k))
        out.cells.setdefault(out.cell_key(loc.point), []).append(loc.pid)
        _link_window(out, loc.pid)
    _check_threshold(out)
    return out


def normalize_keywords(
    state: KeywordState, exclusive_groups: tuple[tuple[int, ...], ...] = ()
) -> KeywordState:
    """Clamp rows into [0, 1] and rescale mutually-exclusive keyword groups
    (e.g. a gender pair) so each group sums to at most 1."""
    rows = [np.clip(state.n, 0.0, 1.0), np.clip(state.v, 0.0, 1.0), np.clip(state.u, 0.0, 1.0)]
    for group in exclusive_groups:
        idx = list(group)
        for row in rows:
            total = row[idx].sum()
            if total > 1.0:
                row[idx] /= total
    return KeywordState(rows[0], rows[1], rows[2], state.step)


def combine(g: LocationGraph) -> dict[str, np.ndarray]:
    """Published per-location keywords: the average of the n/v/u rows over
    the rows that are non-zero at each keyword (extra channels enrich
    coverage without diluting values)."""
    out: dict[str, np.ndarray] = {}
    for pid, node in g.nodes.items():
        rows = np.stack([node.state.n, node.state.v, node.state.u])
        nonzero = rows != 0.0
        counts = nonzero.sum(axis=0)
        total = np.where(nonzero, rows, 0.0).sum(axis=0)
        out[pid] = np.where(counts > 0, total / np.maximum(counts, 1), 0.0)
    return out


def _pin_priors(node: Node, state: KeywordState) -> None:
    if node.location.prior:
        for kw, val in node.location.prior.items():
            state.n[kw] = val
            state.v[kw] = val
            state.u[kw] = val


def propagate_step(
    g: LocationGraph,
    visits_by_location: dict[str, float] | None,
    visitor_kw: dict[str, np.ndarray] | None,
    params: SmoothingParams,
) -> LocationGraph:
    """One synchronous smoothing step: every node reads only step s-1 state
    of its direct neighbors and writes step s. Prior-asserted entries are
    left untouched (beyond normalization)."""
    visits_by_location = visits_by_location or {}
    visitor_kw = visitor_kw or {}
    out = g.copy()
    out.step = g.step + 1
    one = 1.0

    for pid, node in g.nodes.items():
        st = node.state
        neighbors = node.edges
        n_count = len(neighbors)
        visits_here = float(visits_by_location.get(pid, 0.0))
        upsilon = visits_here + sum(
            float(visits_by_location.get(other, 0.0)) for other, _ in neighbors
        )

        # Channel 1: distance-weighted neighbor average under exponential
        # smoothing. An isolated node keeps its audience description.
        if n_count == 0:
            new_n = st.n.copy()
        else:
            weighted = np.zeros(g.k)
            d_norm = 0.0
            for other, dist in neighbors:
                w = one / (one + dist)
                weighted += g.nodes[other].state.n * w
                d_norm += w
            if params.legacy_neighbor_norm:
                mixed = (d_norm / n_count) * weighted
            else:
                mixed = weighted / d_norm
            new_n = params.lam * st.n + (1.0 - params.lam) * mixed

        # Channel 2: visit-count weighting; heavily visited neighbors
        # dominate the surrounding audience.
        if upsilon <= 0.0:
            new_v = st.v.copy()
        else:
            new_v = (visits_here / upsilon) * (params.mu * st.v)
            if n_count > 0:
                acc = np.zeros(g.k)
                for other, _ in neighbors:
                    acc += float(visits_by_location.get(other, 0.0)) * g.nodes[other].state.v
                new_v = new_v + (1.0 - params.mu) / n_count * (acc / upsilon)

        # Channel 3: visitor-provided keyword distributions rippled to the
        # neighborhood, weighted by each location's visit count.
        if upsilon <= 0.0:
            new_u = st.u.copy()
        else:
            acc = visits_here * visitor_kw.get(pid, np.zeros(g.k))
            for other, _ in neighbors:
                acc = acc + float(visits_by_location.get(other, 0.0)) * visitor_kw.get(
                    other, np.zeros(g.k)
                )
            new_u = params.nu * st.u + (1.0 - params.nu) / (upsilon * (n_count + 1)) * acc

        new_state = KeywordState(new_n, new_v, new_u, st.step + 1)
        _pin_priors(node, new_state)
        out.nodes[pid].state = new_state
    return out


def iterate(
    g: LocationGraph,
    steps: int,
    params: SmoothingParams,
    visits_per_step: list[dict[str, float]] | None = None,
    visitor_kw_per_step: list[dict[str, np.ndarray]] | None = None,
) -> LocationGraph:
    """Run `steps` propagation+normalization rounds; step s inputs come from
    the s-th entry of the per-step lists (missing entries mean no visits)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cur = g
    for s in range(steps):
        visits = visits_per_step[s] if visits_per_step else None
        vkw = visitor_kw_per_step[s] if visitor_kw_per_step else None
        cur = propagate_step(cur, visits, vkw, params)
        for pid, node in cur.nodes.items():
            node.state = normalize_keywords(node.state, params.exclusive_groups)
            _pin_priors(node, node.state)
    return cur


# --- serialization ---------------------------------------------------------


def load_locations_jsonl(path: str, k: int = DEFAULT_KEYWORDS) -> list[Location]:
    """Read locations from JSON Lines: {pid, lat, lon, prior?, prior_node?}."""
    out: list[Location] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                prior = rec.get("prior")
                if prior is not None:
                    prior = {int(kw): float(val) for kw, val in prior.items()}
                out.append(
                    Location(
                        pid=str(rec["pid"]),
                        point=GeoPoint(float(rec["lat"]), float(rec["lon"])),
                        prior=prior,
                        is_prior_node=bool(rec.get("prior_node", False)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad location record: {exc}") from exc
    return out


def graph_to_dict(g: LocationGraph) -> dict:
    nodes = []
    for pid in sorted(g.nodes):
        node = g.nodes[pid]
        loc = node.location
        nodes.append(
            {
                "pid": pid,
                "lat": loc.point.lat,
                "lon": loc.point.lon,
                "prior": {str(kw): val for kw, val in sorted(loc.prior.items())}
                if loc.prior
                else None,
                "prior_node": loc.is_prior_node,
                "state": {
                    "n": node.state.n.tolist(),
                    "v": node.state.v.tolist(),
                    "u": node.state.u.tolist(),
                    "step": node.state.step,
                },
                "edges": sorted((other, d) for other, d in node.edges),
            }
        )
    return {
        "version": GRAPH_FORMAT_VERSION,
        "grid": {
            "delta_lat": g.cfg.delta_lat,
            "delta_lon": g.cfg.delta_lon,
            "origin_lat": g.cfg.origin.lat,
            "origin_lon": g.cfg.origin.lon,
        },
        "edge_threshold": g.edge_threshold,
        "k": g.k,
        "step": g.step,
        "nodes": nodes,
    }


def save_graph(g: LocationGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_graph(path: str) -> LocationGraph:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("version") != GRAPH_FORMAT_VERSION:
        raise ValueError(f"unsupported graph format version {data.get('version')!r}")
    grid = data["grid"]
    cfg = GridConfig(
        grid["delta_lat"], grid["delta_lon"], GeoPoint(grid["origin_lat"], grid["origin_lon"])
    )
    g = LocationGraph(cfg, data["edge_threshold"], data["k"])
    g.step = data["step"]
    for rec in data["nodes"]:
        prior = rec.get("prior")
        if prior is not None:
            prior = {int(kw): float(val) for kw, val in prior.items()}
        loc = Location(rec["pid"], GeoPoint(rec["lat"], rec["lon"]), prior, rec["prior_node"])
        state = KeywordState(
            np.array(rec["state"]["n"], dtype=np.float64),
            np.array(rec["state"]["v"], dtype=np.float64),
            np.array(rec["state"]["u"], dtype=np.float64),
            rec["state"]["step"],
        )
        g.nodes[loc.pid] = Node(loc, state, [(other, float(d)) for other, d in rec["edges"]])
        g.cells.setdefault(g.cell_key(loc.point), []).append(loc.pid)
    return g
