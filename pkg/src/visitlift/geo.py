"""Geographic primitives: great-circle distance, rectangular cell partition,
and the 8-cell neighborhood used by every spatial lookup in the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Fixed so that distance oracles are bit-reproducible across runs/machines.
EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEG_LAT = math.pi * EARTH_RADIUS_M / 180.0


class ConfigurationError(ValueError):
    """Raised when grid/threshold parameters are mutually inconsistent."""


@dataclass(frozen=True)
class GeoPoint:
    """A latitude/longitude pair in degrees, with an optional altitude.

    Altitude is carried but ignored by distance computations.
    """

    lat: float
    lon: float
    alt: float | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinates ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class GridConfig:
    """Rectangular cell partition: cell (i, j) spans
    [origin.lat + i*delta_lat, ...+delta_lat) x [origin.lon + j*delta_lon, ...+delta_lon).
    """

    delta_lat: float
    delta_lon: float
    origin: GeoPoint = GeoPoint(-90.0, -180.0)

    def __post_init__(self) -> None:
        if not (self.delta_lat > 0.0 and self.delta_lon > 0.0):
            raise ConfigurationError("grid deltas must be strictly positive")

    @property
    def lon_cells(self) -> int | None:
        """Number of longitude columns when delta_lon divides 360, else None.

        When defined, column indices wrap modulo this width so neighborhoods
        are correct across the +/-180 meridian. Latitude never wraps (poles
        clamp; campaign geographies do not reach them).
        """
        ratio = 360.0 / self.delta_lon
        n = round(ratio)
        if n > 0 and abs(ratio - n) < 1e-9:
            return n
        return None


@dataclass(frozen=True, order=True)
class CellIndex:
    i: int
    j: int


# Counter-clockwise, starting from the lower-left diagonal neighbor.
_NEIGHBOR_OFFSETS = (
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters. Accepts scalars or numpy arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def distance(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance between two points, in meters (altitude ignored)."""
    return float(haversine_m(a.lat, a.lon, b.lat, b.lon))


def manhattan_distance(a: GeoPoint, b: GeoPoint) -> float:
    """L1 variant: sum of the north-south and east-west great-circle legs."""
    ns = abs(a.lat - b.lat) * METERS_PER_DEG_LAT
    mean_lat = math.radians((a.lat + b.lat) / 2.0)
    dlon = abs(a.lon - b.lon)
    if dlon > 180.0:
        dlon = 360.0 - dlon
    ew = dlon * METERS_PER_DEG_LAT * math.cos(mean_lat)
    return ns + ew


DISTANCE_FUNCTIONS = {"haversine": distance, "manhattan": manhattan_distance}


def cell_indices(lats, lons, cfg: GridConfig):
    """Vectorised cell index computation; returns (i, j) integer arrays."""
    i = np.floor((np.asarray(lats, dtype=np.float64) - cfg.origin.lat) / cfg.delta_lat)
    rel = np.asarray(lons, dtype=np.float64) - cfg.origin.lon
    n = cfg.lon_cells
    if n is not None:
        rel = np.mod(rel, 360.0)
        j = np.mod(np.floor(rel / cfg.delta_lon), n)
    else:
        j = np.floor(rel / cfg.delta_lon)
    # Points exactly at the north pole fall past the last row; clamp them in.
    top = math.floor((90.0 - cfg.origin.lat) / cfg.delta_lat)
    i = np.minimum(i, top - 1) if top >= 1 else i
    return i.astype(np.int64), j.astype(np.int64)


def cell_of(p: GeoPoint, cfg: GridConfig) -> CellIndex:
    """Map a point to the unique half-open cell containing it."""
    i, j = cell_indices(p.lat, p.lon, cfg)
    return CellIndex(int(i), int(j))


def neighbor_cells(c: CellIndex) -> tuple[CellIndex, ...]:
    """The 8 surrounding cells, counter-clockwise, excluding c itself."""
    return tuple(CellIndex(c.i + di, c.j + dj) for di, dj in _NEIGHBOR_OFFSETS)


def wrap_cell(c: CellIndex, cfg: GridConfig) -> CellIndex:
    """Canonicalise a raw index: longitude wraps modulo the grid width."""
    n = cfg.lon_cells
    if n is None:
        return c
    return CellIndex(c.i, c.j % n)


def cell_corner(c: CellIndex, cfg: GridConfig) -> tuple[float, float]:
    return (cfg.origin.lat + c.i * cfg.delta_lat, cfg.origin.lon + c.j * cfg.delta_lon)


def cell_diagonal_m(c: CellIndex, cfg: GridConfig) -> float:
    """Corner-to-opposite-corner distance of a cell: the max separation of
    any two points inside it."""
    lat0, lon0 = cell_corner(c, cfg)
    lat1 = min(lat0 + cfg.delta_lat, 90.0)
    lon1 = lon0 + cfg.delta_lon
    # Compare both horizontal edges: the one closer to the pole is shorter,
    # so the true diagonal runs along the wider edge.
    d_low = float(haversine_m(lat0, lon0, lat1, lon1))
    d_high = float(haversine_m(lat1, lon0, lat0, lon1))
    return max(d_low, d_high)
