"""Synthetic campaign generator: devices with long-tailed visit rates,
campaign locations, impression streams (ND/LRTB/URTB), deliberate targeting
bias toward heavy visitors, and a known injected lift, all reproducible from
one seed and with ground truth recorded for oracle checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geo import METERS_PER_DEG_LAT, GeoPoint
from .graph import Location
from .matching import FeatureMatrix

# Divisible by 86400 so epoch day boundaries land on day indices exactly.
DEFAULT_FLIGHT_START = 19675 * 86400  # 2023-11-14T00:00:00Z


@dataclass(frozen=True)
class ScenarioSpec:
    """Knobs of a synthetic campaign; injected_lift multiplies the visit rate
    of exposed devices from their exposure day on (1 = null campaign)."""

    n_devices: int
    n_locations: int
    flight_days: int
    base_visit_rate: float
    exposure_fraction: float
    targeting_bias: float = 0.0
    injected_lift: float = 1.0
    impression_rate: float = 1.0
    source_mix: tuple[float, float, float] = (0.2, 0.2, 0.6)  # ND, LRTB, URTB
    seed: int = 0
    n_keywords: int = 25
    rate_sigma: float = 0.75
    visit_radius_m: float = 50.0
    jitter_sigma_m: float = 15.0
    no_geo_fraction: float = 0.1
    bbox: tuple[float, float, float, float] = (40.4, 41.0, -74.3, -73.7)
    flight_start_epoch: int = DEFAULT_FLIGHT_START

    def validate(self) -> None:
        if self.n_devices < 1 or self.flight_days < 1:
            raise ValueError("need at least one device and one flight day")
        if self.n_locations < 1 and self.base_visit_rate > 0:
            raise ValueError("visits require at least one location")
        for name in ("base_visit_rate", "impression_rate", "injected_lift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("exposure_fraction", "no_geo_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 < self.exposure_fraction < 1.0:
            raise ValueError("exposure_fraction must be strictly inside (0, 1)")
        if abs(sum(self.source_mix) - 1.0) > 1e-9 or min(self.source_mix) < 0:
            raise ValueError("source_mix must be non-negative and sum to 1")
        if self.n_keywords < 1:
            raise ValueError("need at least one keyword feature")


@dataclass
class ImpressionArrays:
    """Column-oriented impression stream, sorted by (device, time)."""

    dev: np.ndarray      # device row index
    t: np.ndarray        # epoch seconds
    lat: np.ndarray      # NaN when the impression has no location
    lon: np.ndarray
    source: np.ndarray   # Source enum values
    exposed: np.ndarray  # campaign-exposure flag of the owning device

    def __len__(self) -> int:
        return self.dev.shape[0]


@dataclass
class GroundTruth:
    injected_lift: float
    exposed: np.ndarray
    fts: np.ndarray              # exposure day for exposed, -1 otherwise
    rates: np.ndarray
    base_visits: int
    extra_visits: int
    extra_visit_fraction: float
    expected_exposed: float

    def to_dict(self) -> dict:
        return {
            "injected_lift": self.injected_lift,
            "n_exposed": int(self.exposed.sum()),
            "expected_exposed": self.expected_exposed,
            "base_visits": self.base_visits,
            "extra_visits": self.extra_visits,
            "extra_visit_fraction": self.extra_visit_fraction,
            "fts_histogram": np.bincount(
                self.fts[self.fts >= 0], minlength=1
            ).tolist(),
        }


@dataclass
class SynthCampaign:
    spec: ScenarioSpec
    locations: list[Location]
    impressions: ImpressionArrays
    device_ids: list[str]
    features: FeatureMatrix
    truth: GroundTruth
    visit_counts: np.ndarray = field(repr=False, default=None)  # (N, T) generated visits

    def write(self, out_dir: str) -> dict[str, str]:
        """Emit the pipeline input files; returns {artifact: path}."""
        import os

        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "locations": os.path.join(out_dir, "locations.jsonl"),
            "impressions": os.path.join(out_dir, "impressions.csv"),
            "features": os.path.join(out_dir, "features.csv"),
            "ground_truth": os.path.join(out_dir, "ground_truth.json"),
        }
        with open(paths["locations"], "w", encoding="utf-8") as fh:
            for loc in self.locations:
                fh.write(
                    json.dumps(
                        {"pid": loc.pid, "lat": round(loc.point.lat, 7), "lon": round(loc.point.lon, 7)},
                        sort_keys=True,
                    )
                    + "\n"
                )
        imp = self.impressions
        with open(paths["impressions"], "w", encoding="utf-8") as fh:
            fh.write("device_id,t,lat,lon,source,exposed_campaign\n")
            lines = []
            for i in range(len(imp)):
                if np.isnan(imp.lat[i]):
                    geo = ","
                else:
                    geo = f"{imp.lat[i]:.7f},{imp.lon[i]:.7f}"
                lines.append(
                    f"{self.device_ids[imp.dev[i]]},{imp.t[i]},{geo},{int(imp.source[i])},{int(imp.exposed[i])}"
                )
            fh.write("\n".join(lines))
            if lines:
                fh.write("\n")
        from .matching import save_features_csv

        save_features_csv(paths["features"], self.features)
        with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
            json.dump(self.truth.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        return paths


def _meters_to_deg(lat: np.ndarray, dy_m: np.ndarray, dx_m: np.ndarray):
    dlat = dy_m / METERS_PER_DEG_LAT
    dlon = dx_m / (METERS_PER_DEG_LAT * np.cos(np.radians(lat)))
    return dlat, dlon


def _draw_sources(rng, exposed_post: np.ndarray, mix: tuple[float, float, float]) -> np.ndarray:
    """ND only becomes available once a device is exposed (from its exposure
    day on); before that and for control the ND share re-normalizes away."""
    nd, lrtb, urtb = mix
    cum_full = np.cumsum([nd, lrtb, urtb])
    denom = max(lrtb + urtb, 1e-12)
    cum_pre = np.cumsum([0.0, lrtb / denom, urtb / denom])
    cum = np.where(exposed_post[:, None], cum_full[None, :], cum_pre[None, :])
    u = rng.random(exposed_post.shape[0])
    return (u[:, None] > cum).sum(axis=1).astype(np.int8)


def generate(spec: ScenarioSpec) -> SynthCampaign:
    """Deterministically realize a campaign from its spec.

    Visits are Poisson per device-day with a log-normal per-device rate (the
    fat-tail regime); the injected lift enters as an independently counted
    extra Poisson stream (or a thinning for lifts below 1), so the ground
    truth extra-visit count is exact. Exposure probability is
    sigmoid(logit(exposure_fraction) + bias * standardized visit propensity),
    so targeting is deliberately not ignorable when the bias is nonzero.
    """
    spec.validate()
    seeds = np.random.SeedSequence(spec.seed).spawn(6)
    rng_loc, rng_dev, rng_exp, rng_vis, rng_imp, rng_src = (
        np.random.default_rng(s) for s in seeds
    )
    n, t_days = spec.n_devices, spec.flight_days
    lat_lo, lat_hi, lon_lo, lon_hi = spec.bbox

    locations = [
        Location(
            f"L{i:05d}",
            GeoPoint(
                float(rng_loc.uniform(lat_lo, lat_hi)), float(rng_loc.uniform(lon_lo, lon_hi))
            ),
        )
        for i in range(max(spec.n_locations, 1))
    ]
    loc_lat = np.array([l.point.lat for l in locations])
    loc_lon = np.array([l.point.lon for l in locations])

    home = rng_dev.integers(0, len(locations), n)
    z_rate = rng_dev.normal(0.0, 1.0, n)
    rates = spec.base_visit_rate * np.exp(
        spec.rate_sigma * z_rate - 0.5 * spec.rate_sigma**2
    )

    # Feature 0 is the visit propensity (rate rank); the rest is noise.
    propensity = np.argsort(np.argsort(rates)) / max(n - 1, 1)
    features = rng_dev.uniform(0.0, 1.0, (n, spec.n_keywords))
    features[:, 0] = propensity

    logit_base = np.log(spec.exposure_fraction / (1.0 - spec.exposure_fraction))
    zscore = (propensity - 0.5) / np.sqrt(1.0 / 12.0)
    p_exposed = 1.0 / (1.0 + np.exp(-(logit_base + spec.targeting_bias * zscore)))
    exposed = rng_exp.random(n) < p_exposed
    fts = np.full(n, -1, dtype=np.int64)
    fts[exposed] = rng_exp.integers(0, t_days, int(exposed.sum()))

    # Visit counts: base stream plus an exactly-counted lift stream.
    base = rng_vis.poisson(rates[:, None], (n, t_days))
    days = np.arange(t_days)
    post = exposed[:, None] & (days[None, :] >= fts[:, None])
    if spec.injected_lift >= 1.0:
        extra_rate = rates[:, None] * (spec.injected_lift - 1.0)
        extra = np.where(post, rng_vis.poisson(extra_rate, (n, t_days)), 0)
        total = base + extra
        extra_count = int(extra.sum())
    else:
        removed = np.where(post, rng_vis.binomial(base, 1.0 - spec.injected_lift), 0)
        total = base - removed
        extra_count = -int(removed.sum())
    base_count = int(base.sum())
    total_count = int(total.sum())
    extra_fraction = extra_count / total_count if total_count else 0.0

    # Visit events -> one located impression each, jittered around home.
    v_dev_day = np.nonzero(total)
    v_counts = total[v_dev_day]
    v_dev = np.repeat(v_dev_day[0], v_counts)
    v_day = np.repeat(v_dev_day[1], v_counts)
    n_visits = v_dev.shape[0]
    v_t = (
        spec.flight_start_epoch
        + v_day * 86400
        + rng_imp.integers(0, 86400, n_visits)
    )
    jitter = rng_imp.normal(0.0, spec.jitter_sigma_m, (n_visits, 2))
    v_lat0 = loc_lat[home[v_dev]]
    dlat, dlon = _meters_to_deg(v_lat0, jitter[:, 0], jitter[:, 1])
    v_lat = v_lat0 + dlat
    v_lon = loc_lon[home[v_dev]] + dlon

    # Background impressions: uniform over the box, some without geo.
    bg = rng_imp.poisson(spec.impression_rate, (n, t_days))
    b_dev_day = np.nonzero(bg)
    b_counts = bg[b_dev_day]
    b_dev = np.repeat(b_dev_day[0], b_counts)
    b_day = np.repeat(b_dev_day[1], b_counts)
    n_bg = b_dev.shape[0]
    b_t = spec.flight_start_epoch + b_day * 86400 + rng_imp.integers(0, 86400, n_bg)
    b_lat = rng_imp.uniform(lat_lo, lat_hi, n_bg)
    b_lon = rng_imp.uniform(lon_lo, lon_hi, n_bg)
    no_geo = rng_imp.random(n_bg) < spec.no_geo_fraction
    b_lat[no_geo] = np.nan
    b_lon[no_geo] = np.nan

    # One guaranteed ND impression on each exposed device's exposure day.
    e_rows = np.flatnonzero(exposed)
    g_dev = e_rows
    g_t = spec.flight_start_epoch + fts[e_rows] * 86400 + rng_imp.integers(0, 86400, e_rows.shape[0])

    dev = np.concatenate([v_dev, b_dev, g_dev])
    t = np.concatenate([v_t, b_t, g_t])
    lat = np.concatenate([v_lat, b_lat, np.full(g_dev.shape[0], np.nan)])
    lon = np.concatenate([v_lon, b_lon, np.full(g_dev.shape[0], np.nan)])

    day = (t - spec.flight_start_epoch) // 86400
    exposed_post = exposed[dev] & (day >= fts[dev])
    source = _draw_sources(rng_src, exposed_post, spec.source_mix)
    source[n_visits + n_bg :] = 0  # the guaranteed impressions are ND

    # ND leaking before a control device's span is impossible by construction;
    # make exposed devices' pre-exposure stream ND-free as well.
    pre = ~exposed_post
    source[pre & (source == 0)] = 1

    order = np.lexsort((t, dev))
    impressions = ImpressionArrays(
        dev[order].astype(np.int64),
        t[order].astype(np.int64),
        lat[order],
        lon[order],
        source[order],
        exposed[dev[order]],
    )

    device_ids = [f"d{i:06d}" for i in range(n)]
    fm = FeatureMatrix(np.clip(features, 0.0, 1.0), exposed.astype(np.int8), np.array(device_ids))
    truth = GroundTruth(
        injected_lift=spec.injected_lift,
        exposed=exposed,
        fts=fts,
        rates=rates,
        base_visits=base_count,
        extra_visits=extra_count,
        extra_visit_fraction=extra_fraction,
        expected_exposed=float(p_exposed.sum()),
    )
    return SynthCampaign(spec, locations, impressions, device_ids, fm, truth, total)
