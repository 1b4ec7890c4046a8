"""Per-device keyword profiles: prior reconciliation, impression-derived
features, and the retention-smoothed profile update."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geo import GeoPoint, haversine_m
from .graph import LocationGraph

CLEAR = "clear"


@dataclass
class UserProfile:
    """Keyword probabilities for one device plus the prior bookkeeping
    needed to give assertions priority over foot-traffic evidence."""

    device_id: str
    keywords: np.ndarray
    rho: np.ndarray
    last_step: int = 0
    pins: dict[int, float] = field(default_factory=dict)
    pin_steps: dict[int, int] = field(default_factory=dict)
    cleared_groups: dict[int, int] = field(default_factory=dict)

    @classmethod
    def new(cls, device_id: str, k: int, rho: float | np.ndarray = 0.5) -> "UserProfile":
        rho_arr = np.full(k, rho, dtype=np.float64) if np.isscalar(rho) else np.asarray(rho)
        if rho_arr.min() < 0.0 or rho_arr.max() >= 1.0:
            raise ValueError("rho entries must be in [0, 1)")
        return cls(device_id, np.zeros(k), rho_arr)

    def copy(self) -> "UserProfile":
        return UserProfile(
            self.device_id,
            self.keywords.copy(),
            self.rho,
            self.last_step,
            dict(self.pins),
            dict(self.pin_steps),
            dict(self.cleared_groups),
        )


@dataclass
class PriorRecord:
    """Voluntary assertions observed at a step: keyword -> value or "clear"."""

    device_id: str
    step: int
    assertions: dict[int, float | str]


@dataclass
class ImpressionFeatureBundle:
    """f: average keywords near the device's sampled impressions;
    g: visit-weighted average keywords of the locations it visited."""

    f: np.ndarray
    g: np.ndarray


def _group_of(kw: int, exclusive_groups) -> int | None:
    for gi, group in enumerate(exclusive_groups):
        if kw in group:
            return gi
    return None


def reconcile_priors(
    profile: UserProfile,
    prior: PriorRecord,
    exclusive_groups: tuple[tuple[int, ...], ...] = (),
) -> UserProfile:
    """Fold a prior record into the profile.

    A consistent assertion overwrites the keyword and pins it. An assertion
    conflicting with an earlier pin inside an exclusive group (e.g. the other
    gender) clears the whole group to unset: the new claim is *not* trusted
    either, and the group stays cleared for records at or before the clearing
    step, so re-applying the same record is a no-op.
    """
    out = profile.copy()
    for kw in sorted(prior.assertions):
        val = prior.assertions[kw]
        if val == CLEAR:
            out.pins.pop(kw, None)
            out.pin_steps.pop(kw, None)
            out.keywords[kw] = 0.0
            continue
        val = float(val)
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"prior value {val} outside [0, 1]")
        gi = _group_of(kw, exclusive_groups)
        if gi is not None:
            cleared_at = out.cleared_groups.get(gi)
            if cleared_at is not None and prior.step <= cleared_at:
                continue  # group cleared by a conflict; wait for newer evidence
            conflict = any(
                other != kw and other in out.pins and out.pin_steps[other] < prior.step
                for other in exclusive_groups[gi]
            )
            if conflict:
                for other in exclusive_groups[gi]:
                    out.pins.pop(other, None)
                    out.pin_steps.pop(other, None)
                    out.keywords[other] = 0.0
                out.cleared_groups[gi] = prior.step
                continue
            out.cleared_groups.pop(gi, None)
            # Asserting one member of an exclusive group zeroes its peers.
            for other in exclusive_groups[gi]:
                if other != kw:
                    out.keywords[other] = 0.0
        out.pins[kw] = val
        out.pin_steps[kw] = prior.step
        out.keywords[kw] = val
    return out


def derive_features(
    impressions: list[tuple[GeoPoint | None, float]] | list[GeoPoint | None],
    graph: LocationGraph,
    combined: dict[str, np.ndarray],
    visit_radius_m: float,
    gamma_f: float,
    gamma_g: float,
) -> ImpressionFeatureBundle:
    """Feature bundle for one device over a step window.

    Each impression with a location contributes the keywords of its nearest
    graph location to `f`; impressions within `visit_radius_m` of that
    location additionally count as visits, and `g` is the visit-count
    weighted keyword average. A device with no located impressions gets a
    zero bundle.
    """
    k = graph.k
    f_acc = np.zeros(k)
    f_n = 0
    g_acc = np.zeros(k)
    g_n = 0.0
    for item in impressions:
        point = item[0] if isinstance(item, tuple) else item
        if point is None:
            continue
        best_pid, best_d = None, np.inf
        for pid in graph.candidates_near(point):
            node = graph.nodes[pid]
            d = float(haversine_m(point.lat, point.lon, node.location.point.lat, node.location.point.lon))
            if d < best_d:
                best_pid, best_d = pid, d
        if best_pid is None:
            continue
        kw = combined[best_pid]
        f_acc += kw
        f_n += 1
        if best_d < visit_radius_m:
            g_acc += kw
            g_n += 1.0
    f = f_acc / f_n if f_n else np.zeros(k)
    g = g_acc / g_n if g_n else np.zeros(k)
    return ImpressionFeatureBundle(f=f, g=g)


def mix_bundle(bundle: ImpressionFeatureBundle, gamma_f: float, gamma_g: float) -> np.ndarray:
    """x = gamma_f * f + gamma_g * g, clamped into [0, 1]."""
    return np.clip(gamma_f * bundle.f + gamma_g * bundle.g, 0.0, 1.0)


def update_profile(
    profile: UserProfile,
    prior: PriorRecord | None,
    bundle: ImpressionFeatureBundle,
    gamma_f: float = 0.5,
    gamma_g: float = 0.5,
    exclusive_groups: tuple[tuple[int, ...], ...] = (),
) -> UserProfile:
    """Retention-smoothed profile update: pinned keywords keep their asserted
    value; everything else moves toward the impression-feature mix."""
    reconciled = (
        reconcile_priors(profile, prior, exclusive_groups) if prior is not None else profile.copy()
    )
    x = mix_bundle(bundle, gamma_f, gamma_g)
    kw = reconciled.rho * reconciled.keywords + (1.0 - reconciled.rho) * x
    for pinned, val in reconciled.pins.items():
        kw[pinned] = val
    kw = np.clip(kw, 0.0, 1.0)
    for group in exclusive_groups:
        idx = list(group)
        total = kw[idx].sum()
        if total > 1.0:
            kw[idx] /= total
            for pinned, val in reconciled.pins.items():
                if pinned in group:
                    kw[pinned] = val
    reconciled.keywords = kw
    reconciled.last_step += 1
    return reconciled


# --- file formats ----------------------------------------------------------


def load_priors_jsonl(path: str) -> list[PriorRecord]:
    """Read prior records from JSON Lines: {device_id, step, assertions}."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                assertions = {
                    int(kw): (CLEAR if val == CLEAR else float(val))
                    for kw, val in rec["assertions"].items()
                }
                out.append(PriorRecord(str(rec["device_id"]), int(rec["step"]), assertions))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad prior record: {exc}") from exc
    return out


def save_profiles_jsonl(profiles: list[UserProfile], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in sorted(profiles, key=lambda q: q.device_id):
            fh.write(
                json.dumps(
                    {"device_id": p.device_id, "keywords": [round(float(v), 12) for v in p.keywords]},
                    sort_keys=True,
                )
                + "\n"
            )
