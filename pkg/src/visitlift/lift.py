"""Response kernel and lift estimation: the quasi-Laplace weighted visit
acceleration, cohort expectations, general/balanced lift, per-epoch series,
and control first-seen imputation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quality import BootstrapSummary, QualityReport, summarize_bootstrap
from .visits import VisitSeries

# Day index distant enough that a device is never active inside any flight.
UNSEEN = np.int64(1) << 31

LIFT_P_EPSILON = 1e-9
FACTOR_EPSILON = 1e-9


@dataclass(frozen=True)
class WeightKernel:
    """Antisymmetric response weights w[-M..M-1]: w_k = exp(-k) for k >= 0
    and w_k = -exp(k+1) for k < 0, so w_k = -w_{-(1+k)} holds exactly."""

    m: int
    weights: np.ndarray  # index p holds w at tap k = p - m

    def tap(self, k: int) -> float:
        if not -self.m <= k < self.m:
            raise IndexError(f"tap {k} outside [-M, M-1]")
        return float(self.weights[k + self.m])


def make_kernel(m: int) -> WeightKernel:
    if m < 1:
        raise ValueError("kernel half-width M must be >= 1")
    pos = np.exp(-np.arange(m, dtype=np.float64))
    w = np.concatenate([-pos[::-1], pos])
    return WeightKernel(m, w)


@dataclass
class Cohort:
    """Per-device daily visit weights plus the activity fields.

    first_seen is the first ND impression day for exposed devices and the
    first impression day (or an imputed exposure day) for control; UNSEEN
    marks devices that never appeared.
    """

    counts: np.ndarray           # (N, T)
    first_seen: np.ndarray       # (N,)
    last_impression: np.ndarray  # (N,)
    device_ids: list[str] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        self.first_seen = np.asarray(self.first_seen, dtype=np.int64)
        self.last_impression = np.asarray(self.last_impression, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be (devices, days)")

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def t_days(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def from_series(cls, series: list[VisitSeries]) -> "Cohort":
        if not series:
            raise ValueError("empty cohort")
        t = series[0].counts.shape[0]
        counts = np.stack([s.counts for s in series])
        fs = np.array([UNSEEN if s.first_seen is None else s.first_seen for s in series])
        li = np.array(
            [-UNSEEN if s.last_impression is None else s.last_impression for s in series]
        )
        if any(s.counts.shape[0] != t for s in series):
            raise ValueError("mixed flight lengths")
        return cls(counts, fs, li, [s.device_id for s in series])


def response_matrix(cohort: Cohort, kernel: WeightKernel) -> tuple[np.ndarray, np.ndarray]:
    """Responses and activity for every device-epoch.

    The response is computed in antisymmetric pairs
    w_k * (V[j+k] - V[j-1-k]) so a constant in-window series cancels exactly;
    taps outside the flight read 0. A device is active at epoch j iff
    first_seen <= j and last_impression >= j - M.
    """
    n, t = cohort.counts.shape
    m = kernel.m
    padded = np.zeros((n, t + 2 * m))
    padded[:, m : m + t] = cohort.counts
    resp = np.zeros((n, t))
    for k in range(m):
        w = kernel.tap(k)
        plus = padded[:, m + k : m + k + t]
        minus = padded[:, m - 1 - k : m - 1 - k + t]
        resp += w * (plus - minus)
    epochs = np.arange(t)
    active = (cohort.first_seen[:, None] <= epochs[None, :]) & (
        cohort.last_impression[:, None] >= epochs[None, :] - m
    )
    return resp, active


def response(series: VisitSeries, epoch: int, kernel: WeightKernel) -> float | None:
    """Single device-epoch response; None when the device is inactive there."""
    t = series.counts.shape[0]
    if not 0 <= epoch < t:
        raise ValueError(f"epoch {epoch} outside the flight")
    fs = UNSEEN if series.first_seen is None else series.first_seen
    li = -UNSEEN if series.last_impression is None else series.last_impression
    if fs > epoch or li < epoch - kernel.m:
        return None
    acc = 0.0
    for k in range(kernel.m):
        plus = series.counts[epoch + k] if epoch + k < t else 0.0
        minus = series.counts[epoch - 1 - k] if epoch - 1 - k >= 0 else 0.0
        acc += kernel.tap(k) * (plus - minus)
    return acc


def per_epoch_means(resp: np.ndarray, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sums = (resp * active).sum(axis=0)
    counts = active.sum(axis=0)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return means, counts


def cohort_expectation(resp: np.ndarray, active: np.ndarray) -> float:
    """Mean over epochs of the per-epoch mean response across active devices
    (epochs with no active device contribute 0)."""
    if not active.any():
        raise ValueError("cohort has no active device-epoch")
    means, _ = per_epoch_means(resp, active)
    return float(means.mean())


def step_response_mass(kernel: WeightKernel, t_days: int, epoch: int, fts: int) -> float:
    """Response a unit sustained rate step at `fts` produces at `epoch`,
    honoring flight truncation: sum of w_k over taps j+k in [fts, T-1]."""
    acc = 0.0
    for k in range(-kernel.m, kernel.m):
        tap_day = epoch + k
        if fts <= tap_day <= t_days - 1 and tap_day >= 0:
            acc += kernel.tap(k)
    return acc


def exposure_factor(
    fts: np.ndarray, active: np.ndarray, kernel: WeightKernel
) -> float:
    """Average per-device-epoch response a unit rate step would generate for
    this cohort: the divisor that converts a lift into visits/device/day."""
    n, t = active.shape
    epochs = np.arange(t)
    rho = np.zeros((n, t))
    for k in range(-kernel.m, kernel.m):
        tap_day = epochs[None, :] + k
        valid = (tap_day >= 0) & (tap_day <= t - 1) & (tap_day >= fts[:, None])
        rho += kernel.tap(k) * valid
    means, _ = per_epoch_means(rho, active)
    return float(means.mean())


@dataclass
class LiftReport:
    lift: float
    lift_p: float | None
    lift_p_unstable: bool
    lift_v: float | None
    rate_estimate: float | None      # visits/device/day attributable to exposure
    per_epoch: list[dict]
    bootstrap: BootstrapSummary | None
    diagnostics: QualityReport | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lift": self.lift,
            "lift_p": self.lift_p,
            "lift_p_unstable": self.lift_p_unstable,
            "lift_v": self.lift_v,
            "rate_estimate": self.rate_estimate,
            "per_epoch": self.per_epoch,
            "bootstrap": None if self.bootstrap is None else vars(self.bootstrap),
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
            "metadata": self.metadata,
        }


def _relative_lift(lift: float, control_expectation: float) -> tuple[float | None, bool]:
    if abs(control_expectation) < LIFT_P_EPSILON:
        return None, True
    return 100.0 * lift / control_expectation, False


def _visit_normalized(
    lift: float,
    factor: float,
    post_days: float,
    total_visits: float | None,
) -> tuple[float | None, float | None]:
    """(rate_estimate, lift_v): divide by the kernel step-response factor to
    get visits/device/day, scale by post-exposure device-days, normalize by
    the corpus visit total."""
    if factor < FACTOR_EPSILON:
        return None, None
    rate = lift / factor
    if total_visits is None or total_visits <= 0.0:
        return rate, None
    return rate, 100.0 * rate * post_days / total_visits


def _bootstrap_general(
    resp_e, act_e, resp_c, act_c, point: float, b: int, seed: int, chunk: int = 128
) -> BootstrapSummary:
    """Device-level bootstrap of the general lift: resample devices with
    replacement within each cohort, recompute the two-level expectation."""
    rng = np.random.default_rng(seed)
    t = resp_e.shape[1]

    def stack(resp, act):
        return np.concatenate([resp * act, act], axis=1).astype(np.float64)

    mat_e = stack(resp_e, act_e)
    mat_c = stack(resp_c, act_c)
    out = np.empty(b)
    done = 0
    while done < b:
        size = min(chunk, b - done)
        le = _resample_expectation(rng, mat_e, t, size)
        lc = _resample_expectation(rng, mat_c, t, size)
        out[done : done + size] = le - lc
        done += size
    return summarize_bootstrap(point, out, b, seed)


def _resample_expectation(rng, mat: np.ndarray, t: int, size: int) -> np.ndarray:
    n = mat.shape[0]
    weights = np.empty((size, n), dtype=np.float64)
    for row in range(size):
        idx = rng.integers(0, n, n)
        weights[row] = np.bincount(idx, minlength=n)
    agg = weights @ mat  # (size, 2T): per-epoch response sums then counts
    sums, counts = agg[:, :t], agg[:, t:]
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return means.mean(axis=1)


def general_lift(
    exposed: Cohort,
    control: Cohort,
    kernel: WeightKernel,
    total_visits: float | None = None,
    bootstrap_b: int = 1000,
    seed: int = 0,
) -> LiftReport:
    """Unbalanced lift: difference of the exposed and control response
    expectations, with the percentage and visit-normalized presentations and
    a device-level bootstrap."""
    if exposed.n == 0 or control.n == 0:
        raise ValueError("both cohorts must be non-empty")
    resp_e, act_e = response_matrix(exposed, kernel)
    resp_c, act_c = response_matrix(control, kernel)
    e = cohort_expectation(resp_e, act_e)
    c = cohort_expectation(resp_c, act_c)
    lift = e - c
    lift_p, unstable = _relative_lift(lift, c)
    factor = exposure_factor(exposed.first_seen, act_e, kernel)
    t = exposed.t_days
    in_flight = exposed.first_seen < t
    post_days = float(np.clip(t - exposed.first_seen[in_flight], 0, None).sum())
    rate, lift_v = _visit_normalized(lift, factor, post_days, total_visits)

    means_e, n_e = per_epoch_means(resp_e, act_e)
    means_c, n_c = per_epoch_means(resp_c, act_c)
    per_epoch = [
        {
            "epoch": j,
            "lift": float(means_e[j] - means_c[j]),
            "mean_exposed": float(means_e[j]),
            "mean_control": float(means_c[j]),
            "n_exposed": int(n_e[j]),
            "n_control": int(n_c[j]),
        }
        for j in range(t)
    ]
    boot = (
        _bootstrap_general(resp_e, act_e, resp_c, act_c, lift, bootstrap_b, seed)
        if bootstrap_b
        else None
    )
    return LiftReport(
        lift=lift,
        lift_p=lift_p,
        lift_p_unstable=unstable,
        lift_v=lift_v,
        rate_estimate=rate,
        per_epoch=per_epoch,
        bootstrap=boot,
        metadata={
            "mode": "unbalanced",
            "expectation_exposed": e,
            "expectation_control": c,
            "kernel_m": kernel.m,
            "exposure_factor": factor,
            "post_exposure_device_days": post_days,
            "total_visits": total_visits,
            "lift_v_normalization": (
                "100 * (lift / exposure_factor) * post_exposure_device_days / total_visits"
            ),
        },
    )


def lift_timeseries(
    exposed: Cohort, control: Cohort, kernel: WeightKernel
) -> list[dict]:
    """Per-epoch exposed-minus-control mean response among active devices."""
    resp_e, act_e = response_matrix(exposed, kernel)
    resp_c, act_c = response_matrix(control, kernel)
    means_e, n_e = per_epoch_means(resp_e, act_e)
    means_c, n_c = per_epoch_means(resp_c, act_c)
    return [
        {
            "epoch": j,
            "lift": float(means_e[j] - means_c[j]),
            "n_exposed": int(n_e[j]),
            "n_control": int(n_c[j]),
        }
        for j in range(exposed.t_days)
    ]


def impute_control_fts(
    control_first: np.ndarray,
    control_last: np.ndarray,
    exposed_fts: np.ndarray,
    seed: int = 0,
) -> np.ndarray:
    """Draw a first-seen day for each control device from the exposed
    empirical distribution, conditioned on falling inside the device's
    active span; infeasible devices get UNSEEN (excluded)."""
    fts = np.asarray(exposed_fts, dtype=np.int64)
    fts = fts[fts < UNSEEN]
    if fts.size == 0:
        raise ValueError("exposed first-seen distribution is empty")
    pool = np.sort(fts)
    lo = np.searchsorted(pool, np.asarray(control_first, dtype=np.int64), side="left")
    hi = np.searchsorted(pool, np.asarray(control_last, dtype=np.int64), side="right")
    rng = np.random.default_rng(seed)
    span = hi - lo
    draw = lo + np.floor(rng.random(lo.shape[0]) * np.maximum(span, 1)).astype(np.int64)
    out = np.where(span > 0, pool[np.minimum(draw, pool.size - 1)], UNSEEN)
    return out.astype(np.int64)


def responses_at_fts(cohort: Cohort, fts: np.ndarray, kernel: WeightKernel) -> np.ndarray:
    """Each device's response evaluated once, at its (imputed) first-seen
    epoch; NaN where the device is inactive or unseen."""
    resp, act = response_matrix(cohort, kernel)
    n, t = resp.shape
    fts = np.asarray(fts, dtype=np.int64)
    out = np.full(n, np.nan)
    ok = (fts >= 0) & (fts < t)
    rows = np.arange(n)[ok]
    cols = fts[ok]
    valid = act[rows, cols]
    out[rows[valid]] = resp[rows[valid], cols[valid]]
    return out


def balanced_lift(
    exposed: Cohort,
    control: Cohort,
    control_fts: np.ndarray,
    kernel: WeightKernel,
    seed: int = 0,
    bootstrap_b: int = 1000,
    total_visits: float | None = None,
) -> LiftReport:
    """Balanced (first-time-seen) lift: every device contributes one response
    at its exposure day, control is subsampled to the exposed size, and the
    lift is the mean paired difference with a single variance."""
    r_e = responses_at_fts(exposed, exposed.first_seen, kernel)
    r_c = responses_at_fts(control, control_fts, kernel)
    e_vals = r_e[~np.isnan(r_e)]
    e_fts = exposed.first_seen[~np.isnan(r_e)]
    c_vals = r_c[~np.isnan(r_c)]
    if e_vals.size == 0 or c_vals.size == 0:
        raise ValueError("no evaluable device in one of the cohorts")
    if c_vals.size < e_vals.size:
        raise ValueError("control must be at least as large as exposed in balanced mode")
    rng = np.random.default_rng(seed)
    pick = rng.choice(c_vals.size, size=e_vals.size, replace=False)
    diffs = e_vals - c_vals[pick]
    lift = float(diffs.mean())
    c_mean = float(c_vals[pick].mean())
    lift_p, unstable = _relative_lift(lift, c_mean)
    t = exposed.t_days
    masses = np.array([step_response_mass(kernel, t, int(f), int(f)) for f in e_fts])
    factor = float(masses.mean())
    post_days = float(np.clip(t - e_fts, 0, None).sum())
    rate, lift_v = _visit_normalized(lift, factor, post_days, total_visits)
    boot = None
    if bootstrap_b:
        from .quality import bootstrap_paired

        boot = bootstrap_paired(diffs, bootstrap_b, seed)
    return LiftReport(
        lift=lift,
        lift_p=lift_p,
        lift_p_unstable=unstable,
        lift_v=lift_v,
        rate_estimate=rate,
        per_epoch=[],
        bootstrap=boot,
        metadata={
            "mode": "balanced",
            "n_pairs": int(e_vals.size),
            "pair_variance": float(diffs.var(ddof=1)) if diffs.size > 1 else 0.0,
            "kernel_m": kernel.m,
            "exposure_factor": factor,
            "subsample_seed": seed,
            "total_visits": total_visits,
            "lift_v_normalization": (
                "100 * (lift / exposure_factor) * post_exposure_device_days / total_visits"
            ),
        },
    )


def display_transform(values) -> np.ndarray:
    """Presentation scale for plots: linear inside [-1, 1], sign(v)*(1+log10|v|)
    beyond, so large lifts stay on the page."""
    v = np.asarray(values, dtype=np.float64)
    out = v.copy()
    big = np.abs(v) > 1.0
    out[big] = np.sign(v[big]) * (1.0 + np.log10(np.abs(v[big])))
    return out
