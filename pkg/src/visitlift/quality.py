"""Diagnostics scoring a matching/lift run: entropy constancy, variance-ratio
sampling confidence, Normal/Laplace ATT confidence, a chi-square cluster
statistic, skewness, and bootstrap confidence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2


@dataclass
class ResponseDistribution:
    """Empirical distribution over the distinct response values."""

    values: np.ndarray
    probs: np.ndarray
    count: int
    mean: float
    variance: float

    @classmethod
    def from_samples(cls, samples) -> "ResponseDistribution":
        arr = np.asarray(samples, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("empty response sample")
        values, counts = np.unique(arr, return_counts=True)
        probs = counts / arr.size
        var = float(arr.var(ddof=1)) if arr.size > 1 else 0.0
        return cls(values, probs, int(arr.size), float(arr.mean()), var)


def entropy(dist: ResponseDistribution) -> float:
    """Shannon entropy in bits over distinct response values (0*log0 := 0)."""
    p = dist.probs[dist.probs > 0.0]
    return float(-(p * np.log2(p)).sum())


def entropy_delta(
    before_exposed: ResponseDistribution,
    before_control: ResponseDistribution,
    after_exposed: ResponseDistribution,
    after_control: ResponseDistribution,
) -> tuple[float, float]:
    """(exposed, control) entropy change from the original corpora to the
    matched one; positive means matching censored low-information responses."""
    return (
        entropy(after_exposed) - entropy(before_exposed),
        entropy(after_control) - entropy(before_control),
    )


def sample_confidence(sigma_m: float, sigma_n: float, m: int, n: int) -> float:
    """Probability that a random M-of-N subsample would show a variance ratio
    at least this far from sqrt(M/N). The deviation enters in absolute value
    so the output is a valid probability."""
    if not (2 <= m <= n):
        raise ValueError("need 2 <= M <= N")
    if sigma_n <= 0.0:
        raise ValueError("sigma_N must be positive")
    dev = abs(sigma_m / sigma_n - math.sqrt(m / n))
    return float(2.0 * (1.0 - ndtr(dev)))


def _laplace_cdf(x: float) -> float:
    # standard Laplace (location 0, scale 1)
    return 1.0 - 0.5 * math.exp(-x) if x >= 0 else 0.5 * math.exp(x)


def att_confidence(diffs, model: str = "normal") -> float:
    """Two-sided confidence that the paired-difference mean is compatible
    with zero under a Normal or (sharper-peaked) Laplace reference, using the
    standardized ratio |mean|/std. Capped at 1."""
    arr = np.asarray(diffs, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least 2 paired differences")
    sigma = float(arr.std(ddof=1))
    if sigma <= 0.0:
        raise ValueError("zero variance in paired differences")
    ratio = abs(float(arr.mean())) / sigma
    if model == "normal":
        p = 2.0 * (1.0 - float(ndtr(ratio)))
    elif model == "laplace":
        p = 2.0 * (1.0 - _laplace_cdf(ratio))
    else:
        raise ValueError(f"unknown model {model!r}")
    return min(1.0, p)


def standardized_cluster_means(cluster_diffs: list[np.ndarray]) -> np.ndarray:
    """mean/(std/sqrt(n)) per cluster; clusters with fewer than 2 members or
    zero variance are skipped (reducing the degrees of freedom)."""
    out = []
    for diffs in cluster_diffs:
        arr = np.asarray(diffs, dtype=np.float64)
        if arr.size < 2:
            continue
        sd = arr.std(ddof=1)
        if sd <= 0.0:
            continue
        out.append(arr.mean() / (sd / math.sqrt(arr.size)))
    return np.asarray(out, dtype=np.float64)


@dataclass
class ChiSquareDiag:
    statistic: float
    k: int
    p_value: float          # upper tail: the two-sided test on the means
    lower_tail: float
    underdispersed: bool    # suspiciously small statistic ("too good")


def chi_square_report(standardized_means) -> ChiSquareDiag:
    z = np.asarray(standardized_means, dtype=np.float64)
    if z.size < 1:
        raise ValueError("need at least one usable cluster")
    stat = float((z**2).sum())
    k = int(z.size)
    lower = float(chi2.cdf(stat, k))
    return ChiSquareDiag(stat, k, 1.0 - lower, lower, lower < 0.05)


def chi_square_confidence(standardized_means) -> float:
    """p-value of the summed squared standardized cluster means against
    chi-square with k degrees of freedom."""
    return chi_square_report(standardized_means).p_value


def skewness(samples) -> float:
    """Adjusted Fisher-Pearson third standardized moment."""
    arr = np.asarray(samples, dtype=np.float64)
    n = arr.size
    if n < 3:
        raise ValueError("need at least 3 samples")
    mean = arr.mean()
    m2 = ((arr - mean) ** 2).mean()
    if m2 <= 0.0:
        raise ValueError("zero variance")
    m3 = ((arr - mean) ** 3).mean()
    g1 = m3 / m2**1.5
    return float(g1 * math.sqrt(n * (n - 1)) / (n - 2))


@dataclass
class BootstrapSummary:
    mean: float
    sigma_mu: float
    p_value: float          # 2(1 - Phi(|lift - mean| / sigma_mu)); 1 when sigma_mu = 0
    significance_p: float   # 2(1 - Phi(|mean| / sigma_mu)): is the lift nonzero
    ci_low: float
    ci_high: float
    b: int
    seed: int


def summarize_bootstrap(point: float, samples: np.ndarray, b: int, seed: int) -> BootstrapSummary:
    mu = float(samples.mean())
    sigma = float(samples.std(ddof=1))
    if sigma <= 0.0:
        return BootstrapSummary(mu, 0.0, 1.0, 1.0, mu, mu, b, seed)
    p = 2.0 * (1.0 - float(ndtr(abs(point - mu) / sigma)))
    sig = 2.0 * (1.0 - float(ndtr(abs(mu) / sigma)))
    return BootstrapSummary(mu, sigma, p, sig, mu - 1.96 * sigma, mu + 1.96 * sigma, b, seed)


def bootstrap_lift(exposed, control, b: int = 1000, seed: int = 0) -> BootstrapSummary:
    """Bootstrap of lift = mean(exposed) - mean(control): B resamples with
    replacement within each cohort, deterministic under the seed."""
    if b < 100:
        raise ValueError("need at least 100 bootstrap iterations")
    e = np.asarray(exposed, dtype=np.float64)
    c = np.asarray(control, dtype=np.float64)
    if e.size == 0 or c.size == 0:
        raise ValueError("both cohorts must be non-empty")
    rng = np.random.default_rng(seed)
    idx_e = rng.integers(0, e.size, (b, e.size))
    idx_c = rng.integers(0, c.size, (b, c.size))
    lifts = e[idx_e].mean(axis=1) - c[idx_c].mean(axis=1)
    return summarize_bootstrap(float(e.mean() - c.mean()), lifts, b, seed)


def bootstrap_paired(diffs, b: int = 1000, seed: int = 0) -> BootstrapSummary:
    """Bootstrap of a paired-difference mean (single-variance formulation)."""
    if b < 100:
        raise ValueError("need at least 100 bootstrap iterations")
    d = np.asarray(diffs, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no paired differences")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, (b, d.size))
    means = d[idx].mean(axis=1)
    return summarize_bootstrap(float(d.mean()), means, b, seed)


@dataclass
class QualityReport:
    entropy_delta_exposed: float | None = None
    entropy_delta_control: float | None = None
    sample_confidence: float | None = None
    att_normal: float | None = None
    att_laplace: float | None = None
    chi_square_p: float | None = None
    chi_square_underdispersed: bool | None = None
    skewness_exposed: float | None = None
    skewness_control: float | None = None
    variance_before: float | None = None
    variance_after: float | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "entropy_delta": [self.entropy_delta_exposed, self.entropy_delta_control],
            "sample_confidence": self.sample_confidence,
            "att_normal": self.att_normal,
            "att_laplace": self.att_laplace,
            "chi_square_p": self.chi_square_p,
            "chi_square_underdispersed": self.chi_square_underdispersed,
            "skewness": [self.skewness_exposed, self.skewness_control],
            "variance_before": self.variance_before,
            "variance_after": self.variance_after,
            "notes": self.notes,
        }


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValueError:
        return None


def matched_quality_report(
    exposed_before,
    control_before,
    exposed_after,
    control_after,
    cluster_diffs: list[np.ndarray],
    all_diffs,
) -> QualityReport:
    """Assemble the diagnostics block for a matched-lift run."""
    be = ResponseDistribution.from_samples(exposed_before)
    bc = ResponseDistribution.from_samples(control_before)
    ae = ResponseDistribution.from_samples(exposed_after)
    ac = ResponseDistribution.from_samples(control_after)
    de, dc = entropy_delta(be, bc, ae, ac)
    n_before = be.count + bc.count
    n_after = ae.count + ac.count
    pooled_before = np.concatenate([np.asarray(exposed_before), np.asarray(control_before)])
    pooled_after = np.concatenate([np.asarray(exposed_after), np.asarray(control_after)])
    sigma_n = float(pooled_before.std(ddof=1))
    sigma_m = float(pooled_after.std(ddof=1))
    report = QualityReport(
        entropy_delta_exposed=de,
        entropy_delta_control=dc,
        sample_confidence=_safe(sample_confidence, sigma_m, sigma_n, n_after, n_before)
        if sigma_n > 0
        else None,
        att_normal=_safe(att_confidence, all_diffs, "normal"),
        att_laplace=_safe(att_confidence, all_diffs, "laplace"),
        skewness_exposed=_safe(skewness, exposed_after),
        skewness_control=_safe(skewness, control_after),
        variance_before=sigma_n**2,
        variance_after=sigma_m**2,
    )
    z = standardized_cluster_means(cluster_diffs)
    if z.size >= 1:
        diag = chi_square_report(z)
        report.chi_square_p = diag.p_value
        report.chi_square_underdispersed = diag.underdispersed
    report.notes["sample_confidence"] = "absolute deviation form"
    report.notes["chi_square"] = "sum of squared standardized cluster means (interpretation)"
    return report
