"""Descriptive summaries, paired Wilcoxon signed-rank tests and Bonferroni flags."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DegenerateTestError, InputError, ParameterError, SummaryError

BOOTSTRAP_RESAMPLES = 10_000
EXACT_MAX_N = 25


@dataclass(frozen=True)
class MetricSummary:
    n: int
    median: float
    q25: float
    q75: float
    ci95_low: float
    ci95_high: float
    mean: float
    sd: float  # population SD
    n_excluded: int = 0

    def to_dict(self):
        return asdict(self)


def _defined(values):
    out, dropped = [], 0
    for v in values:
        if v is None or (isinstance(v, float) and math.isnan(v)):
            dropped += 1
        else:
            out.append(float(v))
    return np.asarray(out, dtype=np.float64), dropped


def bootstrap_median_ci(x, seed=0, resamples=BOOTSTRAP_RESAMPLES, level=0.95, chunk=1000):
    """Percentile bootstrap CI of the median from one seeded stream."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng(seed)
    meds = np.empty(resamples)
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        meds[start:stop] = np.median(x[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    return float(np.percentile(meds, 100 * alpha)), float(np.percentile(meds, 100 * (1 - alpha)))


def summarize(values, bootstrap_seed=0, resamples=BOOTSTRAP_RESAMPLES):
    """Median, linear-interpolated quartiles, bootstrap CI of the median, mean and SD.

    ``None`` and NaN entries are dropped and counted in ``n_excluded``.
    """
    x, dropped = _defined(values)
    if x.size == 0:
        raise SummaryError(f"no defined values to summarize ({dropped} excluded)")
    x = np.sort(x)
    q25, med, q75 = (float(v) for v in np.percentile(x, [25, 50, 75]))
    lo, hi = bootstrap_median_ci(x, bootstrap_seed, resamples)
    # percentile intervals can miss the sample median on tiny skewed samples
    lo, hi = min(lo, med), max(hi, med)
    return MetricSummary(int(x.size), med, q25, q75, lo, hi, float(x.mean()), float(x.std()), dropped)


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting this class

    label: str
    w: float
    n: int
    p: float
    method: str  # exact | normal
    significant: bool = False
    highly_significant: bool = False
    measurement: str = ""
    arm_a: str = ""
    arm_b: str = ""

    def to_dict(self):
        return asdict(self)


def signed_ranks(a, b, zero_method="wilcox"):
    """Average ranks of |a - b| with their signs; zero differences dropped.

    ``zero_method="pratt"`` ranks the zeros before dropping them.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise InputError(f"paired samples need equal non-zero lengths, got {a.shape} and {b.shape}")
    if zero_method not in ("wilcox", "pratt"):
        raise ParameterError(f"zero_method must be 'wilcox' or 'pratt', got {zero_method!r}")
    d = a - b
    if zero_method == "wilcox":
        d = d[d != 0]
        ranks = rankdata(np.abs(d))
    else:
        ranks = rankdata(np.abs(d))
        ranks, d = ranks[d != 0], d[d != 0]
    return ranks, np.sign(d)


def exact_null_counts(doubled_ranks):
    """Number of sign assignments giving each value of 2·W+ (index = 2·W+)."""
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.float64)
    counts[0] = 1.0
    top = 0
    for r in doubled_ranks:
        counts[r : top + r + 1] += counts[: top + 1].copy()
        top += r
    return counts


def exact_p(ranks, w):
    """Two-sided P(min(W+, W-) <= w) under the sign-flip null."""
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = exact_null_counts(doubled)
    k = int(round(2 * w))
    # the events W+ <= w and W- <= w are disjoint unless w reaches half the total
    return float(min(1.0, 2.0 * counts[: k + 1].sum() / 2.0 ** len(doubled)))


def normal_p(ranks, w):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, t = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(t**3 - t) / 48.0
    z = (w - mean + 0.5) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.cdf(min(z, 0.0))))


def wilcoxon_signed_rank(a, b, label="", zero_method="wilcox", exact_max_n=EXACT_MAX_N, measurement="", arm_a="", arm_b=""):
    """Paired two-sided Wilcoxon signed-rank test on ``a - b``.

    Exact sign enumeration for up to ``exact_max_n`` non-zero pairs, else a
    normal approximation with tie-corrected variance and 0.5 continuity
    correction.
    """
    ranks, signs = signed_ranks(a, b, zero_method)
    if ranks.size == 0:
        raise DegenerateTestError(f"{label or 'test'}: all paired differences are zero")
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    w = min(w_plus, w_minus)
    if ranks.size <= exact_max_n:
        p, method = exact_p(ranks, w), "exact"
    else:
        p, method = normal_p(ranks, w), "normal"
    return TestResult(label, w, int(ranks.size), p, method, measurement=measurement, arm_a=arm_a, arm_b=arm_b)


def bonferroni_thresholds(family_size=25):
    if family_size < 1:
        raise ParameterError(f"family size must be at least 1, got {family_size}")
    return 0.05 / family_size, 0.01 / family_size


def bonferroni_flags(results, family_size=25):
    """Flag p < 0.05/m as significant and p < 0.01/m as highly significant."""
    sig, high = bonferroni_thresholds(family_size)
    return [replace(r, significant=r.p < sig, highly_significant=r.p < high) for r in results]
