import numpy as np
import pytest
from scipy import stats as sps

from dualcad.errors import DegenerateTestError, InputError, ParameterError, SummaryError
from dualcad.stats import (
    TestResult,
    bonferroni_flags,
    bonferroni_thresholds,
    summarize,
    wilcoxon_signed_rank,
)

from oracles import wilcoxon_enumeration_p


class TestSummarize:
    def test_interpolated_quartiles(self):
        s = summarize([1, 2, 3, 4, 5])
        assert (s.median, s.q25, s.q75) == (3, 2, 4)

    def test_degenerate_bootstrap(self):
        s = summarize([7, 7, 7])
        assert (s.median, s.ci95_low, s.ci95_high, s.sd) == (7, 7, 7, 0)

    def test_mean_and_median(self):
        s = summarize([1, 2, 3, 4, 100])
        assert s.mean == 22 and s.median == 3
        assert s.sd == pytest.approx(np.std([1, 2, 3, 4, 100]))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        x = rng.gamma(2.0, size=31)
        assert summarize(x, 5) == summarize(rng.permutation(x), 5)

    def test_invariants(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s = summarize(rng.exponential(size=rng.integers(1, 12)), 3, resamples=500)
            assert s.q25 <= s.median <= s.q75
            assert s.ci95_low <= s.median <= s.ci95_high
            assert s.sd >= 0

    def test_seeded(self):
        x = np.random.default_rng(2).normal(size=15)
        assert summarize(x, 1) == summarize(x, 1)
        lows = {summarize(x, seed, resamples=20).ci95_low for seed in range(5)}
        assert len(lows) > 1

    def test_undefined_excluded_and_counted(self):
        s = summarize([1.0, None, 3.0, float("nan")])
        assert s.n == 2 and s.n_excluded == 2 and s.median == 2

    def test_empty(self):
        with pytest.raises(SummaryError):
            summarize([None])
        with pytest.raises(SummaryError):
            summarize([])


class TestWilcoxon:
    def test_six_positive(self):
        r = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6)
        assert r.p == 0.03125 and r.w == 0 and r.n == 6 and r.method == "exact"

    def test_identical_is_degenerate(self):
        with pytest.raises(DegenerateTestError):
            wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            wilcoxon_signed_rank([1, 2], [1])

    def test_zeros_dropped(self):
        r = wilcoxon_signed_rank([1, 2, 3, 5], [1, 1, 1, 1])
        assert r.n == 3 and r.p == 0.25

    def test_enumeration_oracle_n12(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=12), rng.normal(size=12)
        assert abs(wilcoxon_signed_rank(a, b).p - wilcoxon_enumeration_p(a - b)) < 1e-12

    def test_enumeration_oracle_with_ties(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(1, 13))
            a, b = rng.integers(0, 4, n), rng.integers(0, 4, n)
            if np.all(a == b):
                continue
            assert abs(wilcoxon_signed_rank(a, b).p - wilcoxon_enumeration_p(a - b)) < 1e-12

    def test_matches_scipy_without_ties(self):
        rng = np.random.default_rng(5)
        for n in (5, 10, 20):
            a, b = rng.normal(size=n), rng.normal(size=n)
            ref = sps.wilcoxon(a, b, method="exact").pvalue
            assert wilcoxon_signed_rank(a, b).p == pytest.approx(ref, rel=1e-10)

    def test_normal_approximation(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=40), rng.normal(0.4, size=40)
        r = wilcoxon_signed_rank(a, b)
        assert r.method == "normal"
        ref = sps.wilcoxon(a, b, method="approx", correction=True).pvalue
        assert r.p == pytest.approx(ref, rel=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(7)
        for n in (8, 30):
            a, b = rng.integers(0, 6, n), rng.integers(0, 6, n)
            assert wilcoxon_signed_rank(a, b).p == wilcoxon_signed_rank(b, a).p

    def test_positive_scaling_of_differences(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=14), rng.normal(size=14)
        d = a - b
        assert wilcoxon_signed_rank(a, b).p == wilcoxon_signed_rank(3.5 * d, np.zeros(14)).p

    def test_pratt_keeps_zero_ranks(self):
        r = wilcoxon_signed_rank([0, 1, 2, 3], [0, 0, 0, 0], zero_method="pratt")
        assert r.n == 3 and r.w == 0
        with pytest.raises(ParameterError):
            wilcoxon_signed_rank([1], [0], zero_method="zsplit")

    def test_p_in_range(self):
        r = wilcoxon_signed_rank([1, -1], [0, 0])
        assert 0 <= r.p <= 1 and r.p == 1.0


class TestBonferroni:
    def flags(self, p, m=25):
        (r,) = bonferroni_flags([TestResult("x", 0.0, 10, p, "exact")], m)
        return r.significant, r.highly_significant

    def test_thresholds(self):
        assert bonferroni_thresholds(25) == pytest.approx((0.002, 0.0004))
        with pytest.raises(ParameterError):
            bonferroni_thresholds(0)

    def test_reported_calls(self):
        assert self.flags(3.1e-6) == (True, True)
        assert self.flags(4.9e-2) == (False, False)
        assert self.flags(0.0019) == (True, False)

    def test_family_size(self):
        assert self.flags(0.01, 1) == (True, False)
        assert self.flags(0.009, 1) == (True, True)
