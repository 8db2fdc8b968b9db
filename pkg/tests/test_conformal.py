import numpy as np
import pytest

from relcp.conformal import (
    WeightedSample,
    nexcp_intervals,
    scp_intervals,
    seqcp_intervals,
    two_sided_offsets,
    weighted_quantile,
)
from relcp.data import ResidualSet
from relcp.intervals import evaluate_intervals


def brute_force_weighted_quantile(values, weights, level):
    """Independent oracle: linear scan over sorted cumulative weights with
    the virtual +inf point carrying the single largest weight."""
    pairs = sorted(zip(values, weights), key=lambda p: p[0])
    total = sum(w for _, w in pairs) + max(w for _, w in pairs)
    cum = 0.0
    for v, w in pairs:
        cum += w
        if cum / total >= level:
            return v
    return max(values)  # the virtual point was selected


def residual_set(values, steps=None, horizon=1):
    values = np.asarray(values, dtype=float)
    if steps is None:
        steps = np.arange(values.shape[0])
    return ResidualSet(residuals=values, target_steps=np.asarray(steps), horizon=horizon)


class TestWeightedQuantile:
    def test_classic_order_statistic(self):
        # unit weights recover the ceil((n+1) * level) order statistic
        sample = WeightedSample(values=np.arange(1.0, 10.0), weights=np.ones(9))
        assert weighted_quantile(sample, 0.9) == 9.0

    def test_singleton(self):
        sample = WeightedSample(values=np.array([5.0]), weights=np.array([1.0]))
        assert weighted_quantile(sample, 0.5) == 5.0

    def test_degenerate_weights(self):
        sample = WeightedSample(
            values=np.array([1.0, 2.0, 3.0, 4.0]), weights=np.array([0.0, 0.0, 0.0, 1.0])
        )
        assert weighted_quantile(sample, 0.5) == 4.0

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            WeightedSample(values=np.array([]), weights=np.array([]))

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError, match="strictly positive"):
            WeightedSample(values=np.array([1.0]), weights=np.array([0.0]))

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            WeightedSample(values=np.array([1.0, 2.0]), weights=np.array([1.0, -0.1]))

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            values = np.round(rng.normal(size=n), 3)
            weights = rng.choice([0.0, 0.5, 1.0, 2.0], size=n)
            if not weights.any():
                weights[int(rng.integers(n))] = 1.0
            level = float(rng.uniform(0.01, 0.99))
            sample = WeightedSample(values=values, weights=weights)
            assert weighted_quantile(sample, level) == brute_force_weighted_quantile(
                values, weights, level
            )

    def test_monotone_in_level(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 30))
            sample = WeightedSample(
                values=rng.normal(size=n), weights=rng.uniform(0.1, 2.0, size=n)
            )
            levels = np.sort(rng.uniform(0.01, 0.99, size=5))
            quantiles = [weighted_quantile(sample, lv) for lv in levels]
            assert all(a <= b for a, b in zip(quantiles, quantiles[1:]))


class TestScp:
    def test_symmetric_residuals(self):
        # oracle: brute force over the empirical distribution of +-1, +-2.
        # At alpha=0.6 the 0.7-level cumulative mass 150/201 >= 0.7 selects
        # the +-1 pair exactly; at alpha=0.5 the level sits just above the
        # lattice (150/201 < 0.75) and conservatively rounds up to +-2.
        values = np.tile([-2.0, -1.0, 1.0, 2.0], 50)
        cal = residual_set(values[:, None] * np.ones((1, 1)))
        forecasts = np.zeros((5, 1))
        iv = scp_intervals(cal, forecasts, np.arange(200, 205), alpha=0.6)
        assert brute_force_weighted_quantile(values, np.ones(200), 0.7) == 1.0
        assert np.allclose(iv.lower, -1.0)
        assert np.allclose(iv.upper, 1.0)
        iv_boundary = scp_intervals(cal, forecasts, np.arange(200, 205), alpha=0.5)
        hi_expected = brute_force_weighted_quantile(values, np.ones(200), 0.75)
        assert np.allclose(iv_boundary.upper, hi_expected)
        assert np.allclose(iv_boundary.lower, -hi_expected)

    def test_zero_residuals_give_point_interval(self):
        cal = residual_set(np.zeros((40, 2)))
        iv = scp_intervals(cal, np.full((3, 2), 7.0), np.arange(100, 103), alpha=0.1)
        assert np.all(iv.lower == 7.0)
        assert np.all(iv.upper == 7.0)

    def test_interval_centered_on_forecast(self, rng):
        cal = residual_set(rng.normal(size=(60, 3)))
        forecasts = rng.normal(size=(4, 3))
        iv = scp_intervals(cal, forecasts, np.arange(100, 104), alpha=0.2)
        widths = iv.upper - iv.lower
        assert np.allclose(widths, widths[0])  # constant across steps
        assert np.all(iv.lower <= forecasts + 1e-12)

    def test_too_few_residuals(self):
        cal = residual_set(np.zeros((5, 1)))
        with pytest.raises(ValueError, match="at least"):
            scp_intervals(cal, np.zeros((1, 1)), np.array([10]), alpha=0.1)

    def test_coverage_on_exchangeable_data(self, rng):
        # marginal-coverage sanity oracle on i.i.d. Gaussian residuals
        cal = residual_set(rng.normal(size=(1000, 1)))
        test_actuals = rng.normal(size=(10000, 1))
        iv = scp_intervals(cal, np.zeros((10000, 1)), np.arange(1000, 11000), alpha=0.1)
        covered = ((test_actuals >= iv.lower) & (test_actuals <= iv.upper)).mean()
        assert 0.88 <= covered <= 1.0


class TestNexcp:
    def test_rho_one_equals_scp(self, rng):
        cal = residual_set(rng.normal(size=(50, 2)))
        forecasts = rng.normal(size=(6, 2))
        steps = np.arange(100, 106)
        a = scp_intervals(cal, forecasts, steps, alpha=0.2)
        b = nexcp_intervals(cal, forecasts, steps, alpha=0.2, rho=1.0)
        assert np.array_equal(a.lower, b.lower)
        assert np.array_equal(a.upper, b.upper)

    def test_decayed_weights_enumeration(self):
        # pool {1,2,3} at steps {1,2,3}, rho=0.5 at t=4: weights {.125,.25,.5};
        # cumulative (normalized by sum + virtual 0.5): 1 -> .0909, 2 -> .2727,
        # 3 -> .6364, all below 0.9, so the virtual point selects max = 3
        sample = WeightedSample(
            values=np.array([1.0, 2.0, 3.0]), weights=np.array([0.125, 0.25, 0.5])
        )
        assert weighted_quantile(sample, 0.9) == 3.0
        assert weighted_quantile(sample, 0.9) == brute_force_weighted_quantile(
            [1.0, 2.0, 3.0], [0.125, 0.25, 0.5], 0.9
        )

    def test_dominant_recent_weight(self):
        # rho -> 0+: essentially all mass sits on the most recent residual,
        # so the median of the pool is that residual even though it is
        # neither the min nor the max
        values = np.array([5.0, 9.0, 3.0])
        weights = 1e-9 ** (4 - np.array([1, 2, 3]))
        sample = WeightedSample(values=values, weights=weights)
        assert weighted_quantile(sample, 0.45) == 3.0
        assert brute_force_weighted_quantile(values, weights, 0.45) == 3.0

    def test_static_pool_constant_over_steps(self, rng):
        cal = residual_set(rng.normal(size=(40, 2)))
        iv = nexcp_intervals(
            cal, np.zeros((5, 2)), np.arange(50, 55), alpha=0.2, rho=0.9
        )
        assert np.allclose(iv.lower, iv.lower[0])
        assert np.allclose(iv.upper, iv.upper[0])

    def test_streaming_pool_uses_observed_test_residuals(self, rng):
        cal = residual_set(rng.normal(size=(30, 1)), steps=np.arange(30))
        test = residual_set(np.array([[100.0], [0.0], [0.0]]), steps=[30, 31, 32])
        iv = nexcp_intervals(
            cal, np.zeros((3, 1)), test.target_steps, alpha=0.2, rho=1.0,
            streaming=True, test_residuals=test,
        )
        # the huge residual observed at step 30 must widen later intervals
        assert iv.upper[1, 0] > iv.upper[0, 0]

    def test_invalid_rho(self, rng):
        cal = residual_set(rng.normal(size=(30, 1)))
        with pytest.raises(ValueError, match="rho"):
            nexcp_intervals(cal, np.zeros((1, 1)), np.array([40]), 0.2, rho=0.0)


class TestSeqcp:
    def test_window_covering_pool_equals_scp(self, rng):
        cal = residual_set(rng.normal(size=(50, 2)))
        forecasts = rng.normal(size=(4, 2))
        steps = np.arange(60, 64)
        a = scp_intervals(cal, forecasts, steps, alpha=0.2)
        b = seqcp_intervals(cal, forecasts, steps, alpha=0.2, window_k=50)
        assert np.array_equal(a.lower, b.lower)
        assert np.array_equal(a.upper, b.upper)

    def test_upper_is_max_of_window(self, rng):
        # K=10 at alpha=0.1: cumulative unit weights reach 10/11 < 0.95,
        # so the virtual-point rule returns the window maximum
        values = rng.normal(size=(40, 1))
        cal = residual_set(values)
        iv = seqcp_intervals(cal, np.zeros((2, 1)), np.array([50, 51]), 0.1, window_k=10)
        assert iv.upper[0, 0] == values[-10:, 0].max()
        assert iv.lower[0, 0] == values[-10:, 0].min()

    def test_constant_stream(self):
        cal = residual_set(np.full((30, 1), 2.5))
        iv = seqcp_intervals(cal, np.zeros((1, 1)), np.array([40]), 0.1, window_k=20)
        assert iv.lower[0, 0] == 2.5
        assert iv.upper[0, 0] == 2.5

    def test_window_too_small_for_alpha(self, rng):
        cal = residual_set(rng.normal(size=(30, 1)))
        with pytest.raises(ValueError, match="window_k"):
            seqcp_intervals(cal, np.zeros((1, 1)), np.array([40]), 0.1, window_k=5)

    def test_streaming_window_slides(self, rng):
        cal = residual_set(np.zeros((20, 1)), steps=np.arange(20))
        test = residual_set(np.full((15, 1), 4.0), steps=np.arange(20, 35))
        iv = seqcp_intervals(
            cal, np.zeros((15, 1)), test.target_steps, alpha=0.5, window_k=10,
            streaming=True, test_residuals=test,
        )
        # once the window holds only the observed 4.0 residuals the interval locks on
        assert iv.upper[-1, 0] == 4.0
        assert iv.upper[0, 0] == 0.0


class TestTwoSided:
    def test_lower_upper_ordering(self, rng):
        for _ in range(50):
            values = rng.normal(size=int(rng.integers(12, 60)))
            lo, hi = two_sided_offsets(values, np.ones(len(values)), alpha=0.2)
            assert lo <= hi

    def test_metrics_integration(self, rng):
        cal = residual_set(rng.normal(size=(200, 3)))
        actual = rng.normal(size=(50, 3))
        iv = scp_intervals(cal, np.zeros((50, 3)), np.arange(300, 350), alpha=0.1)
        report = evaluate_intervals(iv, actual, 0.1)
        assert report.winkler >= report.pi_width
