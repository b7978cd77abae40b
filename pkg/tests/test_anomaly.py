"""Anomaly-scoring tests: weights, exact weighted-uniform-sum CDF, scores."""

import itertools
import math
import time

import numpy as np
import pytest
from scipy.stats import kstest, norm

from anomix.anomaly import (
    MAX_WINDOW,
    AnomalyScoreSeries,
    ObservationWindow,
    WeightVector,
    as_posterior,
    as_theta,
    build_sum_dist,
    default_decay,
    exp_weights,
    pit,
    pit_rows,
    q_statistic,
    score_series,
    sum_cdf,
)
from anomix.model import (
    BehaviorGateParams,
    Dataset,
    ExpertParams,
    MixingGateParams,
    ModelParams,
    sample_conditional,
)
from anomix.posterior import PosteriorSample


def std_normal_model():
    return ModelParams(
        (ExpertParams(0.0, [0.0], 1.0),),
        MixingGateParams(np.zeros((1, 2))),
        BehaviorGateParams(np.zeros(2)),
    )


def slope_model():
    return ModelParams(
        (ExpertParams(1.0, [2.0], 0.7),),
        MixingGateParams(np.zeros((1, 2))),
        BehaviorGateParams(np.zeros(2)),
    )


def reference_cdf(weights, q):
    """Direct power-set evaluation of the weighted-uniform-sum CDF."""
    n = len(weights)
    if q <= 0:
        return 0.0
    if q >= 1:
        return 1.0
    terms = []
    for subset in itertools.chain.from_iterable(
        itertools.combinations(range(n), r) for r in range(n + 1)
    ):
        s = sum(weights[i] for i in subset)
        if s < q:
            terms.append((-1.0) ** len(subset) * (q - s) ** n)
    return math.fsum(terms) / (math.factorial(n) * math.prod(weights))


def irwin_hall_cdf(x, n):
    """Closed-form CDF of the sum of n independent U(0, 1)."""
    total = 0.0
    for j in range(int(math.floor(x)) + 1):
        total += (-1.0) ** j * math.comb(n, j) * (x - j) ** n
    return total / math.factorial(n)


def make_window(xs, ys):
    xs = np.asarray(xs, dtype=float).reshape(len(ys), -1)
    ts = np.datetime64("2024-01-01", "s") + np.arange(len(ys)) * np.timedelta64(60, "s")
    return ObservationWindow(xs, np.asarray(ys, dtype=float), ts)


def make_dataset(x, y):
    x = np.asarray(x, dtype=float)
    ts = np.datetime64("2024-01-01", "s") + np.arange(len(x)) * np.timedelta64(3600, "s")
    return Dataset(x, np.asarray(y, dtype=float), ts)


class TestExpWeights:
    def test_length_one(self):
        assert exp_weights(1, 3.0).weights.tolist() == [1.0]

    def test_geometric_normalization(self):
        w = exp_weights(2, math.log(2.0))
        np.testing.assert_allclose(w.weights, [1 / 3, 2 / 3], atol=1e-15)

    def test_small_decay_limit(self):
        w = exp_weights(5, 1e-12)
        np.testing.assert_allclose(w.weights, 0.2, atol=1e-9)

    def test_consecutive_ratio(self):
        lam = 0.7
        w = exp_weights(6, lam).weights
        np.testing.assert_allclose(w[1:] / w[:-1], math.exp(lam), rtol=1e-12)

    def test_newest_is_largest(self):
        w = exp_weights(4, 0.5).weights
        assert np.all(np.diff(w) > 0)

    def test_rejects_bad_decay(self):
        with pytest.raises(ValueError):
            exp_weights(3, 0.0)

    def test_default_decay_keeps_one_percent(self):
        k = 7
        w = exp_weights(k + 1, default_decay(k)).weights
        assert w[0] / w[-1] == pytest.approx(0.01, rel=1e-9)

    def test_weight_vector_normalization_check(self):
        with pytest.raises(ValueError):
            WeightVector([0.5, 0.4])


class TestBuildSumDist:
    def test_singleton(self):
        d = build_sum_dist(WeightVector([1.0]))
        assert d.subset_sums.tolist() == [0.0, 1.0]
        assert d.subset_signs.tolist() == [1.0, -1.0]
        assert d.norm_const == 1.0

    def test_pair_enumeration(self):
        d = build_sum_dist(WeightVector([0.5, 0.5]))
        assert d.subset_sums.tolist() == [0.0, 0.5, 0.5, 1.0]
        assert sorted(d.subset_signs.tolist()) == [-1.0, -1.0, 1.0, 1.0]

    def test_build_time_n12(self):
        w = exp_weights(12, 0.3)
        start = time.perf_counter()
        build_sum_dist(w)
        assert time.perf_counter() - start < 0.05

    def test_window_cap(self):
        with pytest.raises(ValueError):
            build_sum_dist(exp_weights(MAX_WINDOW + 1, 0.1))


class TestSumCdf:
    def test_single_uniform_is_identity(self):
        d = build_sum_dist(WeightVector([1.0]))
        for q in np.linspace(0.0, 1.0, 21):
            assert sum_cdf(d, q) == pytest.approx(q, abs=1e-15)

    def test_irwin_hall_two_symmetry(self):
        d = build_sum_dist(WeightVector([0.5, 0.5]))
        assert sum_cdf(d, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_irwin_hall_two_value(self):
        # scaled Irwin-Hall: F(0.25) = (2 * 0.25)^2 / 2 = 0.125
        d = build_sum_dist(WeightVector([0.5, 0.5]))
        assert sum_cdf(d, 0.25) == pytest.approx(0.125, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_equal_weights_match_irwin_hall(self, n):
        d = build_sum_dist(WeightVector(np.full(n, 1.0 / n)))
        for q in np.linspace(0.0, 1.0, 101):
            assert abs(sum_cdf(d, q) - irwin_hall_cdf(n * q, n)) < 1e-9

    def test_matches_power_set_reference(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            n = int(rng.integers(1, 11))
            w = rng.random(n) + 0.05
            w /= w.sum()
            d = build_sum_dist(WeightVector(w))
            for q in rng.random(20):
                assert abs(sum_cdf(d, q) - reference_cdf(w.tolist(), q)) < 1e-12

    def test_monte_carlo_three_uniforms(self):
        rng = np.random.default_rng(23)
        w = np.full(3, 1.0 / 3.0)
        d = build_sum_dist(WeightVector(w))
        samples = np.sort(rng.random((10**6, 3)) @ w)
        grid = np.linspace(0.01, 0.99, 99)
        empirical = np.searchsorted(samples, grid) / len(samples)
        exact = np.array([sum_cdf(d, g) for g in grid])
        assert np.abs(empirical - exact).max() < 0.004

    def test_boundaries_and_monotonicity(self):
        d = build_sum_dist(exp_weights(6, 0.9))
        assert sum_cdf(d, -0.1) == 0.0
        assert sum_cdf(d, 0.0) == 0.0
        assert sum_cdf(d, 1.0) == 1.0
        assert sum_cdf(d, 1.1) == 1.0
        qs = np.linspace(0, 1, 500)
        vals = [sum_cdf(d, q) for q in qs]
        assert np.all(np.diff(vals) >= 0)

    def test_strongly_decaying_weights_stay_accurate(self):
        # The full weight product underflows double precision here; sub-ulp
        # weights are dropped so the formula stays well conditioned.
        rng = np.random.default_rng(99)
        w = exp_weights(16, 7.5)
        d = build_sum_dist(w)
        assert d.degree < 16
        samples = np.sort(rng.random((10**5, 16)) @ w.weights)
        for q in (0.1, 0.5, 0.9, 0.99):
            empirical = np.searchsorted(samples, q) / len(samples)
            assert sum_cdf(d, q) == pytest.approx(empirical, abs=0.01)


class TestPit:
    def test_median(self):
        assert pit(std_normal_model(), [0.0], 0.0) == 0.5

    def test_gaussian_quantile(self):
        model = slope_model()
        x = np.array([0.3])
        y = (1.0 + 2.0 * 0.3) + 1.959963984540054 * 0.7
        assert pit(model, x, y) == pytest.approx(norm.cdf(1.959963984540054), abs=1e-12)

    def test_clamped_into_open_interval(self):
        assert pit(std_normal_model(), [0.0], -60.0) == 1e-15
        assert pit(std_normal_model(), [0.0], 60.0) == 1.0 - 1e-15

    def test_uniform_under_the_model(self):
        rng = np.random.default_rng(401)
        model = slope_model()
        x = rng.uniform(-2, 2, size=(10**4, 1))
        y = sample_conditional(model, x, rng)
        u = pit_rows(model, x, y)
        assert kstest(u, "uniform").pvalue > 0.01

    def test_lag_one_autocorrelation_small(self):
        rng = np.random.default_rng(402)
        model = slope_model()
        x = rng.uniform(-2, 2, size=(10**4, 1))
        y = sample_conditional(model, x, rng)
        u = pit_rows(model, x, y)
        centered = u - u.mean()
        rho = (centered[1:] * centered[:-1]).mean() / centered.var()
        assert abs(rho) < 0.03


class TestQStatistic:
    def test_all_half(self):
        window = make_window(np.zeros((3, 1)), [0.0, 0.0, 0.0])
        q = q_statistic(window, std_normal_model(), exp_weights(3, 0.5))
        assert q == pytest.approx(0.5, abs=1e-12)

    def test_near_one_hot_weights(self):
        window = make_window(np.zeros((2, 1)), [0.0, 1.3])
        w = exp_weights(2, 30.0)  # newest weight ~ 1
        q = q_statistic(window, std_normal_model(), w)
        assert q == pytest.approx(pit(std_normal_model(), [0.0], 1.3), abs=1e-9)

    def test_length_mismatch(self):
        window = make_window(np.zeros((3, 1)), [0.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            q_statistic(window, std_normal_model(), exp_weights(2, 0.5))

    def test_distribution_matches_sum_cdf(self):
        rng = np.random.default_rng(55)
        model = slope_model()
        w = exp_weights(4, 0.8)
        dist = build_sum_dist(w)
        x = rng.uniform(-2, 2, size=(4 * 10**4, 1))
        y = sample_conditional(model, x, rng)
        u = pit_rows(model, x, y).reshape(10**4, 4)
        qs = u @ w.weights
        assert kstest(qs, lambda v: np.array([sum_cdf(dist, q) for q in np.atleast_1d(v)])).pvalue > 0.01


class TestAsTheta:
    def test_center_scores_zero(self):
        # single uniform: F(q) = q, so q = 0.5 gives score 0
        window = make_window(np.zeros((1, 1)), [0.0])
        dist = build_sum_dist(WeightVector([1.0]))
        assert as_theta(window, std_normal_model(), dist) == 0.0

    def test_tail_value(self):
        # F = 0.975 => score 0.95; with one uniform F(q) = q
        model = std_normal_model()
        y = norm.ppf(0.975)
        window = make_window(np.zeros((1, 1)), [y])
        dist = build_sum_dist(WeightVector([1.0]))
        assert as_theta(window, model, dist) == pytest.approx(0.95, abs=1e-9)

    def test_uniform_under_the_null(self):
        rng = np.random.default_rng(77)
        model = slope_model()
        w = exp_weights(6, default_decay(5))
        dist = build_sum_dist(w)
        x = rng.uniform(-2, 2, size=(6 * 10**4, 1))
        y = sample_conditional(model, x, rng)
        u = pit_rows(model, x, y).reshape(10**4, 6)
        qs = u @ w.weights
        f = np.array([sum_cdf(dist, q) for q in qs])
        scores = 1 - 2 * np.minimum(f, 1 - f)
        assert kstest(scores, "uniform").pvalue > 0.01

    def test_exceedance_rate_matches_threshold(self):
        rng = np.random.default_rng(78)
        model = slope_model()
        w = exp_weights(6, default_decay(5))
        dist = build_sum_dist(w)
        x = rng.uniform(-2, 2, size=(6 * 10**4, 1))
        y = sample_conditional(model, x, rng)
        u = pit_rows(model, x, y).reshape(10**4, 6)
        f = np.array([sum_cdf(dist, q) for q in u @ w.weights])
        scores = 1 - 2 * np.minimum(f, 1 - f)
        tau = 0.975
        exceed = int((scores >= tau).sum())
        from scipy.stats import binom

        lo, hi = binom.interval(0.99, 10**4, 1 - tau)
        assert lo <= exceed <= hi

    def test_reflection_symmetry(self):
        # Reversing the weights and mapping u -> 1 - u flips Q around 1/2;
        # the folded score is unchanged because the sum law is symmetric.
        rng = np.random.default_rng(79)
        w = rng.random(5) + 0.1
        w /= w.sum()
        u = rng.random(5)
        dist = build_sum_dist(WeightVector(w))
        dist_rev = build_sum_dist(WeightVector(w[::-1]))

        def folded(d, q):
            f = sum_cdf(d, q)
            return 1 - 2 * min(f, 1 - f)

        q1 = float(w @ u)
        q2 = float(w[::-1] @ (1 - u[::-1]))
        assert folded(dist, q1) == pytest.approx(folded(dist_rev, q2), abs=1e-9)

    def test_window_length_must_match_dist(self):
        window = make_window(np.zeros((2, 1)), [0.0, 0.0])
        dist = build_sum_dist(WeightVector([1.0]))
        with pytest.raises(ValueError):
            as_theta(window, std_normal_model(), dist)


class TestAsPosterior:
    def make_sample(self, draws):
        return PosteriorSample(tuple(draws), 0.25, 1, 0)

    def test_single_draw_equals_as_theta(self):
        model = std_normal_model()
        window = make_window(np.zeros((2, 1)), [0.4, -0.2])
        w = exp_weights(2, 0.5)
        sample = self.make_sample([model])
        assert as_posterior(window, sample, w) == as_theta(window, model, build_sum_dist(w))

    def test_identical_draws_collapse(self):
        model = slope_model()
        window = make_window([[0.1], [0.2], [0.3]], [1.0, 1.5, 2.0])
        w = exp_weights(3, 0.7)
        sample = self.make_sample([model] * 5)
        assert as_posterior(window, sample, w) == pytest.approx(
            as_theta(window, model, build_sum_dist(w)), abs=1e-15
        )

    def test_bounded(self):
        rng = np.random.default_rng(91)
        draws = [
            ModelParams(
                (ExpertParams(rng.normal(), rng.normal(size=1), rng.uniform(0.5, 2)),),
                MixingGateParams(np.zeros((1, 2))),
                BehaviorGateParams(rng.normal(size=2)),
            )
            for _ in range(7)
        ]
        window = make_window(rng.normal(size=(4, 1)), rng.normal(size=4) * 10)
        val = as_posterior(window, self.make_sample(draws), exp_weights(4, 0.5))
        assert 0.0 <= val <= 1.0


class TestScoreSeries:
    def make_sample(self, model, copies=3):
        return PosteriorSample(tuple([model] * copies), 0.25, 1, 0)

    def test_windowless_scores(self):
        model = std_normal_model()
        data = make_dataset(np.zeros((5, 1)), [0.0, 0.5, -0.5, 2.0, 0.0])
        series = score_series(data, self.make_sample(model), k=0)
        assert len(series) == 5
        u = pit_rows(model, data.covariates, data.responses)
        np.testing.assert_allclose(series.as_values, 1 - 2 * np.minimum(u, 1 - u), atol=1e-12)

    def test_constant_data_at_model_mean(self):
        model = std_normal_model()
        data = make_dataset(np.zeros((8, 1)), np.zeros(8))
        series = score_series(data, self.make_sample(model), k=0)
        assert np.all(series.as_values == 0.0)
        windowed = score_series(data, self.make_sample(model), k=2)
        assert np.all(windowed.as_values < 1e-12)

    def test_first_k_timestamps_unscored(self):
        model = std_normal_model()
        data = make_dataset(np.zeros((10, 1)), np.zeros(10))
        series = score_series(data, self.make_sample(model), k=3)
        assert len(series) == 7
        assert series.timestamps[0] == data.timestamps[3]

    def test_large_shift_saturates(self):
        rng = np.random.default_rng(101)
        model = slope_model()
        x = rng.uniform(-2, 2, size=(40, 1))
        y = sample_conditional(model, x, rng) + 10 * 0.7
        data = make_dataset(x, y)
        series = score_series(data, self.make_sample(model), k=5)
        assert np.all(series.as_values >= 0.99)

    def test_too_short_dataset(self):
        data = make_dataset(np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            score_series(data, self.make_sample(std_normal_model()), k=5)

    def test_series_validation(self):
        ts = np.array(["2024-01-01"], dtype="datetime64[s]")
        with pytest.raises(ValueError):
            AnomalyScoreSeries(ts, np.array([1.5]), 0.975)
        with pytest.raises(ValueError):
            AnomalyScoreSeries(ts, np.array([0.5]), 1.0)
