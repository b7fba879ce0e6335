#!/usr/bin/env python3
"""
Tests for evaluation statistics
KDE gaps, bootstrap intervals, ANOVA, counterfactual shifts and report files
"""

import itertools

import numpy as np
import pytest
from scipy.stats import f_oneway

from chase_env import WorldConfig
from data_io import Episode
from demo_generator import generate_demos
from eval_stats import (
    REPORT_HEADER,
    BootstrapResult,
    DegenerateSampleError,
    anova_f,
    bootstrap_anova,
    compute_metrics,
    condition_gt_error,
    counterfactual_shift,
    follow_up_contrasts,
    kde_gap,
    kde_gap_bootstrap,
    paired_bootstrap,
    read_bootstrap_csv,
    unpaired_bootstrap,
    write_bootstrap_csv,
    write_metrics_csv,
    write_violin_csv,
)


class FlagPulsePolicy:
    """Pushes forward on the first step only when the condition flag is 1"""

    def __init__(self):
        self.t = 0

    def reset(self):
        self.t = 0

    def act(self, obs, epsilon, rng):
        t, self.t = self.t, self.t + 1
        return 1 if t == 0 and obs[-1] == 1.0 else 0


class StillPolicy:

    def reset(self):
        pass

    def act(self, obs, epsilon, rng):
        return 0


def line_episode(points, episode_id=0):
    points = np.asarray(points, dtype=float)
    positions = np.stack([points, points, np.zeros_like(points)], axis=1)
    return Episode(
        episode_id=episode_id,
        condition=0,
        dt=0.1,
        roles=["chaser", "chaser", "evader"],
        positions=positions,
        velocities=np.zeros_like(positions),
        actions=np.full(positions.shape[:2], -1, dtype=int),
        outcome="timeout",
        winner_role="evader"
    )


class TestKdeGap:

    def test_identical_samples(self):
        sample = np.random.default_rng(0).normal(size=200)
        assert kde_gap(sample, sample) == 0.0

    def test_same_distribution_is_small(self):
        rng = np.random.default_rng(1)
        assert kde_gap(rng.normal(size=2000), rng.normal(size=2000)) < 0.15

    def test_disjoint_supports_approach_two(self):
        rng = np.random.default_rng(2)
        gap = kde_gap(rng.normal(0, 1.0, 500), rng.normal(20, 1.0, 500))
        assert gap == pytest.approx(2.0, abs=1e-2)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=300), rng.normal(0.5, 2.0, size=300)
        assert kde_gap(a, b) == pytest.approx(kde_gap(b, a))

    @pytest.mark.parametrize("sample", [[1.0], [2.0, 2.0, 2.0], [0.0, np.nan]])
    def test_degenerate_samples(self, sample):
        with pytest.raises(DegenerateSampleError):
            kde_gap(sample, [0.0, 1.0, 2.0])


class TestKdeGapBootstrap:

    def test_disjoint_samples_have_a_wide_gap(self):
        rng = np.random.default_rng(11)
        result = kde_gap_bootstrap(rng.normal(0, 1, 200), rng.normal(20, 1, 200), n_rep=50, seed=1)
        assert result.ci_low > 1.9
        assert result.n_replicates == 50
        assert result.n == 400

    def test_same_distribution_gap_is_small(self):
        rng = np.random.default_rng(12)
        result = kde_gap_bootstrap(rng.normal(size=300), rng.normal(size=300), n_rep=50, seed=2)
        assert result.median < 0.4

    def test_same_seed_same_interval(self):
        a, b = [0.1, 0.5, 0.9, 1.3], [0.2, 0.4, 1.1, 1.5, 2.0]
        assert kde_gap_bootstrap(a, b, 30, seed=3) == kde_gap_bootstrap(a, b, 30, seed=3)

    def test_constant_resamples_are_dropped(self):
        result = kde_gap_bootstrap([0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 2.0], n_rep=200, seed=4)
        assert 0 < result.n_replicates < 200

    def test_degenerate_input(self):
        with pytest.raises(DegenerateSampleError):
            kde_gap_bootstrap([2.0, 2.0, 2.0], [0.0, 1.0, 2.0], n_rep=10)


class TestPairedBootstrap:

    def test_constant_differences(self):
        result = paired_bootstrap([0.7] * 12, n_rep=500, seed=1)
        assert result.median == pytest.approx(0.7)
        assert result.ci_low == pytest.approx(0.7)
        assert result.ci_high == pytest.approx(0.7)
        assert result.excludes_zero

    def test_symmetric_differences_straddle_zero(self):
        result = paired_bootstrap([-1.0, 1.0] * 20, n_rep=5000, seed=2)
        assert abs(result.median) < 0.05
        assert result.ci_low < 0 < result.ci_high
        assert not result.excludes_zero

    def test_same_seed_same_interval(self):
        diffs = np.random.default_rng(4).normal(size=30)
        assert paired_bootstrap(diffs, 2000, seed=7) == paired_bootstrap(diffs, 2000, seed=7)

    def test_chunked_replicates(self):
        result = paired_bootstrap(np.arange(5.0), n_rep=25_000, seed=3)
        assert result.n_replicates == 25_000
        assert result.n == 5

    def test_matches_exhaustive_resampling(self):
        diffs = np.array([0.0, 1.0, 2.0, 3.0, 10.0])
        exact = np.array([np.mean(c) for c in itertools.product(diffs, repeat=5)])
        assert exact.size == 5 ** 5
        result = paired_bootstrap(diffs, n_rep=1_000_000, seed=5)
        # a million replicates pin each percentile within 0.1 percentile points of the exact law
        for q, value in ((2.5, result.ci_low), (50.0, result.median), (97.5, result.ci_high)):
            low, high = np.percentile(exact, [q - 0.1, q + 0.1])
            assert low - 1e-12 <= value <= high + 1e-12

    def test_interval_narrows_with_sample_size(self):
        values = np.random.default_rng(9).normal(1.0, 2.0, size=500)
        widths = []
        for n in (5, 50, 500):
            r = paired_bootstrap(values[:n], n_rep=5000, seed=10)
            widths.append(r.ci_high - r.ci_low)
        assert widths[0] > widths[1] > widths[2]
        assert widths[2] < widths[0] / 5
        assert result.ci_high == pytest.approx(np.percentile(exact, 97.5), abs=0.25)

    @pytest.mark.parametrize("diffs,n_rep", [([1.0], 100), ([1.0, 2.0], 0)])
    def test_invalid_inputs(self, diffs, n_rep):
        with pytest.raises(ValueError):
            paired_bootstrap(diffs, n_rep=n_rep)


class TestAnova:

    def test_f_matches_scipy(self):
        rng = np.random.default_rng(6)
        groups = [rng.normal(m, 1.0, size=n) for m, n in ((0, 10), (0.5, 12), (2, 8))]
        assert anova_f(groups) == pytest.approx(f_oneway(*groups).statistic)

    def test_zero_within_variance(self):
        assert anova_f([[1.0, 1.0], [2.0, 2.0]]) == np.inf
        assert anova_f([[1.0, 1.0], [1.0, 1.0]]) == 0.0

    def test_separated_groups_have_positive_interval(self):
        rng = np.random.default_rng(7)
        groups = [rng.normal(m, 0.1, size=20) for m in (0.0, 1.0, 2.0)]
        result = bootstrap_anova(groups, n_rep=500, seed=1)
        assert result.ci_low > 0
        assert np.isfinite(result.ci_high)

    def test_interval_survives_infinite_replicates(self):
        result = bootstrap_anova([[0.0, 0.0, 1.0], [5.0, 5.0, 5.0]], n_rep=300, seed=2)
        assert not np.isnan(result.median)

    @pytest.mark.parametrize("groups", [
        [[1.0, 2.0]],
        [[1.0, 2.0], [3.0]],
        [[1.0, 1.0], [2.0, 2.0]],
    ])
    def test_invalid_groups(self, groups):
        with pytest.raises(ValueError):
            bootstrap_anova(groups, n_rep=10)

    def test_contrasts_gated_on_anova(self):
        groups = {"a": [0.0, 0.1, 0.2, 0.1], "b": [1.0, 1.1, 1.2, 1.1], "c": [0.0, 0.5, 1.0]}
        closed = BootstrapResult("anova_f", 1.0, 0.0, 2.0, 100, 11, 0)
        assert follow_up_contrasts(groups, [("a", "b")], closed, n_rep=100) == []

        open_ = BootstrapResult("anova_f", 5.0, 1.0, 9.0, 100, 11, 0)
        results = follow_up_contrasts(groups, [("a", "b"), ("a", "c")], open_, n_rep=200)
        assert [r.statistic_name for r in results] == ["contrast:a-b", "contrast:a-c"]
        assert results[0].median == pytest.approx(-1.0)
        assert results[0].n == 4
        assert results[1].n == 7

    def test_unknown_contrast_group(self):
        open_ = BootstrapResult("anova_f", 5.0, 1.0, 9.0, 100, 4, 0)
        with pytest.raises(ValueError):
            follow_up_contrasts({"a": [0.0, 1.0]}, [("a", "z")], open_, n_rep=10)

    def test_unpaired_difference(self):
        result = unpaired_bootstrap([3.0, 3.0, 3.0], [1.0, 1.0], n_rep=100)
        assert result.median == pytest.approx(2.0)


class TestMetrics:

    def test_path_length_of_a_straight_walk(self):
        ep = line_episode([[0.0, 0.0], [0.3, 0.4], [0.6, 0.8]])
        assert ep.path_length(0) == pytest.approx(1.0)
        assert ep.mean_path_length("chaser") == pytest.approx(1.0)
        assert ep.path_length(2) == 0.0

    def test_path_length_is_translation_invariant(self):
        points = np.random.default_rng(8).normal(size=(30, 2))
        assert line_episode(points + [5.0, -3.0]).path_length(0) == pytest.approx(line_episode(points).path_length(0))

    def test_ground_truth_against_itself(self, small_demos):
        metrics = compute_metrics(small_demos, small_demos)
        assert all(m.dtw_to_gt == 0.0 for m in metrics)
        assert [m.episode_return for m in metrics] == [int(ep.outcome == "contact") for ep in small_demos]

    def test_without_pool_dtw_is_nan(self, small_demos):
        assert all(np.isnan(m.dtw_to_gt) for m in compute_metrics(small_demos[:2]))

    def test_empty_episode_list(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_gt_error_shape_mismatch(self):
        with pytest.raises(ValueError):
            condition_gt_error([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_gt_error_is_absolute(self):
        result = condition_gt_error([1.0, 3.0, 2.0], [2.0, 2.0, 1.0], n_rep=200)
        assert result.median == pytest.approx(1.0)


class TestCounterfactual:

    def test_flag_pulse_shift(self):
        config = WorldConfig(agent_diameter=1e-6)
        team = {0: FlagPulsePolicy(), 1: FlagPulsePolicy(), 2: StillPolicy()}
        result, shifts = counterfactual_shift(team, config, 0, 1, n_episodes=6, seed=11, n_rep=200)
        expected = sum(0.036 * 0.75 ** k for k in range(148))
        assert np.allclose(shifts, expected, atol=1e-12)
        assert result.median == pytest.approx(expected)
        assert result.statistic_name == "counterfactual_shift:1->2"

    def test_same_flag_gives_zero_shift(self):
        config = WorldConfig(agent_diameter=1e-6, time_limit=2.0)
        team = {0: FlagPulsePolicy(), 1: FlagPulsePolicy(), 2: StillPolicy()}
        _, shifts = counterfactual_shift(team, config, 1, 1, n_episodes=3, seed=0, n_rep=50)
        assert np.all(shifts == 0.0)


class TestReports:

    def test_metrics_csv(self, small_demos, tmp_path):
        path = write_metrics_csv(compute_metrics(small_demos), tmp_path / "m.csv", method="gt")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("method,episode_id,condition,episode_return")
        assert len(lines) == len(small_demos) + 1

    def test_bootstrap_csv_round_trip(self, tmp_path):
        results = [paired_bootstrap([0.5, 1.0, 1.5], n_rep=100, seed=1, statistic_name="x")]
        path = write_bootstrap_csv(results, tmp_path / "b.csv")
        text = path.read_text()
        assert text.startswith("# " + REPORT_HEADER.splitlines()[0])
        frame = read_bootstrap_csv(path)
        assert frame["statistic"].tolist() == ["x"]
        assert frame["median"].iloc[0] == pytest.approx(results[0].median)

    def test_violin_csv_is_long_format(self, tmp_path):
        demos = generate_demos(WorldConfig(time_limit=1.0), 3, condition=0, seed=0)
        metrics = compute_metrics(demos, demos)
        path = write_violin_csv({"gt": metrics, "copy": metrics}, tmp_path / "v.csv")
        assert len(path.read_text().splitlines()) == 1 + 2 * 3 * 4
