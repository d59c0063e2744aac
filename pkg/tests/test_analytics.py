"""
Unit tests for correlation matrices, error metrics and trial aggregation.
"""
import json
import logging
import math
import os
import sys

import numpy as np
import pandas as pd
import pytest

# Add parent directory to path to import comove
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from comove import analytics
from comove.analytics import (
    DIAGONAL_SQRT,
    WEIGHT_SUM,
    aggregate_trials,
    correlation_report,
    empirical_cross_correlation,
    format_summary,
    kernel_cross_correlation,
    mean_std,
    nmae,
    nrmse,
    trial_errors,
)
from comove.errors import (
    ConfigError,
    DataError,
    DegenerateChannelError,
    EmptyReportError,
    NormalizationUndefinedError,
)
from comove.gp_engine import GPModel, predict_arrays
from comove.kernels import (
    MOSM,
    SM_IGP,
    VARIANTS,
    KernelSpec,
    SpectralComponent,
    kernel_at_zero,
    pair_params,
)
from comove.series_store import Channel, MaskSpec, TimeSeriesSet, apply_mask, training_arrays
from comove.synthetic import LatentWave, SyntheticChannel, SyntheticSpec, generate
from comove.trainer import TrialResult, fit
from tests.test_kernels import random_spec


def make_model(spec, names=None):
    M = spec.M
    return GPModel(spec=spec, noise=np.full(M, 0.1), prior_scales=np.ones(M),
                   channel_names=tuple(names) if names else ())


def make_trial(model, index=0, objective=0.0):
    return TrialResult(index=index, seed=index, initial_objective=objective, final_objective=objective,
                       model=model, converged=True, iterations=1)


def masked_set():
    t = np.arange(20, dtype=float)
    channels = (Channel("a", t, 5.0 + np.sin(0.3 * t)), Channel("b", t, 3.0 + np.cos(0.3 * t)))
    return apply_mask(TimeSeriesSet(channels=channels), MaskSpec(ranges={"a": ((10.0, 14.0),)}))


class TestKernelCorrelation:
    """Test normalized k_ij(0)."""

    def test_igp_is_identity(self):
        """Test SM-IGP gives the identity matrix."""
        spec = random_spec(np.random.default_rng(0), SM_IGP, 3, 2)
        np.testing.assert_array_equal(kernel_cross_correlation(make_model(spec)), np.eye(3))

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_contract(self, variant):
        """Test symmetry, unit diagonal and bounds on random specs."""
        rng = np.random.default_rng(1)
        for _ in range(25):
            rho = kernel_cross_correlation(make_model(random_spec(rng, variant, 4, 3)))
            np.testing.assert_allclose(rho, rho.T, atol=1e-10)
            np.testing.assert_array_equal(np.diag(rho), 1.0)
            assert np.all(np.abs(rho) <= 1 + 1e-9)

    def test_equal_channels_fully_correlated(self):
        """Test two channels with equal parameters correlate at 1."""
        comp = SpectralComponent.build([1.3, 1.3], [0.1, 0.1], [0.4, 0.4], theta=[2.0, 2.0], phi=[0.5, 0.5])
        rho = kernel_cross_correlation(make_model(KernelSpec(variant=MOSM, components=(comp,))))
        assert rho[0, 1] == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_weight_sum_mode(self, variant):
        """Test summed magnitudes equal k_ii(0), so weight-sum matches diagonal-sqrt."""
        spec = random_spec(np.random.default_rng(2), variant, 3, 2)
        summed = sum(np.diag(pair_params(spec, q)["alpha"]) for q in range(spec.Q))
        np.testing.assert_allclose(summed, np.diag(kernel_at_zero(spec)), rtol=1e-12)
        rho = kernel_cross_correlation(make_model(spec), WEIGHT_SUM)
        np.testing.assert_allclose(rho, rho.T, atol=1e-10)
        np.testing.assert_allclose(rho, kernel_cross_correlation(make_model(spec), DIAGONAL_SQRT), atol=1e-12)

    def test_unknown_mode(self):
        """Test an unknown normalization is a config error."""
        spec = random_spec(np.random.default_rng(3), SM_IGP, 2, 1)
        with pytest.raises(ConfigError):
            kernel_cross_correlation(make_model(spec), "max")

    def test_degenerate_channel(self):
        """Test a channel with zero variance cannot be normalized."""
        spec = KernelSpec(variant=SM_IGP, components=(SpectralComponent.build([1.0, 0.0], [0.1, 0.1], [1.0, 1.0]),))
        with pytest.raises(DegenerateChannelError, match="'b'"):
            kernel_cross_correlation(make_model(spec, ["a", "b"]))


class TestEmpiricalCorrelation:
    """Test Pearson correlation on shared timestamps."""

    def test_self_and_anti_correlation(self):
        """Test unit diagonal and y2 = -2 y1 gives -1."""
        t = np.arange(10, dtype=float)
        y = np.sin(t)
        ts = TimeSeriesSet(channels=(Channel("a", t, y), Channel("b", t, -2 * y)))
        rho = empirical_cross_correlation(ts)
        np.testing.assert_array_equal(np.diag(rho), 1.0)
        assert rho[0, 1] == pytest.approx(-1.0)
        assert rho[1, 0] == rho[0, 1]

    def test_three_points(self):
        """Test {1, 2, 3} against {1, 3, 2} gives 0.5."""
        t = [0.0, 1.0, 2.0]
        ts = TimeSeriesSet(channels=(Channel("a", t, [1.0, 2.0, 3.0]), Channel("b", t, [1.0, 3.0, 2.0])))
        assert empirical_cross_correlation(ts)[0, 1] == pytest.approx(0.5)

    def test_inner_join_on_timestamps(self):
        """Test only co-timestamped pairs enter the correlation."""
        a = Channel("a", [0.0, 1.0, 2.0, 3.0, 9.0], [1.0, 2.0, 3.0, 4.0, 100.0])
        b = Channel("b", [0.0, 1.0, 2.0, 3.0, 5.0], [2.0, 4.0, 6.0, 8.0, -50.0])
        rho = empirical_cross_correlation(TimeSeriesSet(channels=(a, b)))
        assert rho[0, 1] == pytest.approx(1.0)

    def test_insufficient_overlap_is_nan(self, caplog):
        """Test fewer than three shared timestamps gives NaN with a warning."""
        a = Channel("a", [0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
        b = Channel("b", [1.0, 2.0, 7.0], [1.0, 2.0, 3.0])
        with caplog.at_level(logging.WARNING):
            rho = empirical_cross_correlation(TimeSeriesSet(channels=(a, b)))
        assert math.isnan(rho[0, 1])
        assert "share 2 timestamp(s)" in caplog.text

    def test_constant_channel_is_nan(self):
        """Test a constant channel gives NaN rather than an error."""
        t = [0.0, 1.0, 2.0, 3.0]
        ts = TimeSeriesSet(channels=(Channel("a", t, [1.0, 1.0, 1.0, 1.0]), Channel("b", t, [1.0, 2.0, 0.0, 3.0])))
        assert math.isnan(empirical_cross_correlation(ts)[0, 1])

    def test_report_outputs(self, tmp_path):
        """Test the report writes JSON with NaN as null and both CSV matrices."""
        a = Channel("a", [0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
        b = Channel("b", [5.0, 6.0, 7.0], [1.0, 2.0, 3.0])
        ts = TimeSeriesSet(channels=(a, b))
        spec = random_spec(np.random.default_rng(4), SM_IGP, 2, 1)
        report = correlation_report(make_model(spec), ts)
        data = json.loads(open(report.save_json(str(tmp_path / "correlation.json")), encoding="utf-8").read())
        assert data["labels"] == ["a", "b"]
        assert data["empirical_corr"][0][1] is None
        paths = report.save_csv(str(tmp_path))
        assert [os.path.basename(p) for p in paths] == ["kernel_correlation.csv", "empirical_correlation.csv"]
        frame = pd.read_csv(paths[0], index_col="channel")
        assert list(frame.columns) == ["a", "b"]


class TestMetrics:
    """Test normalized error metrics."""

    def test_perfect_prediction(self):
        """Test pred = truth gives zero errors."""
        assert nmae([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert nrmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_symmetric_errors(self):
        """Test truth {2, 2}, pred {1, 3} gives 0.5 for both."""
        assert nmae([1.0, 3.0], [2.0, 2.0]) == 0.5
        assert nrmse([1.0, 3.0], [2.0, 2.0]) == 0.5

    def test_constant_offset(self):
        """Test truth {2, 2}, pred {3, 3} gives 0.5 for both."""
        assert nmae([3.0, 3.0], [2.0, 2.0]) == 0.5
        assert nrmse([3.0, 3.0], [2.0, 2.0]) == 0.5

    def test_zero_mean_truth(self):
        """Test zero-mean ground truth has no normalization."""
        with pytest.raises(NormalizationUndefinedError):
            nmae([1.0, 1.0], [-1.0, 1.0])

    def test_length_mismatch(self):
        """Test mismatched or empty inputs are rejected."""
        with pytest.raises(DataError):
            nrmse([1.0], [1.0, 2.0])
        with pytest.raises(DataError):
            nmae([], [])

    def test_rmse_dominates_mae(self):
        """Test nRMSE >= nMAE on 1000 random vectors."""
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            truth = rng.normal(3.0, 1.0, n)
            pred = truth + rng.normal(0.0, 1.0, n)
            assert nrmse(pred, truth) >= nmae(pred, truth) - 1e-15

    def test_scale_invariance(self):
        """Test scaling pred and truth jointly leaves both metrics unchanged."""
        rng = np.random.default_rng(6)
        truth = rng.normal(3.0, 1.0, 30)
        pred = truth + rng.normal(0.0, 0.5, 30)
        for c in (0.01, 7.5, 1e4):
            assert nmae(c * pred, c * truth) == pytest.approx(nmae(pred, truth), rel=1e-12)
            assert nrmse(c * pred, c * truth) == pytest.approx(nrmse(pred, truth), rel=1e-12)

    def test_mean_std(self):
        """Test {1, 2, 3} has mean 2 and sample std 1; one value has std 0."""
        assert mean_std([1.0, 2.0, 3.0]) == (2.0, 1.0)
        assert mean_std([4.2]) == (4.2, 0.0)
        assert mean_std([0.3] * 5) == pytest.approx((0.3, 0.0))

    def test_summary_format(self):
        """Test the mean +/- std summary layout."""
        assert format_summary(0.018, 0.0012) == "0.018 ± 0.0012"


class TestAggregateTrials:
    """Test trial-aggregated reports."""

    def test_single_trial_std_zero(self):
        """Test one trial reports std 0 and the point counts."""
        ts = masked_set()
        spec = random_spec(np.random.default_rng(7), MOSM, 2, 1)
        report = aggregate_trials([make_trial(make_model(spec))], ts, experiment="unit")
        assert report.nmae[1] == 0.0 and report.nrmse[1] == 0.0
        assert (report.n_train, report.n_test, report.trials) == (35, 5, 1)
        assert report.variant == MOSM

    def test_identical_trials(self):
        """Test five identical trials give std 0 and the common mean."""
        ts = masked_set()
        model = make_model(random_spec(np.random.default_rng(8), MOSM, 2, 1))
        single = trial_errors(model, ts)
        report = aggregate_trials([make_trial(model, k) for k in range(5)], ts)
        assert report.nmae == pytest.approx((single[0], 0.0), abs=1e-12)
        assert report.nrmse == pytest.approx((single[1], 0.0), abs=1e-12)

    def test_one_posterior_for_all_channels(self, mocker):
        """Test test errors factorize the training Gram once and match per-channel posteriors."""
        t = np.arange(20, dtype=float)
        channels = (Channel("a", t, 5.0 + np.sin(0.3 * t)), Channel("b", t, 3.0 + np.cos(0.3 * t)))
        ts = apply_mask(TimeSeriesSet(channels=channels),
                        MaskSpec(ranges={"a": ((10.0, 14.0),), "b": ((2.0, 4.0),)}))
        model = make_model(random_spec(np.random.default_rng(14), MOSM, 2, 1))
        ch_tr, t_tr, y_tr = training_arrays(ts)
        expected = []
        for i, (ch, idx) in enumerate(zip(ts.channels, ts.test_mask)):
            mean, _ = predict_arrays(model.spec, model.noise, ch_tr, t_tr, y_tr, np.full(idx.size, i), ch.t[idx])
            expected.append((nmae(mean, ch.y[idx]), nrmse(mean, ch.y[idx])))

        spy = mocker.spy(analytics, "predict_arrays")
        mae_value, rmse_value, fallbacks = trial_errors(model, ts)
        assert spy.call_count == 1
        assert mae_value == pytest.approx(np.mean([e[0] for e in expected]), rel=1e-10)
        assert rmse_value == pytest.approx(np.mean([e[1] for e in expected]), rel=1e-10)
        assert fallbacks == []

    def test_per_trial_statistics(self, mocker):
        """Test per-trial nMAE {1, 2, 3} aggregates to mean 2, std 1."""
        mocker.patch("comove.analytics.trial_errors", side_effect=[(1.0, 1.0, []), (2.0, 2.0, []), (3.0, 3.0, [])])
        model = make_model(random_spec(np.random.default_rng(9), MOSM, 2, 1))
        report = aggregate_trials([make_trial(model, k) for k in range(3)], masked_set())
        assert report.nmae == (2.0, 1.0)
        assert report.per_trial["nMAE"] == [1.0, 2.0, 3.0]

    def test_empty_test_set(self):
        """Test a set without test points cannot be reported."""
        t = np.arange(5, dtype=float)
        ts = TimeSeriesSet(channels=(Channel("a", t, t + 1),))
        model = make_model(random_spec(np.random.default_rng(10), SM_IGP, 1, 1))
        with pytest.raises(EmptyReportError):
            aggregate_trials([make_trial(model)], ts)

    def test_zero_mean_fallback(self):
        """Test a zero-mean test channel falls back to unnormalized errors and is flagged."""
        ch = Channel("a", [0.0, 1.0, 2.0, 3.0], [1.0, -1.0, 1.0, 2.0])
        ts = TimeSeriesSet(channels=(ch,), train_mask=([2, 3],), test_mask=([0, 1],))
        model = make_model(random_spec(np.random.default_rng(11), SM_IGP, 1, 1))
        report = aggregate_trials([make_trial(model)], ts)
        assert report.fallbacks == ["a"]

    def test_csv_layout(self, tmp_path):
        """Test metrics.csv has three comment lines and the documented columns."""
        ts = masked_set()
        model = make_model(random_spec(np.random.default_rng(12), MOSM, 2, 1))
        report = aggregate_trials([make_trial(model, 0), make_trial(model, 1)], ts, experiment="unit")
        path = report.to_csv(str(tmp_path / "metrics.csv"))
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == "# channel_weighting: equal"
        assert lines[1] == "# scale: transformed"
        assert lines[2] == "# unnormalized_fallback: none"
        frame = pd.read_csv(path, comment="#")
        assert list(frame.columns) == ["variant", "experiment", "metric", "mean", "std",
                                       "summary", "n_train", "n_test", "trials"]
        assert list(frame["metric"]) == ["nMAE", "nRMSE"]
        assert " ± " in frame["summary"][0]

    def test_original_scale(self):
        """Test original-scale metrics are computed after inverting transforms."""
        ts = masked_set()
        model = make_model(random_spec(np.random.default_rng(13), MOSM, 2, 1))
        transformed = aggregate_trials([make_trial(model)], ts)
        original = aggregate_trials([make_trial(model)], ts, scale="original")
        # no transforms were applied, so both scales agree
        assert original.nrmse == transformed.nrmse
        assert original.scale == "original"


def coupled_set(seed):
    """Three near-copies of a multi-wave signal with a 20-point gap in 'c'."""
    spec = SyntheticSpec(
        length=100,
        spacing=1,
        latent=(LatentWave(0.013, 1.0), LatentWave(0.041, 0.6), LatentWave(0.09, 0.4)),
        channels=(
            SyntheticChannel("a", (1.0, 1.0, 1.0), delay=0.0, noise_std=0.05),
            SyntheticChannel("b", (0.9, 1.1, 1.0), delay=1.0, noise_std=0.05),
            SyntheticChannel("c", (1.1, 0.9, 1.0), delay=2.0, noise_std=0.05),
        ),
        seed=seed,
    )
    return apply_mask(generate(spec), MaskSpec(ranges={"c": ((40.0, 59.0),)}, seed=seed))


@pytest.mark.slow
class TestImputationOrdering:
    """Test that cross-channel structure helps imputation."""

    def test_mosm_beats_independent_model(self):
        """Test best-of-5 MOSM test nRMSE is below best-of-5 SM-IGP in at least 4 of 5 seeds."""
        wins = 0
        for seed in range(5):
            ts = coupled_set(seed)
            assert ts.test_mask[2].size == 20
            mosm = fit(ts, MOSM, 1, trials=5, seed=seed, max_iterations=200, grid_size=500)
            igp = fit(ts, SM_IGP, 1, trials=5, seed=seed, max_iterations=200, grid_size=500)
            for model in (mosm[0].model, igp[0].model):
                rho = kernel_cross_correlation(model)
                np.testing.assert_allclose(rho, rho.T, atol=1e-10)
                assert np.all(np.abs(rho) <= 1 + 1e-9)
            np.testing.assert_array_equal(kernel_cross_correlation(igp[0].model), np.eye(3))
            if aggregate_trials(mosm, ts).nrmse[0] < aggregate_trials(igp, ts).nrmse[0]:
                wins += 1
        assert wins >= 4
