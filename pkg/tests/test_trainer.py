"""
Unit tests for periodogram initialization, the unconstrained parametrization
and multi-restart fitting.
"""
import json
import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import comove
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from comove import trainer
from comove.analytics import kernel_cross_correlation
from comove.config import load_config
from comove.errors import (
    DegenerateChannelError,
    GradientCheckError,
    IllConditionedKernelError,
    InsufficientDataError,
    InvalidParameterError,
    TrainingFailedError,
)
from comove.gp_engine import prior_scales
from comove.kernels import CSM, MOSM, SM_IGP, SM_LMC, VARIANTS, effective_delay
from comove.series_store import Channel, TimeSeriesSet
from comove.synthetic import SyntheticSpec, generate
from comove.tracking import RunTracker
from comove.trainer import (
    ParameterLayout,
    estimate_psd,
    fit,
    from_unconstrained,
    gradient_check,
    init_spec,
    load_trials,
    objective_function,
    perturb,
    save_trials,
    to_unconstrained,
    trial_seeds,
)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def sine_channel(name, n=100, frequency=0.1, amplitude=1.0, shift=0.0, noise=0.0, seed=0):
    t = np.arange(n, dtype=float)
    rng = np.random.default_rng(seed)
    y = amplitude * np.sin(2 * np.pi * frequency * (t - shift)) + noise * rng.standard_normal(n)
    return Channel(name=name, t=t, y=y)


def sine_set(n=30, names=("a", "b"), seed=0):
    return TimeSeriesSet(channels=tuple(
        sine_channel(name, n=n, frequency=0.08 + 0.01 * k, shift=k, noise=0.1, seed=seed + k)
        for k, name in enumerate(names)))


class TestEstimatePsd:
    """Test the Lomb-Scargle periodogram."""

    def test_single_sinusoid_peak(self):
        """Test the top peak of sin(2 pi 0.1 t) lies within one grid cell of 0.1."""
        psd = estimate_psd(sine_channel("a"), grid_size=1000)
        assert psd.f_max == pytest.approx(0.5)
        top = psd.frequency[np.argmax(psd.power)]
        assert abs(top - 0.1) <= psd.spacing

    def test_constant_signal_has_no_power(self):
        """Test a constant channel has (numerically) zero power."""
        ch = Channel(name="a", t=np.arange(20.0), y=np.full(20, 3.0))
        assert np.all(estimate_psd(ch, 200).power <= 1e-12)

    def test_two_sinusoids_two_peaks(self):
        """Test peaks at 0.05 and 0.2 are both found among the top local maxima."""
        t = np.arange(200, dtype=float)
        ch = Channel(name="a", t=t, y=np.sin(2 * np.pi * 0.05 * t) + np.sin(2 * np.pi * 0.2 * t))
        psd = estimate_psd(ch, 1000)
        freqs, _, _ = trainer._ranked_peaks(psd)
        top = np.sort(freqs[:2])
        assert top[0] == pytest.approx(0.05, abs=2 * psd.spacing)
        assert top[1] == pytest.approx(0.2, abs=2 * psd.spacing)

    def test_irregular_sampling(self):
        """Test irregular timestamps still locate the peak."""
        rng = np.random.default_rng(1)
        t = np.sort(rng.choice(np.arange(300), 120, replace=False)).astype(float)
        ch = Channel(name="a", t=t, y=np.sin(2 * np.pi * 0.04 * t))
        psd = estimate_psd(ch, 2000)
        assert psd.frequency[np.argmax(psd.power)] == pytest.approx(0.04, abs=2e-3)

    def test_too_few_points(self):
        """Test fewer than four training points is insufficient data."""
        ch = Channel(name="a", t=[0.0, 1.0, 2.0], y=[1.0, 2.0, 0.0])
        with pytest.raises(InsufficientDataError, match="'a'"):
            estimate_psd(ch)


class TestInitSpec:
    """Test kernel initialization from periodogram peaks."""

    def test_pure_sinusoid(self):
        """Test Q = 1 recovers the frequency with zero delays and phases."""
        ts = TimeSeriesSet(channels=(sine_channel("a"),))
        spec, report = init_spec(ts, MOSM, 1, grid_size=1000)
        comp = spec.components[0]
        assert abs(comp.mu[0, 0] - 0.1) <= report.channels[0].psd.spacing
        assert np.all(comp.theta == 0) and np.all(comp.phi == 0)
        assert report.estimator == "lomb-scargle"

    def test_weights_scales_and_noise(self):
        """Test weights std/Q, scales from squared half-widths and noise var/10."""
        ts = sine_set(n=60)
        spec, report = init_spec(ts, MOSM, 2, grid_size=500)
        stds = np.array([np.std(ch.y) for ch in ts.channels])
        for comp in spec.components:
            np.testing.assert_allclose(comp.w, stds / 2)
        np.testing.assert_allclose(report.noise, stds ** 2 / 10)
        for i, info in enumerate(report.channels):
            for q in range(2):
                if not info.padded[q]:
                    assert spec.components[q].sigma[i, 0] == pytest.approx(info.half_widths[q] ** 2)

    def test_padding_with_random_frequency(self, mocker):
        """Test a missing peak is drawn from (0, f_max] and flagged."""
        mocker.patch("comove.trainer._ranked_peaks",
                     return_value=(np.array([0.1]), np.array([0.01]), np.array([1.0])))
        ts = TimeSeriesSet(channels=(sine_channel("a"),))
        spec, report = init_spec(ts, MOSM, 2, seed=3)
        info = report.channels[0]
        assert info.padded == (False, True)
        assert report.padded_count == 1
        assert 0 < spec.components[1].mu[0, 0] <= info.psd.f_max
        assert spec.components[1].sigma[0, 0] == pytest.approx((info.psd.f_max / 4) ** 2)

    def test_scale_uses_cycles_without_angular_factor(self, mocker):
        """Test a 0.01 cycles/day half-width starts sigma at 1e-4, not (2 pi 0.01)^2."""
        mocker.patch("comove.trainer._ranked_peaks",
                     return_value=(np.array([0.1]), np.array([0.01]), np.array([1.0])))
        spec, _ = init_spec(TimeSeriesSet(channels=(sine_channel("a"),)), MOSM, 1)
        assert spec.components[0].sigma[0, 0] == pytest.approx(1e-4, rel=1e-12)
        assert spec.components[0].sigma[0, 0] < (2 * np.pi * 0.01) ** 2

    def test_padding_is_seeded(self, mocker):
        """Test padded frequencies depend only on the seed."""
        mocker.patch("comove.trainer._ranked_peaks", return_value=(np.zeros(0), np.zeros(0), np.zeros(0)))
        ts = TimeSeriesSet(channels=(sine_channel("a"),))
        a, _ = init_spec(ts, MOSM, 2, seed=9)
        b, _ = init_spec(ts, MOSM, 2, seed=9)
        assert a.to_dict() == b.to_dict()

    @pytest.mark.parametrize("variant", [CSM, SM_LMC, SM_IGP])
    def test_pooled_peaks_identical_channels(self, variant):
        """Test identical channels under a tied variant share one mean per component."""
        ts = TimeSeriesSet(channels=(sine_channel("a"), sine_channel("b")))
        spec, report = init_spec(ts, variant, 1)
        comp = spec.components[0]
        assert comp.mu[0, 0] == comp.mu[1, 0]
        assert comp.mu[0, 0] == pytest.approx(0.1, abs=report.channels[0].psd.spacing)
        np.testing.assert_array_equal(report.pooled_peaks, [comp.mu[0, 0]])

    def test_zero_variance_channel(self):
        """Test a constant channel cannot be initialized."""
        ts = TimeSeriesSet(channels=(Channel(name="flat", t=np.arange(10.0), y=np.ones(10)),))
        with pytest.raises(DegenerateChannelError, match="flat"):
            init_spec(ts, MOSM, 1)

    def test_report_serializes(self):
        """Test the report is JSON serializable."""
        _, report = init_spec(sine_set(), CSM, 2, grid_size=200)
        data = json.loads(json.dumps(report.to_dict()))
        assert data["estimator"] == "lomb-scargle"
        assert len(data["channels"]) == 2


class TestParametrization:
    """Test the unconstrained parameter vector."""

    def test_csm_parameter_count(self):
        """Test CSM with M = 3, Q = 2 has 19 free parameters."""
        assert ParameterLayout(variant=CSM, Q=2, M=3).size == 19

    @pytest.mark.parametrize("variant,expected", [(MOSM, 12), (SM_LMC, 6), (SM_IGP, 6), (CSM, 8)])
    def test_counts_per_variant(self, variant, expected):
        """Test counts follow the ties of each variant for M = 2, Q = 1."""
        assert ParameterLayout(variant=variant, Q=1, M=2).size == expected

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip(self, variant):
        """Test to_unconstrained/from_unconstrained reproduce the kernel and noise."""
        spec, report = init_spec(sine_set(n=40), variant, 2, grid_size=200)
        layout = ParameterLayout.for_spec(spec)
        x = perturb(to_unconstrained(spec, report.noise), layout, np.random.default_rng(0), 0.25, 0.1)
        spec2, noise2 = from_unconstrained(x, layout)
        spec3, noise3 = from_unconstrained(to_unconstrained(spec2, noise2), layout)
        for a, b in zip(spec2.components, spec3.components):
            for key in ("w", "mu", "sigma", "theta", "phi"):
                np.testing.assert_allclose(getattr(a, key), getattr(b, key), rtol=0, atol=1e-12)
        np.testing.assert_allclose(noise2, noise3, rtol=0, atol=1e-12)

    def test_zero_vector(self):
        """Test all-zero coordinates give unit positive parameters."""
        layout = ParameterLayout(variant=CSM, Q=2, M=3)
        spec, noise = from_unconstrained(np.zeros(layout.size), layout)
        np.testing.assert_array_equal(noise, np.ones(3))
        for comp in spec.components:
            np.testing.assert_array_equal(comp.w, np.ones(3))
            np.testing.assert_array_equal(comp.sigma, np.ones((3, 1)))

    def test_non_finite_vector(self):
        """Test NaN coordinates are rejected."""
        layout = ParameterLayout(variant=SM_IGP, Q=1, M=1)
        x = np.zeros(layout.size)
        x[0] = np.nan
        with pytest.raises(InvalidParameterError):
            from_unconstrained(x, layout)

    def test_wrong_length(self):
        """Test a vector of the wrong length is rejected."""
        with pytest.raises(InvalidParameterError):
            from_unconstrained(np.zeros(3), ParameterLayout(variant=MOSM, Q=1, M=2))

    def test_bounds_keep_means_nonnegative(self):
        """Test only frequency-mean coordinates carry a lower bound."""
        layout = ParameterLayout(variant=MOSM, Q=1, M=2)
        bounds = layout.bounds()
        kinds = layout.kinds()
        assert all(b == (0.0, None) for b, k in zip(bounds, kinds) if k == "positive")
        assert sum(1 for k in kinds if k == "positive") == 2


class TestGradients:
    """Test the analytic MAP gradient on the unconstrained scale."""

    def test_random_configurations(self):
        """Test 20 random (variant, data) configurations against central differences."""
        rng = np.random.default_rng(7)
        checked = 0
        for k in range(20):
            variant = VARIANTS[k % len(VARIANTS)]
            n = int(rng.integers(8, 16))
            ts = sine_set(n=n, names=("a", "b"), seed=k)
            spec, report = init_spec(ts, variant, int(rng.integers(1, 3)), grid_size=200, seed=k)
            layout = ParameterLayout.for_spec(spec)
            x = perturb(to_unconstrained(spec, report.noise), layout, rng, 0.25, 0.1)
            fun = objective_function(ts, layout, prior_scales(ts))
            error, g, g_fd = gradient_check(fun, x)
            assert error <= 1e-4, f"{variant}: relative error {error:.3e}"
            checked += 1
        assert checked == 20

    def test_gradient_check_detects_wrong_gradient(self):
        """Test a deliberately wrong gradient gives a large error."""
        def fun(x):
            return float(x @ x), 3 * x
        error, _, _ = gradient_check(fun, np.array([1.0, 2.0]))
        assert error > 0.1


class TestFit:
    """Test multi-restart training."""

    def test_results_sorted_and_bounded(self):
        """Test results are sorted, respect the iteration cap and never increase the objective."""
        ts = sine_set(n=25)
        results = fit(ts, SM_IGP, 1, trials=3, seed=1, max_iterations=30, grid_size=200)
        assert len(results) == 3
        objectives = [r.final_objective for r in results]
        assert objectives == sorted(objectives)
        for r in results:
            assert r.iterations <= 30
            assert r.final_objective <= r.initial_objective
            assert r.model.channel_names == ("a", "b")
            assert r.perturbation == {"lognormal_std": 0.25, "additive_std": 0.1}

    def test_no_perturbation_descends(self):
        """Test one unperturbed trial ends at or below the initial objective."""
        ts = sine_set(n=25)
        results = fit(ts, MOSM, 1, trials=1, seed=0, max_iterations=40, grid_size=200,
                      lognormal_std=0.0, additive_std=0.0)
        assert results[0].final_objective <= results[0].initial_objective

    def test_deterministic(self):
        """Test the same data and seed give identical trial lists."""
        ts = sine_set(n=20)
        a = fit(ts, CSM, 1, trials=2, seed=4, max_iterations=20, grid_size=200)
        b = fit(ts, CSM, 1, trials=2, seed=4, max_iterations=20, grid_size=200)
        assert json.dumps([r.to_dict() for r in a]) == json.dumps([r.to_dict() for r in b])

    def test_trial_seeds_distinct(self):
        """Test derived trial seeds are distinct and reproducible."""
        seeds = trial_seeds(11, 5)
        assert len(set(seeds)) == 5
        assert seeds == trial_seeds(11, 5)

    def test_tracker_records_trials(self):
        """Test every trial is reported to the run tracker."""
        tracker = RunTracker()
        fit(sine_set(n=20), SM_IGP, 1, trials=2, seed=0, max_iterations=10, grid_size=100, tracker=tracker)
        assert len(tracker.trials) == 2

    def test_all_trials_failed(self, mocker):
        """Test training fails with per-trial diagnostics when every trial fails."""
        mocker.patch("comove.trainer.evaluate", side_effect=IllConditionedKernelError("boom", jitter=1e-2))
        with pytest.raises(TrainingFailedError) as excinfo:
            fit(sine_set(n=20), SM_IGP, 1, trials=2, seed=0, grid_size=100, check_gradient=False)
        assert len(excinfo.value.diagnostics) == 2
        assert excinfo.value.diagnostics[0]["jitter"] == pytest.approx(1e-2)

    def test_gradient_check_aborts(self, mocker):
        """Test a failing pre-fit gradient check aborts training."""
        mocker.patch("comove.trainer.gradient_check", return_value=(0.5, None, None))
        with pytest.raises(GradientCheckError) as excinfo:
            fit(sine_set(n=20), SM_IGP, 1, trials=1, grid_size=100)
        assert excinfo.value.relative_error == 0.5

    def test_invalid_trials(self):
        """Test zero trials is rejected."""
        with pytest.raises(InvalidParameterError):
            fit(sine_set(n=20), SM_IGP, 1, trials=0)

    def test_save_and_load(self, tmp_path):
        """Test save_trials/load_trials preserve results."""
        ts = sine_set(n=20)
        spec, report = init_spec(ts, SM_IGP, 1, grid_size=100)
        results = fit(ts, SM_IGP, 1, trials=2, seed=0, max_iterations=10, initial=(spec, report))
        path = save_trials(results, str(tmp_path / "models.json"), report)
        payload = json.loads((tmp_path / "models.json").read_text(encoding="utf-8"))
        assert payload["variant"] == SM_IGP
        assert payload["init"]["estimator"] == "lomb-scargle"
        loaded = load_trials(path)
        assert [r.seed for r in loaded] == [r.seed for r in results]
        assert loaded[0].final_objective == results[0].final_objective
        np.testing.assert_array_equal(loaded[0].model.noise, results[0].model.noise)


@pytest.mark.slow
class TestDelayRecovery:
    """Test that MOSM recovers a known inter-channel delay."""

    def test_five_day_delay(self):
        """Test best-of-5 MOSM puts the follower 5 days behind the leader, within 15%."""
        config = load_config(os.path.join(ROOT, "configs", "synth_delay.json"))
        ts = generate(SyntheticSpec.from_dict(config["synthetic"]))
        results = fit(ts, MOSM, 1, trials=5, seed=5, max_iterations=300, grid_size=500)
        assert abs(effective_delay(results[0].model.spec, 0, 0, 1) - 5.0) <= 0.75

        rho = kernel_cross_correlation(results[0].model)
        np.testing.assert_allclose(rho, rho.T, atol=1e-10)
        np.testing.assert_array_equal(np.diag(rho), 1.0)
        assert np.all(np.abs(rho) <= 1 + 1e-9)
