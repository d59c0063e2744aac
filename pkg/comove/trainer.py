# -*- coding: utf-8 -*-
"""
Hyperparameter initialization from Lomb-Scargle periodogram peaks and
multi-restart MAP fitting with L-BFGS-B.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize
import scipy.signal

from comove import kernels
from comove.errors import (
    DataError,
    DegenerateChannelError,
    GradientCheckError,
    InsufficientDataError,
    InvalidParameterError,
    NumericalError,
    TrainingFailedError,
)
from comove.gp_engine import GPModel, evaluate, prior_scales
from comove.kernels import KernelSpec, SpectralComponent
from comove.series_store import Channel, TimeSeriesSet, training_arrays

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

ESTIMATOR_LABEL = "lomb-scargle"
MIN_PSD_POINTS = 4
PEAK_MIN_DISTANCE = 2
PEAK_REL_HEIGHT = 0.5
NOISE_FRACTION = 0.1
FAILURE_PENALTY = 1e25
GRADIENT_STEP = 1e-5
GRADIENT_TOLERANCE = 1e-3

DEFAULT_GRID_SIZE = 1000
DEFAULT_MAX_ITERATIONS = 5000
DEFAULT_LOGNORMAL_STD = 0.25
DEFAULT_ADDITIVE_STD = 0.1

# Coordinate kinds of the unconstrained vector
KIND_LOG = "log"            # positive, stored as log
KIND_POSITIVE = "positive"  # nonnegative identity (frequency means)
KIND_SIGNED = "signed"      # SM-LMC coefficients
KIND_SHIFT = "shift"        # delays and phases

MSG_INFO_INIT = "Initialized {variant} (Q={Q}) from {estimator} peaks: {padded} padded component(s)"
MSG_INFO_TRIAL = "Trial {index} (seed {seed}): objective {initial:.6g} -> {final:.6g} in {iterations} iteration(s)"
MSG_INFO_GRADIENT_CHECK = "Gradient check passed (relative error {error:.2e})"
MSG_WARNING_PADDED = "Channel '{channel}': only {found} resolvable peak(s) for Q={Q}; padding with random frequencies"
MSG_WARNING_TRIAL_FAILED = "Trial {index} (seed {seed}) failed: {error}"
MSG_ERROR_TOO_FEW_POINTS = "Channel '{channel}' has {count} training point(s); the periodogram needs at least {min}"
MSG_ERROR_ZERO_VARIANCE = "Channel '{channel}' has zero variance over its training points"
MSG_ERROR_GRADIENT = "Analytic gradient disagrees with finite differences (relative error {error:.3e} > {tol:.1e})"
MSG_ERROR_ALL_FAILED = "All {trials} training trial(s) failed"

# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class PSDEstimate:
    frequency: np.ndarray  # cycles/day
    power: np.ndarray
    f_max: float

    @property
    def spacing(self) -> float:
        return float(self.frequency[1] - self.frequency[0]) if self.frequency.size > 1 else self.f_max


@dataclass(frozen=True, eq=False)
class ChannelInit:
    name: str
    psd: PSDEstimate
    peaks: np.ndarray
    half_widths: np.ndarray
    padded: Tuple[bool, ...]
    variance: float

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "f_max": self.psd.f_max,
            "peaks": self.peaks.tolist(),
            "half_widths": self.half_widths.tolist(),
            "padded": list(self.padded),
            "variance": self.variance,
        }


@dataclass(frozen=True, eq=False)
class InitReport:
    """Per-channel spectral estimates behind an initial KernelSpec."""

    variant: str
    Q: int
    channels: Tuple[ChannelInit, ...]
    noise: np.ndarray
    estimator: str = ESTIMATOR_LABEL
    pooled_peaks: Optional[np.ndarray] = None

    @property
    def padded_count(self) -> int:
        return int(sum(sum(c.padded) for c in self.channels))

    def to_dict(self) -> Dict:
        return {
            "estimator": self.estimator,
            "variant": self.variant,
            "Q": self.Q,
            "channels": [c.to_dict() for c in self.channels],
            "pooled_peaks": None if self.pooled_peaks is None else self.pooled_peaks.tolist(),
            "noise": self.noise.tolist(),
        }


@dataclass(eq=False)
class TrialResult:
    index: int
    seed: int
    initial_objective: float
    final_objective: float
    model: GPModel
    converged: bool
    iterations: int
    message: str = ""
    jitter: float = 0.0
    perturbation: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
            "jitter": self.jitter,
            "perturbation": self.perturbation,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TrialResult":
        return cls(
            index=int(data["index"]),
            seed=int(data["seed"]),
            initial_objective=float(data["initial_objective"]),
            final_objective=float(data["final_objective"]),
            model=GPModel.from_dict(data["model"]),
            converged=bool(data["converged"]),
            iterations=int(data["iterations"]),
            message=data.get("message", ""),
            jitter=float(data.get("jitter", 0.0)),
            perturbation=data.get("perturbation", {}),
        )

# ============================================================================
# SPECTRAL INITIALIZATION
# ============================================================================

def estimate_psd(ch: Channel, grid_size: int = DEFAULT_GRID_SIZE,
                 train_index: Optional[Sequence[int]] = None) -> PSDEstimate:
    """
    Lomb-Scargle periodogram of the mean-subtracted training values on the
    uniform grid f_max * (1..G) / G, f_max = 0.5 / median spacing.
    """
    idx = np.arange(len(ch)) if train_index is None else np.asarray(train_index, dtype=int)
    if idx.size < MIN_PSD_POINTS:
        raise InsufficientDataError(MSG_ERROR_TOO_FEW_POINTS.format(
            channel=ch.name, count=idx.size, min=MIN_PSD_POINTS))
    t = ch.t[idx]
    y = ch.y[idx] - np.mean(ch.y[idx])
    f_max = 0.5 / float(np.median(np.diff(t)))
    frequency = f_max * np.arange(1, grid_size + 1) / grid_size
    with np.errstate(divide="ignore", invalid="ignore"):
        power = scipy.signal.lombscargle(t, y, 2.0 * np.pi * frequency)
    return PSDEstimate(frequency=frequency, power=np.nan_to_num(power), f_max=f_max)


def _ranked_peaks(psd: PSDEstimate) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local maxima by descending power: (frequency, half width, power)."""
    peaks, _ = scipy.signal.find_peaks(psd.power, distance=PEAK_MIN_DISTANCE)
    peaks = peaks[psd.power[peaks] > 0]
    if peaks.size == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    widths = scipy.signal.peak_widths(psd.power, peaks, rel_height=PEAK_REL_HEIGHT)[0]
    order = np.argsort(-psd.power[peaks], kind="stable")
    peaks, widths = peaks[order], widths[order]
    return psd.frequency[peaks], 0.5 * widths * psd.spacing, psd.power[peaks]


def _scale_from_width(half_width: float, f_max: float, Q: int) -> float:
    """
    Starting sigma from a peak half-width in cycles/day, squared as is.

    The kernel reads sigma on the angular scale, (2 pi)^2 times a spectral
    variance in cycles^2, so this start is a narrower spectrum (wider time
    envelope) than the peak itself. The optimizer refines it.
    """
    if not np.isfinite(half_width) or half_width <= 0:
        return (f_max / (2.0 * Q)) ** 2
    return float(half_width ** 2)


def _pad(found: np.ndarray, widths: np.ndarray, Q: int, f_max: float,
         rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, Tuple[bool, ...]]:
    """Keep the Q strongest peaks and draw the missing ones from (0, f_max]."""
    freqs = list(found[:Q])
    half = list(widths[:Q])
    padded = [False] * len(freqs)
    while len(freqs) < Q:
        freqs.append(f_max * (1.0 - rng.random()))
        half.append(np.nan)
        padded.append(True)
    return np.array(freqs), np.array(half), tuple(padded)


def init_spec(ts: TimeSeriesSet, variant: str, Q: int, grid_size: int = DEFAULT_GRID_SIZE,
              seed: int = 0) -> Tuple[KernelSpec, InitReport]:
    """
    Initial kernel from per-channel periodogram peaks.

    Means come from the Q strongest peaks (pooled across channels, ranked by
    power relative to each channel's total, for tied-spectrum variants),
    scales from squared peak half-widths, weights from std / Q, delays and
    phases from zero; noise starts at a tenth of each channel's variance.
    """
    variant = kernels.normalize_variant(variant)
    if Q < 1:
        raise InvalidParameterError(f"Q must be >= 1, got {Q}")
    rng = np.random.default_rng(seed)
    psds, stds, variances = [], [], []
    for ch, idx in zip(ts.channels, ts.train_mask):
        psd = estimate_psd(ch, grid_size, idx)
        std = float(np.std(ch.y[idx]))
        if std == 0:
            raise DegenerateChannelError(MSG_ERROR_ZERO_VARIANCE.format(channel=ch.name))
        psds.append(psd)
        stds.append(std)
        variances.append(std ** 2)

    m = ts.M
    weights = np.array(stds) / Q
    channel_inits = []
    pooled = None

    if kernels.has_shared_spectrum(variant):
        f_max = min(p.f_max for p in psds)
        tolerance = PEAK_MIN_DISTANCE * max(p.spacing for p in psds)
        candidates = []
        for i, psd in enumerate(psds):
            freqs, half, power = _ranked_peaks(psd)
            total = float(np.sum(psd.power)) or 1.0
            candidates.extend((p / total, f, h, i) for f, h, p in zip(freqs, half, power) if f <= f_max)
        candidates.sort(key=lambda c: (-c[0], c[3], c[1]))
        chosen_f, chosen_h = [], []
        for _, f, h, _ in candidates:
            if all(abs(f - g) >= tolerance for g in chosen_f):
                chosen_f.append(f)
                chosen_h.append(h)
            if len(chosen_f) == Q:
                break
        if len(chosen_f) < Q:
            logger.warning(MSG_WARNING_PADDED.format(channel="*", found=len(chosen_f), Q=Q))
        freqs, half, padded = _pad(np.array(chosen_f), np.array(chosen_h), Q, f_max, rng)
        pooled = freqs
        scales = np.array([_scale_from_width(h, f_max, Q) for h in half])
        components = [
            SpectralComponent.build(weights, np.full((m, 1), freqs[q]), np.full((m, 1), scales[q]))
            for q in range(Q)
        ]
        for ch, psd, var in zip(ts.channels, psds, variances):
            channel_inits.append(ChannelInit(ch.name, psd, freqs, half, padded, var))
    else:
        mu = np.zeros((Q, m))
        sigma = np.zeros((Q, m))
        for i, (ch, psd, var) in enumerate(zip(ts.channels, psds, variances)):
            found, widths, _ = _ranked_peaks(psd)
            if found.size < Q:
                logger.warning(MSG_WARNING_PADDED.format(channel=ch.name, found=found.size, Q=Q))
            freqs, half, padded = _pad(found, widths, Q, psd.f_max, rng)
            mu[:, i] = freqs
            sigma[:, i] = [_scale_from_width(h, psd.f_max, Q) for h in half]
            channel_inits.append(ChannelInit(ch.name, psd, freqs, half, padded, var))
        components = [SpectralComponent.build(weights, mu[q][:, None], sigma[q][:, None]) for q in range(Q)]

    spec = KernelSpec(variant=variant, components=tuple(components))
    report = InitReport(variant=variant, Q=Q, channels=tuple(channel_inits),
                        noise=NOISE_FRACTION * np.array(variances), pooled_peaks=pooled)
    logger.info(MSG_INFO_INIT.format(variant=variant, Q=Q, estimator=ESTIMATOR_LABEL,
                                     padded=report.padded_count if pooled is None else sum(padded)))
    return spec, report

# ============================================================================
# UNCONSTRAINED PARAMETRIZATION
# ============================================================================

@dataclass(frozen=True)
class ParameterLayout:
    """
    Coordinate layout of the unconstrained vector. Per component: weights
    (M), means and scales (M*N each, or N when tied), delays (M*N, MOSM only),
    phases (M, MOSM and CSM); then M noise variances.
    """

    variant: str
    Q: int
    M: int
    N: int = 1

    @classmethod
    def for_spec(cls, spec: KernelSpec) -> "ParameterLayout":
        return cls(variant=spec.variant, Q=spec.Q, M=spec.M, N=spec.N)

    def blocks(self) -> List[Tuple[str, int, str]]:
        """(parameter, coordinate count, kind) for one component."""
        spectral = self.N if kernels.has_shared_spectrum(self.variant) else self.M * self.N
        weight_kind = KIND_SIGNED if kernels.has_signed_weights(self.variant) else KIND_LOG
        blocks = [("w", self.M, weight_kind), ("mu", spectral, KIND_POSITIVE), ("sigma", spectral, KIND_LOG)]
        if kernels.has_delays(self.variant):
            blocks.append(("theta", self.M * self.N, KIND_SHIFT))
        if kernels.has_phases(self.variant):
            blocks.append(("phi", self.M, KIND_SHIFT))
        return blocks

    @property
    def size(self) -> int:
        return self.Q * sum(count for _, count, _ in self.blocks()) + self.M

    def kinds(self) -> np.ndarray:
        per_component = [kind for _, count, kind in self.blocks() for _ in range(count)]
        return np.array(per_component * self.Q + [KIND_LOG] * self.M)

    def bounds(self) -> List[Tuple[Optional[float], Optional[float]]]:
        return [(0.0, None) if kind == KIND_POSITIVE else (None, None) for kind in self.kinds()]

    def pack(self, components: Sequence[Dict[str, np.ndarray]], noise: np.ndarray) -> np.ndarray:
        """Natural-scale values (or gradients) in layout order."""
        shared = kernels.has_shared_spectrum(self.variant)
        parts = []
        for comp in components:
            for name, _, _ in self.blocks():
                values = np.asarray(comp[name], dtype=float)
                if shared and name in ("mu", "sigma"):
                    values = values[0]
                parts.append(values.reshape(-1))
        parts.append(np.asarray(noise, dtype=float).reshape(-1))
        return np.concatenate(parts)

    def unpack(self, natural: np.ndarray) -> Tuple[KernelSpec, np.ndarray]:
        shared = kernels.has_shared_spectrum(self.variant)
        pos = 0
        components = []
        for _ in range(self.Q):
            values = {}
            for name, count, _ in self.blocks():
                chunk = natural[pos:pos + count]
                pos += count
                if name in ("mu", "sigma", "theta"):
                    chunk = np.tile(chunk, (self.M, 1)) if shared and name != "theta" else chunk.reshape(self.M, self.N)
                values[name] = chunk
            components.append(SpectralComponent.build(
                values["w"], values["mu"], values["sigma"], values.get("theta"), values.get("phi"), n_dims=self.N))
        noise = natural[pos:pos + self.M]
        return KernelSpec(variant=self.variant, components=tuple(components)), noise


def _component_values(comp: SpectralComponent) -> Dict[str, np.ndarray]:
    return {"w": comp.w, "mu": comp.mu, "sigma": comp.sigma, "theta": comp.theta, "phi": comp.phi}


def to_unconstrained(spec: KernelSpec, noise: Sequence[float]) -> np.ndarray:
    """Log for positive parameters, identity for the rest."""
    layout = ParameterLayout.for_spec(spec)
    natural = layout.pack([_component_values(c) for c in spec.components], noise)
    logs = layout.kinds() == KIND_LOG
    with np.errstate(divide="ignore"):
        natural[logs] = np.log(np.maximum(natural[logs], np.finfo(float).tiny))
    return natural


def from_unconstrained(vector: Sequence[float], layout: ParameterLayout) -> Tuple[KernelSpec, np.ndarray]:
    x = np.asarray(vector, dtype=float)
    if x.shape != (layout.size,):
        raise InvalidParameterError(f"Parameter vector must have {layout.size} entries, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("Parameter vector contains non-finite entries")
    natural = x.copy()
    logs = layout.kinds() == KIND_LOG
    with np.errstate(over="ignore"):
        natural[logs] = np.exp(natural[logs])
    return layout.unpack(natural)


def objective_function(ts: TimeSeriesSet, layout: ParameterLayout,
                       scales: np.ndarray) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """
    f(x) -> (MAP objective, gradient) on the unconstrained scale; numerical
    failures return a large penalty with a zero gradient.
    """
    ch, t, y = training_arrays(ts)
    kinds = layout.kinds()
    logs = kinds == KIND_LOG

    def fun(x: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                spec, noise = from_unconstrained(x, layout)
                result = evaluate(spec, noise, scales, ch, t, y, with_gradient=True)
        except NumericalError:
            return FAILURE_PENALTY, np.zeros_like(x)
        grad = layout.pack(result.gradient.components, result.gradient.noise)
        natural = layout.pack([_component_values(c) for c in spec.components], noise)
        grad[logs] = grad[logs] * natural[logs]
        if not (np.isfinite(result.value) and np.all(np.isfinite(grad))):
            return FAILURE_PENALTY, np.zeros_like(x)
        return float(result.value), grad

    return fun


def gradient_check(fun: Callable[[np.ndarray], Tuple[float, np.ndarray]], x: np.ndarray,
                   step: float = GRADIENT_STEP) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Compare the analytic gradient with central differences; returns
    (||g - g_fd|| / max(||g_fd||, 1), g, g_fd).
    """
    x = np.asarray(x, dtype=float)
    _, g = fun(x)
    g_fd = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        g_fd[k] = (fun(x + e)[0] - fun(x - e)[0]) / (2.0 * step)
    error = float(np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1.0))
    return error, g, g_fd

# ============================================================================
# TRAINING
# ============================================================================

def perturb(x: np.ndarray, layout: ParameterLayout, rng: np.random.Generator,
            lognormal_std: float, additive_std: float) -> np.ndarray:
    """Log-normal noise on positive and SM-LMC coordinates, additive noise on delays and phases."""
    kinds = layout.kinds()
    z = rng.standard_normal(x.size)
    out = x.copy()
    logs = kinds == KIND_LOG
    scaled = (kinds == KIND_POSITIVE) | (kinds == KIND_SIGNED)
    shifts = kinds == KIND_SHIFT
    out[logs] += lognormal_std * z[logs]
    out[scaled] *= np.exp(lognormal_std * z[scaled])
    out[shifts] += additive_std * z[shifts]
    return out


def trial_seeds(seed: int, trials: int) -> List[int]:
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in np.random.SeedSequence(seed).spawn(trials)]


def fit(ts: TimeSeriesSet, variant: str, Q: int, trials: int = 5, seed: int = 0,
        max_iterations: int = DEFAULT_MAX_ITERATIONS, grid_size: int = DEFAULT_GRID_SIZE,
        lognormal_std: float = DEFAULT_LOGNORMAL_STD, additive_std: float = DEFAULT_ADDITIVE_STD,
        check_gradient: bool = True, tracker=None,
        initial: Optional[Tuple[KernelSpec, InitReport]] = None) -> List[TrialResult]:
    """
    Fit `trials` perturbed restarts of the periodogram initialization by
    L-BFGS-B on the MAP objective. Results are sorted by final objective
    (ties by trial index); failed trials are dropped with a warning.
    """
    if trials < 1:
        raise InvalidParameterError(f"trials must be >= 1, got {trials}")
    scales = prior_scales(ts)
    spec0, report = initial if initial is not None else init_spec(ts, variant, Q, grid_size=grid_size, seed=seed)
    layout = ParameterLayout.for_spec(spec0)
    x_init = to_unconstrained(spec0, report.noise)
    fun = objective_function(ts, layout, scales)
    ch, t, y = training_arrays(ts)

    if check_gradient:
        error, _, _ = gradient_check(fun, x_init)
        if error > GRADIENT_TOLERANCE:
            raise GradientCheckError(MSG_ERROR_GRADIENT.format(error=error, tol=GRADIENT_TOLERANCE), error)
        logger.info(MSG_INFO_GRADIENT_CHECK.format(error=error))

    perturbation = {"lognormal_std": lognormal_std, "additive_std": additive_std}
    results, diagnostics = [], []
    for index, trial_seed in enumerate(trial_seeds(seed, trials)):
        rng = np.random.default_rng(trial_seed)
        x0 = perturb(x_init, layout, rng, lognormal_std, additive_std)
        try:
            spec_start, noise_start = from_unconstrained(x0, layout)
            start_value = evaluate(spec_start, noise_start, scales, ch, t, y).value
            res = scipy.optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=layout.bounds(),
                                          options={"maxiter": max_iterations})
            x_best = res.x if res.fun <= start_value else x0
            spec_best, noise_best = from_unconstrained(x_best, layout)
            final = evaluate(spec_best, noise_best, scales, ch, t, y)
        except NumericalError as e:
            logger.warning(MSG_WARNING_TRIAL_FAILED.format(index=index, seed=trial_seed, error=e))
            diagnostics.append({"index": index, "seed": trial_seed, "error": str(e),
                                "jitter": getattr(e, "jitter", None)})
            continue

        iterations = int(min(res.nit, max_iterations))
        model = GPModel(
            spec=spec_best,
            noise=noise_best,
            prior_scales=scales,
            fit_meta={"nll": final.nll, "objective": final.value, "seed": trial_seed,
                      "iterations": iterations, "jitter": final.jitter},
            channel_names=tuple(ts.names),
        )
        result = TrialResult(index=index, seed=trial_seed, initial_objective=float(start_value),
                             final_objective=float(final.value), model=model, converged=bool(res.success),
                             iterations=iterations, message=str(res.message), jitter=final.jitter,
                             perturbation=dict(perturbation))
        logger.info(MSG_INFO_TRIAL.format(index=index, seed=trial_seed, initial=result.initial_objective,
                                          final=result.final_objective, iterations=iterations))
        if tracker is not None:
            tracker.record_trial(index, trial_seed, result.initial_objective, result.final_objective,
                                 iterations, result.converged)
        results.append(result)

    if not results:
        raise TrainingFailedError(MSG_ERROR_ALL_FAILED.format(trials=trials), diagnostics)
    results.sort(key=lambda r: (r.final_objective, r.index))
    return results

# ============================================================================
# PERSISTENCE
# ============================================================================

def save_trials(trials: Sequence[TrialResult], path: str, report: Optional[InitReport] = None) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = {
        "variant": trials[0].model.spec.variant if trials else None,
        "Q": trials[0].model.spec.Q if trials else None,
        "init": report.to_dict() if report is not None else None,
        "trials": [t.to_dict() for t in trials],
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def load_trials(path: str) -> List[TrialResult]:
    if not os.path.exists(path):
        raise DataError(f"Model file {path} not found")
    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    return [TrialResult.from_dict(t) for t in payload.get("trials", [])]
