# -*- coding: utf-8 -*-
"""
Exact multi-output GP inference: negative log-likelihood, MAP objective with
a Gaussian prior on component magnitudes, its analytic gradient, and the
predictive posterior.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.stats import norm

from comove import kernels
from comove.errors import (
    ChannelMismatchError,
    ConfigError,
    DataError,
    DegeneratePriorError,
    IllConditionedKernelError,
    InvalidParameterError,
    UnknownChannelError,
)
from comove.kernels import KernelSpec
from comove.series_store import TimeSeriesSet, invert_values, inverse_slope, training_arrays

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

JITTER_START = 1e-8
JITTER_STOP = 1e-2
JITTER_FACTOR = 10.0
VARIANCE_TOLERANCE = 1e-10
DEFAULT_LEVEL = 0.95
LOG_TWO_PI = np.log(2.0 * np.pi)

MSG_WARNING_JITTER = "Kernel matrix not positive definite; factorized with jitter {jitter:.3e}"
MSG_WARNING_NEGATIVE_VARIANCE = "Clamped {count} negative posterior variance(s), smallest {value:.3e}"
MSG_ERROR_ILL_CONDITIONED = "Cholesky factorization of the {n}x{n} kernel matrix failed"
MSG_ERROR_DEGENERATE_PRIOR = "Channel '{channel}' has max |training value| 0; magnitude prior scale undefined"
MSG_ERROR_EMPTY_CHANNEL_PRIOR = "Channel '{channel}' has no training values; magnitude prior scale undefined"
MSG_ERROR_CHANNELS = "Model has {model} channel(s) but data has {data}"

# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class GPModel:
    """Kernel plus per-channel noise variances and magnitude-prior scales."""

    spec: KernelSpec
    noise: np.ndarray
    prior_scales: np.ndarray
    fit_meta: Dict = field(default_factory=dict)
    channel_names: Tuple[str, ...] = ()

    def __post_init__(self):
        noise = np.array(self.noise, dtype=float).reshape(-1)
        scales = np.array(self.prior_scales, dtype=float).reshape(-1)
        m = self.spec.M
        if noise.shape != (m,) or scales.shape != (m,):
            raise InvalidParameterError(f"noise and prior_scales need one entry per channel ({m})")
        if not np.all(np.isfinite(noise)) or np.any(noise < 0):
            raise InvalidParameterError("noise variances must be finite and >= 0")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise InvalidParameterError("prior scales must be finite and > 0")
        if self.channel_names and len(self.channel_names) != m:
            raise InvalidParameterError(f"channel_names must list {m} channel(s)")
        noise.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "prior_scales", scales)
        object.__setattr__(self, "fit_meta", dict(self.fit_meta))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    def to_dict(self) -> Dict:
        return {
            "channels": list(self.channel_names),
            "spec": self.spec.to_dict(),
            "noise": self.noise.tolist(),
            "prior_scales": self.prior_scales.tolist(),
            "fit_meta": self.fit_meta,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "GPModel":
        return cls(
            spec=KernelSpec.from_dict(data["spec"]),
            noise=data["noise"],
            prior_scales=data["prior_scales"],
            fit_meta=data.get("fit_meta", {}),
            channel_names=tuple(data.get("channels", ())),
        )


@dataclass(frozen=True, eq=False)
class Posterior:
    """Predictive mean and variance at (channel, t) query points."""

    channels: np.ndarray
    t: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    names: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return int(self.mean.size)


@dataclass(frozen=True, eq=False)
class Factor:
    """Lower Cholesky factor of K + jitter * I."""

    lower: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return int(self.lower.shape[0])

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(b, dtype=float)
        return scipy.linalg.cho_solve((self.lower, True), b)

    def half_solve(self, b: np.ndarray) -> np.ndarray:
        """L^{-1} b."""
        if self.n == 0:
            return np.zeros_like(b, dtype=float)
        return scipy.linalg.solve_triangular(self.lower, b, lower=True)

    def log_det(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.lower))))


@dataclass
class ModelGradient:
    """Gradient of the MAP objective in natural (model) parameters."""

    components: List[Dict[str, np.ndarray]]
    noise: np.ndarray


@dataclass
class ObjectiveResult:
    value: float
    nll: float
    penalty: float
    jitter: float
    gradient: Optional[ModelGradient] = None

# ============================================================================
# FACTORIZATION
# ============================================================================

def factorize(K: np.ndarray) -> Factor:
    """
    Cholesky factor with escalating jitter: a plain attempt first, then
    1e-8 ... 1e-2 times mean(diag K) in factors of 10.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if n == 0:
        return Factor(lower=np.zeros((0, 0)), jitter=0.0)
    if not np.all(np.isfinite(K)):
        raise IllConditionedKernelError(MSG_ERROR_ILL_CONDITIONED.format(n=n), jitter=0.0)

    scale = float(np.mean(np.diag(K)))
    if scale <= 0:
        scale = 1.0
    jitter = 0.0
    level = JITTER_START
    while True:
        try:
            lower, _ = scipy.linalg.cho_factor(K + jitter * np.eye(n), lower=True, check_finite=False)
            if not np.all(np.isfinite(lower)):
                raise np.linalg.LinAlgError("non-finite factor")
            if jitter > 0:
                logger.debug(MSG_WARNING_JITTER.format(jitter=jitter))
            return Factor(lower=np.tril(lower), jitter=jitter)
        except np.linalg.LinAlgError:
            if level > JITTER_STOP * (1 + 1e-9):
                raise IllConditionedKernelError(MSG_ERROR_ILL_CONDITIONED.format(n=n), jitter=jitter)
            jitter = level * scale
            level *= JITTER_FACTOR

# ============================================================================
# OBJECTIVE
# ============================================================================

def prior_scales(ts: TimeSeriesSet) -> np.ndarray:
    """Per-channel prior std: max |training value| on the training scale."""
    scales = []
    for ch, idx in zip(ts.channels, ts.train_mask):
        if idx.size == 0:
            raise DegeneratePriorError(MSG_ERROR_EMPTY_CHANNEL_PRIOR.format(channel=ch.name))
        s = float(np.max(np.abs(ch.y[idx])))
        if s == 0:
            raise DegeneratePriorError(MSG_ERROR_DEGENERATE_PRIOR.format(channel=ch.name))
        scales.append(s)
    return np.array(scales)


def magnitude_penalty(spec: KernelSpec, scales: np.ndarray) -> float:
    return float(sum(np.sum(c.w ** 2 / (2.0 * scales ** 2)) for c in spec.components))


def evaluate(spec: KernelSpec, noise: np.ndarray, scales: np.ndarray,
             ch: np.ndarray, t: np.ndarray, y: np.ndarray, with_gradient: bool = False) -> ObjectiveResult:
    """MAP objective (and optionally its gradient) on flattened training arrays."""
    noise = np.asarray(noise, dtype=float)
    scales = np.asarray(scales, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    factor = factorize(kernels.gram(spec, ch, t, noise))
    alpha = factor.solve(y)
    nll = float(0.5 * y @ alpha + 0.5 * factor.log_det() + 0.5 * n * LOG_TWO_PI)
    penalty = magnitude_penalty(spec, scales)
    result = ObjectiveResult(value=nll + penalty, nll=nll, penalty=penalty, jitter=factor.jitter)
    if not with_gradient:
        return result

    G = 0.5 * (factor.solve(np.eye(n)) - np.outer(alpha, alpha))
    components = kernels.component_gradients(spec, ch, t, G)
    for comp, grad in zip(spec.components, components):
        grad["w"] = grad["w"] + comp.w / scales ** 2
    noise_grad = np.bincount(np.asarray(ch, dtype=int), weights=np.diag(G), minlength=spec.M).astype(float)
    result.gradient = ModelGradient(components=components, noise=noise_grad)
    return result


def _training(model: GPModel, data: TimeSeriesSet):
    if data.M != model.spec.M:
        raise ChannelMismatchError(MSG_ERROR_CHANNELS.format(model=model.spec.M, data=data.M))
    return training_arrays(data)


def nll(model: GPModel, data: TimeSeriesSet) -> float:
    """Negative log marginal likelihood of the training points."""
    ch, t, y = _training(model, data)
    return evaluate(model.spec, model.noise, model.prior_scales, ch, t, y).nll


def map_objective(model: GPModel, data: TimeSeriesSet) -> float:
    """nll plus sum over components and channels of w^2 / (2 s_i^2)."""
    ch, t, y = _training(model, data)
    return evaluate(model.spec, model.noise, model.prior_scales, ch, t, y).value


def map_objective_and_grad(model: GPModel, data: TimeSeriesSet) -> Tuple[float, ModelGradient]:
    ch, t, y = _training(model, data)
    result = evaluate(model.spec, model.noise, model.prior_scales, ch, t, y, with_gradient=True)
    return result.value, result.gradient

# ============================================================================
# POSTERIOR
# ============================================================================

def predict_arrays(spec: KernelSpec, noise: np.ndarray, ch_train, t_train, y_train,
                   ch_query, t_query) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance (including query-channel noise)."""
    noise = np.asarray(noise, dtype=float)
    ch_query = np.asarray(ch_query, dtype=int).reshape(-1)
    prior_var = np.diag(kernels.kernel_at_zero(spec))[ch_query] + noise[ch_query]
    y_train = np.asarray(y_train, dtype=float)
    if y_train.size == 0:
        return np.zeros(ch_query.size), prior_var

    factor = factorize(kernels.gram(spec, ch_train, t_train, noise))
    K_star = kernels.cross_gram(spec, ch_train, t_train, ch_query, t_query)
    mean = K_star.T @ factor.solve(y_train)
    V = factor.half_solve(K_star)
    variance = prior_var - np.sum(V ** 2, axis=0)
    negative = variance < -VARIANCE_TOLERANCE
    if negative.any():
        logger.warning(MSG_WARNING_NEGATIVE_VARIANCE.format(count=int(negative.sum()), value=float(variance.min())))
    return mean, np.maximum(variance, 0.0)


def resolve_query(query: Sequence[Tuple[Union[int, str], float]], names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Turn (channel name or index, t) pairs into index and time arrays."""
    channels, times = [], []
    for channel, t in query:
        if isinstance(channel, str):
            if channel not in names:
                raise UnknownChannelError(f"Unknown channel '{channel}' (known: {', '.join(names)})")
            channel = list(names).index(channel)
        elif not 0 <= int(channel) < len(names):
            raise UnknownChannelError(f"Channel index {channel} out of range")
        channels.append(int(channel))
        times.append(t)
    return np.array(channels, dtype=int), np.array(times, dtype=float)


def posterior(model: GPModel, data: TimeSeriesSet, query) -> Posterior:
    """
    Condition on the training points of `data` and predict at `query`, a
    sequence of (channel, t) pairs with channels given by name or index.
    An empty training set yields the prior.
    """
    ch, t, y = _training(model, data)
    q_ch, q_t = resolve_query(query, data.names)
    if not np.all(np.isfinite(q_t)):
        raise DataError("query timestamps must be finite")
    mean, variance = predict_arrays(model.spec, model.noise, ch, t, y, q_ch, q_t)
    return Posterior(channels=q_ch, t=q_t, mean=mean, variance=variance, names=tuple(data.names))


def z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf((1.0 + level) / 2.0))


def confidence_band(p: Posterior, level: float = DEFAULT_LEVEL) -> Tuple[np.ndarray, np.ndarray]:
    """mean -/+ z * sqrt(variance) with z the two-sided normal quantile."""
    half = z_value(level) * np.sqrt(p.variance)
    return p.mean - half, p.mean + half


def posterior_to_frame(p: Posterior, level: float = DEFAULT_LEVEL,
                       data: Optional[TimeSeriesSet] = None, scale: str = "transformed") -> pd.DataFrame:
    """
    Table with columns channel, t, mean, variance, lo<level>, hi<level>.
    With scale="original" values go back through each channel's inverse
    transforms; the variance is carried by the delta method and the band
    endpoints are mapped directly.
    """
    lo, hi = confidence_band(p, level)
    mean, variance = p.mean.copy(), p.variance.copy()
    if scale == "original":
        if data is None:
            raise ConfigError("original-scale output needs the data set's transform log")
        for i, ch in enumerate(data.channels):
            sel = p.channels == i
            if not sel.any() or not ch.transforms:
                continue
            slope = inverse_slope(ch, p.t[sel], p.mean[sel])
            mean[sel] = invert_values(ch, p.t[sel], p.mean[sel])
            variance[sel] = slope ** 2 * p.variance[sel]
            lo[sel] = invert_values(ch, p.t[sel], lo[sel])
            hi[sel] = invert_values(ch, p.t[sel], hi[sel])
    tag = f"{int(round(level * 100))}"
    names = [p.names[c] if p.names else str(c) for c in p.channels]
    return pd.DataFrame({
        "channel": names,
        "t": p.t.reshape(len(p), -1)[:, 0] if p.t.ndim > 1 else p.t,
        "mean": mean,
        "variance": variance,
        f"lo{tag}": lo,
        f"hi{tag}": hi,
    })


def write_posterior_csv(frame: pd.DataFrame, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path

# ============================================================================
# PERSISTENCE
# ============================================================================

def save_model(model: GPModel, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def load_model(path: str) -> GPModel:
    """Load a model file; a trial list (models.json) yields its best model."""
    if not os.path.exists(path):
        raise DataError(f"Model file {path} not found")
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    if isinstance(data, dict) and "trials" in data:
        if not data["trials"]:
            raise DataError(f"Model file {path} holds no trials")
        data = data["trials"][0]["model"]
    return GPModel.from_dict(data)
