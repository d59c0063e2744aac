# -*- coding: utf-8 -*-
"""
Cross-correlation matrices (kernel-implied and empirical), normalized error
metrics and trial-aggregated metric reports.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from comove import kernels
from comove.errors import (
    ConfigError,
    DataError,
    DegenerateChannelError,
    EmptyReportError,
    NormalizationUndefinedError,
)
from comove.gp_engine import GPModel, predict_arrays
from comove.series_store import TimeSeriesSet, invert_values, training_arrays

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

DIAGONAL_SQRT = "diagonal-sqrt"
WEIGHT_SUM = "weight-sum"
NORMALIZATIONS = (DIAGONAL_SQRT, WEIGHT_SUM)

MIN_OVERLAP = 3
CHANNEL_WEIGHTING = "equal"
METRIC_NMAE = "nMAE"
METRIC_NRMSE = "nRMSE"
METRICS_COLUMNS = ["variant", "experiment", "metric", "mean", "std", "summary", "n_train", "n_test", "trials"]

MSG_WARNING_OVERLAP = "Channels '{a}' and '{b}' share {count} timestamp(s); empirical correlation needs {min}"
MSG_WARNING_CONSTANT = "Channel '{a}' or '{b}' is constant on shared timestamps; empirical correlation undefined"
MSG_WARNING_FALLBACK = "Test mean of channel '{channel}' is 0; reporting unnormalized errors for it"
MSG_ERROR_NORMALIZATION = "Unknown normalization '{mode}' (expected one of {modes})"
MSG_ERROR_DEGENERATE = "Channel '{channel}' has k_ii(0) = {value:.3e} <= 0"
MSG_ERROR_ZERO_MEAN = "mean of ground truth is 0; normalized error undefined"
MSG_ERROR_LENGTHS = "pred and truth must have equal nonzero length, got {pred} and {truth}"
MSG_ERROR_EMPTY_TEST = "No test points to evaluate"

# ============================================================================
# CORRELATION
# ============================================================================

@dataclass(frozen=True, eq=False)
class CorrelationReport:
    labels: Tuple[str, ...]
    kernel_corr: np.ndarray
    empirical_corr: np.ndarray
    normalization: str = DIAGONAL_SQRT

    def to_dict(self) -> Dict:
        def clean(matrix):
            return [[None if math.isnan(v) else float(v) for v in row] for row in matrix]

        return {
            "labels": list(self.labels),
            "normalization": self.normalization,
            "empirical_scale": "training",
            "kernel_corr": clean(self.kernel_corr),
            "empirical_corr": clean(self.empirical_corr),
        }

    def save_json(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
            f.write("\n")
        return path

    def save_csv(self, directory: str) -> List[str]:
        """Write kernel_correlation.csv and empirical_correlation.csv."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for kind, matrix in (("kernel", self.kernel_corr), ("empirical", self.empirical_corr)):
            path = os.path.join(directory, f"{kind}_correlation.csv")
            frame = pd.DataFrame(matrix, index=list(self.labels), columns=list(self.labels))
            frame.to_csv(path, index_label="channel", float_format="%.17g", na_rep="NaN")
            paths.append(path)
        return paths


def kernel_cross_correlation(model: GPModel, mode: str = DIAGONAL_SQRT) -> np.ndarray:
    """
    Normalized k_ij(0). diagonal-sqrt divides by sqrt(k_ii(0) k_jj(0));
    weight-sum divides by sqrt of the products of per-channel summed
    magnitudes sum_q alpha_ii.

    theta_ii and phi_ii are zero, so sum_q alpha_ii is k_ii(0) for every
    variant and the two modes give the same matrix. weight-sum is kept as an
    accepted config spelling.
    """
    if mode not in NORMALIZATIONS:
        raise ConfigError(MSG_ERROR_NORMALIZATION.format(mode=mode, modes=", ".join(NORMALIZATIONS)))
    spec = model.spec
    k0 = kernels.kernel_at_zero(spec)
    if mode == DIAGONAL_SQRT:
        scale = np.diag(k0).copy()
    else:
        scale = sum(np.diag(kernels.pair_params(spec, q)["alpha"]) for q in range(spec.Q))
    for i, value in enumerate(scale):
        if not value > 0:
            name = model.channel_names[i] if model.channel_names else str(i)
            raise DegenerateChannelError(MSG_ERROR_DEGENERATE.format(channel=name, value=value))
    rho = k0 / np.sqrt(np.outer(scale, scale))
    rho = np.triu(rho) + np.triu(rho, 1).T
    if mode == DIAGONAL_SQRT:
        np.fill_diagonal(rho, 1.0)
    return rho


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    denominator = math.sqrt(float(da @ da) * float(db @ db))
    if denominator == 0:
        return float("nan")
    return float(np.clip((da @ db) / denominator, -1.0, 1.0))


def empirical_cross_correlation(ts: TimeSeriesSet) -> np.ndarray:
    """
    Pearson correlation of co-timestamped observations for every channel
    pair (strict inner join on t, all observations). Pairs with fewer than
    three shared timestamps are NaN.
    """
    m = ts.M
    rho = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            a, b = ts.channels[i], ts.channels[j]
            _, ia, ib = np.intersect1d(a.t, b.t, assume_unique=True, return_indices=True)
            if ia.size < MIN_OVERLAP:
                logger.warning(MSG_WARNING_OVERLAP.format(a=a.name, b=b.name, count=ia.size, min=MIN_OVERLAP))
                value = float("nan")
            else:
                value = _pearson(a.y[ia], b.y[ib])
                if math.isnan(value):
                    logger.warning(MSG_WARNING_CONSTANT.format(a=a.name, b=b.name))
            rho[i, j] = rho[j, i] = value
    return rho


def correlation_report(model: GPModel, ts: TimeSeriesSet, mode: str = DIAGONAL_SQRT) -> CorrelationReport:
    return CorrelationReport(
        labels=tuple(ts.names),
        kernel_corr=kernel_cross_correlation(model, mode),
        empirical_corr=empirical_cross_correlation(ts),
        normalization=mode,
    )

# ============================================================================
# ERROR METRICS
# ============================================================================

def _residuals(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.size == 0 or pred.size != truth.size:
        raise DataError(MSG_ERROR_LENGTHS.format(pred=pred.size, truth=truth.size))
    return pred - truth, truth


def mae(pred, truth) -> float:
    diff, _ = _residuals(pred, truth)
    return float(np.mean(np.abs(diff)))


def rmse(pred, truth) -> float:
    diff, _ = _residuals(pred, truth)
    return float(np.sqrt(np.mean(diff ** 2)))


def _normalizer(truth) -> float:
    mean = float(np.mean(np.asarray(truth, dtype=float)))
    if mean == 0:
        raise NormalizationUndefinedError(MSG_ERROR_ZERO_MEAN)
    return abs(mean)


def nmae(pred, truth) -> float:
    """mean(|pred - truth|) / |mean(truth)|"""
    return mae(pred, truth) / _normalizer(truth)


def nrmse(pred, truth) -> float:
    """sqrt(mean((pred - truth)^2)) / |mean(truth)|"""
    return rmse(pred, truth) / _normalizer(truth)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation; a single value has std 0."""
    values = np.asarray(values, dtype=float)
    if values.size == 1:
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


def format_summary(mean: float, std: float) -> str:
    return f"{mean:.4g} ± {std:.4g}"

# ============================================================================
# REPORTS
# ============================================================================

@dataclass
class MetricsReport:
    """Trial-aggregated test metrics for one (variant, experiment)."""

    variant: str
    experiment: str
    nmae: Tuple[float, float]
    nrmse: Tuple[float, float]
    per_trial: Dict[str, List[float]]
    n_train: int
    n_test: int
    trials: int
    scale: str = "transformed"
    channel_weighting: str = CHANNEL_WEIGHTING
    fallbacks: List[str] = field(default_factory=list)

    def rows(self) -> List[Dict]:
        rows = []
        for metric, (mean, std) in ((METRIC_NMAE, self.nmae), (METRIC_NRMSE, self.nrmse)):
            rows.append({
                "variant": self.variant,
                "experiment": self.experiment,
                "metric": metric,
                "mean": mean,
                "std": std,
                "summary": format_summary(mean, std),
                "n_train": self.n_train,
                "n_test": self.n_test,
                "trials": self.trials,
            })
        return rows

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "experiment": self.experiment,
            "scale": self.scale,
            "channel_weighting": self.channel_weighting,
            "unnormalized_fallback": list(self.fallbacks),
            "metrics": self.rows(),
            "per_trial": self.per_trial,
        }

    def to_csv(self, path: str) -> str:
        """Comment header lines, then the metrics table."""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        header = [
            f"# channel_weighting: {self.channel_weighting}",
            f"# scale: {self.scale}",
            f"# unnormalized_fallback: {','.join(self.fallbacks) if self.fallbacks else 'none'}",
        ]
        table = pd.DataFrame(self.rows(), columns=METRICS_COLUMNS).to_csv(index=False, float_format="%.17g")
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write("\n".join(header) + "\n")
            f.write(table)
        return path


def trial_errors(model: GPModel, ts: TimeSeriesSet, scale: str = "transformed") -> Tuple[float, float, List[str]]:
    """
    Equal-weight average over channels of per-channel test nMAE and nRMSE,
    plus the channels that fell back to unnormalized errors.
    """
    ch_tr, t_tr, y_tr = training_arrays(ts)
    tested = [(i, ch, idx) for i, (ch, idx) in enumerate(zip(ts.channels, ts.test_mask)) if idx.size]
    if not tested:
        raise EmptyReportError(MSG_ERROR_EMPTY_TEST)
    ch_q = np.concatenate([np.full(idx.size, i) for i, _, idx in tested])
    t_q = np.concatenate([ch.t[idx] for _, ch, idx in tested])
    means, _ = predict_arrays(model.spec, model.noise, ch_tr, t_tr, y_tr, ch_q, t_q)
    bounds = np.cumsum([0] + [idx.size for _, _, idx in tested])

    maes, rmses, fallbacks = [], [], []
    for (_, ch, idx), start, stop in zip(tested, bounds[:-1], bounds[1:]):
        mean = means[start:stop]
        truth = ch.y[idx]
        if scale == "original":
            mean = invert_values(ch, ch.t[idx], mean)
            truth = invert_values(ch, ch.t[idx], truth)
        try:
            maes.append(nmae(mean, truth))
            rmses.append(nrmse(mean, truth))
        except NormalizationUndefinedError:
            logger.warning(MSG_WARNING_FALLBACK.format(channel=ch.name))
            fallbacks.append(ch.name)
            maes.append(mae(mean, truth))
            rmses.append(rmse(mean, truth))
    return float(np.mean(maes)), float(np.mean(rmses)), fallbacks


def aggregate_trials(results, ts: TimeSeriesSet, scale: str = "transformed",
                     experiment: str = "experiment") -> MetricsReport:
    """Test nMAE/nRMSE per trial, then mean +/- sample std across trials."""
    if not results:
        raise DataError("aggregate_trials needs at least one trial")
    if ts.n_test() == 0:
        raise EmptyReportError(MSG_ERROR_EMPTY_TEST)
    per_trial = {METRIC_NMAE: [], METRIC_NRMSE: []}
    fallbacks: List[str] = []
    for result in results:
        trial_nmae, trial_nrmse, trial_fallbacks = trial_errors(result.model, ts, scale)
        per_trial[METRIC_NMAE].append(trial_nmae)
        per_trial[METRIC_NRMSE].append(trial_nrmse)
        fallbacks.extend(name for name in trial_fallbacks if name not in fallbacks)
    return MetricsReport(
        variant=results[0].model.spec.variant,
        experiment=experiment,
        nmae=mean_std(per_trial[METRIC_NMAE]),
        nrmse=mean_std(per_trial[METRIC_NRMSE]),
        per_trial=per_trial,
        n_train=ts.n_train(),
        n_test=ts.n_test(),
        trials=len(results),
        scale=scale,
        fallbacks=fallbacks,
    )
