# -*- coding: utf-8 -*-
"""
Self-contained SVG line plots of posterior predictions: training points,
held-out truth, posterior mean, confidence band and imputation ranges.
"""

import logging
import os
from datetime import datetime, timezone
from typing import List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape, quoteattr

import numpy as np
import pandas as pd

from comove.errors import ChannelMismatchError, DataError
from comove.series_store import Channel, TimeSeriesSet, invert_values

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

WIDTH = 800
HEIGHT = 400
MARGIN = 50
MARKER_RADIUS = 3

COLOR_TRAIN = "#000000"
COLOR_TRUTH = "#555555"
COLOR_MEAN = "#1f77b4"
COLOR_BAND = "#1f77b4"
COLOR_RANGE = "#dddddd"

PREDICTION_COLUMNS = ("channel", "t", "mean")

MSG_INFO_WROTE = "Wrote plot for '{channel}' to {path}"
MSG_ERROR_COLUMNS = "predictions file must contain columns {columns}"
MSG_ERROR_CHANNELS = "Prediction channel(s) {missing} not present in the data set"

# ============================================================================
# GEOMETRY
# ============================================================================

class Frame:
    """Maps data coordinates into the plotting area of the viewBox."""

    def __init__(self, xs: np.ndarray, ys: np.ndarray):
        self.x0, self.x1 = self._span(xs)
        self.y0, self.y1 = self._span(ys)

    @staticmethod
    def _span(values: np.ndarray) -> Tuple[float, float]:
        values = values[np.isfinite(values)]
        if values.size == 0:
            return 0.0, 1.0
        lo, hi = float(values.min()), float(values.max())
        if hi - lo <= 0:
            return lo - 1.0, hi + 1.0
        return lo, hi

    def x(self, value: float) -> float:
        pos = MARGIN + (value - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)
        return float(np.clip(pos, 0, WIDTH))

    def y(self, value: float) -> float:
        pos = HEIGHT - MARGIN - (value - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)
        return float(np.clip(pos, 0, HEIGHT))

    def points(self, xs: Sequence[float], ys: Sequence[float]) -> str:
        return " ".join(f"{self.x(a):.2f},{self.y(b):.2f}" for a, b in zip(xs, ys))

# ============================================================================
# SVG
# ============================================================================

def _band_columns(frame: pd.DataFrame) -> Tuple[Optional[str], Optional[str]]:
    lo = next((c for c in frame.columns if c.startswith("lo")), None)
    hi = next((c for c in frame.columns if c.startswith("hi")), None)
    return lo, hi


def _shaded_ranges(ts: TimeSeriesSet, ch: Channel) -> List[Tuple[float, float]]:
    spec = ts.mask_spec
    if spec is None:
        return []
    ranges = list(spec.ranges_for(ch.name))
    tail = spec.tail_for(ch.name)
    if tail > 0 and len(ch):
        ranges.append((float(ch.t[-1] - tail), float(ch.t[-1])))
    return ranges


def render_channel_svg(name: str, t_train, y_train, t_test, y_test, predictions: pd.DataFrame,
                       ranges: Sequence[Tuple[float, float]] = (), stamp: Optional[str] = None) -> str:
    """One channel's plot as an SVG document string."""
    lo_col, hi_col = _band_columns(predictions)
    pred = predictions.sort_values("t", kind="stable")
    t_pred = pred["t"].to_numpy(dtype=float)
    mean = pred["mean"].to_numpy(dtype=float)
    lo = pred[lo_col].to_numpy(dtype=float) if lo_col else mean
    hi = pred[hi_col].to_numpy(dtype=float) if hi_col else mean

    t_train, y_train = np.asarray(t_train, dtype=float), np.asarray(y_train, dtype=float)
    t_test, y_test = np.asarray(t_test, dtype=float), np.asarray(y_test, dtype=float)
    frame = Frame(np.concatenate([t_train, t_test, t_pred]),
                  np.concatenate([y_train, y_test, mean, lo, hi]))

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}">',
    ]
    if stamp:
        lines.append(f"<!-- generated {escape(stamp)} -->")
    lines.append(f"<title>{escape(name)}</title>")
    lines.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>')

    for start, end in ranges:
        x_start, x_end = frame.x(start), frame.x(end)
        lines.append(
            f'<rect class="imputation" x="{x_start:.2f}" y="{MARGIN}" width="{max(x_end - x_start, 0):.2f}" '
            f'height="{HEIGHT - 2 * MARGIN}" fill="{COLOR_RANGE}"/>')

    if t_pred.size:
        band = frame.points(np.concatenate([t_pred, t_pred[::-1]]), np.concatenate([hi, lo[::-1]]))
        lines.append(f'<polygon class="band" points="{band}" fill="{COLOR_BAND}" fill-opacity="0.2" stroke="none"/>')
        lines.append(f'<polyline class="mean" points="{frame.points(t_pred, mean)}" '
                     f'fill="none" stroke="{COLOR_MEAN}" stroke-width="1.5"/>')

    if t_test.size:
        order = np.argsort(t_test, kind="stable")
        lines.append(f'<polyline class="truth" points="{frame.points(t_test[order], y_test[order])}" '
                     f'fill="none" stroke="{COLOR_TRUTH}" stroke-dasharray="6 4"/>')

    for a, b in zip(t_train, y_train):
        lines.append(f'<circle class="train" cx="{frame.x(a):.2f}" cy="{frame.y(b):.2f}" '
                     f'r="{MARKER_RADIUS}" fill="{COLOR_TRAIN}"/>')

    lines.append(f'<text x="{MARGIN}" y="{MARGIN / 2:.0f}" font-family="sans-serif" font-size="14" '
                 f'data-channel={quoteattr(name)}>{escape(name)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def read_predictions(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DataError(f"Predictions file {path} not found")
    frame = pd.read_csv(path, dtype={"channel": str})
    if not all(c in frame.columns for c in PREDICTION_COLUMNS):
        raise DataError(MSG_ERROR_COLUMNS.format(columns=", ".join(PREDICTION_COLUMNS)))
    return frame


def _safe_filename(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "channel"


def plot_predictions(predictions: pd.DataFrame, ts: TimeSeriesSet, out_dir: str,
                     scale: str = "transformed", stamp: bool = False) -> List[str]:
    """Write <channel>.svg for every channel present in the predictions."""
    names = list(dict.fromkeys(predictions["channel"].astype(str)))
    missing = [n for n in names if n not in ts.names]
    if missing:
        raise ChannelMismatchError(MSG_ERROR_CHANNELS.format(missing=", ".join(missing)))
    os.makedirs(out_dir, exist_ok=True)
    stamp_text = datetime.now(timezone.utc).isoformat() if stamp else None
    paths = []
    for name in names:
        i = ts.channel_index(name)
        ch = ts.channels[i]
        y = invert_values(ch, ch.t, ch.y) if scale == "original" else ch.y
        train, test = ts.train_mask[i], ts.test_mask[i]
        svg = render_channel_svg(
            name,
            ch.t[train], y[train], ch.t[test], y[test],
            predictions[predictions["channel"].astype(str) == name],
            ranges=_shaded_ranges(ts, ch),
            stamp=stamp_text,
        )
        path = os.path.join(out_dir, f"{_safe_filename(name)}.svg")
        with open(path, 'w', encoding='utf-8') as f:
            f.write(svg)
        logger.info(MSG_INFO_WROTE.format(channel=name, path=path))
        paths.append(path)
    return paths
