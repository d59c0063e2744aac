# -*- coding: utf-8 -*-
"""
Multi-channel time series storage: CSV ingestion, invertible transforms,
train/test masking for imputation experiments and JSON persistence.

Timestamps are real-valued day offsets from the earliest date in the source
file. All types are immutable; every operation returns a new value.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from comove.config import per_channel_value
from comove.errors import (
    DataError,
    DataParseError,
    DuplicateObservationError,
    InsufficientDataError,
    SpecError,
    TransformDomainError,
    UnknownChannelError,
)

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

DATE_FORMAT = "%Y-%m-%d"
SCHEMA_LONG = "long"
SCHEMA_WIDE = "wide"
LONG_COLUMNS = ("channel", "date", "value")

TRANSFORM_LOG = "log"
TRANSFORM_DETREND = "detrend-linear"
TRANSFORM_KINDS = (TRANSFORM_LOG, TRANSFORM_DETREND)

MIN_DETREND_POINTS = 2

MSG_INFO_LOADED_CSV = "Loaded {channels} channel(s), {points} observation(s) from {path}"
MSG_INFO_MASK_APPLIED = "Mask applied: {train} training / {test} test point(s) (seed {seed})"
MSG_INFO_TRANSFORM = "Applied {kind} to {channel}"
MSG_WARNING_EMPTY_TRAIN = "Channel '{channel}' has no training points left after masking"
MSG_ERROR_FILE_NOT_FOUND = "Data file {path} not found"
MSG_ERROR_UNKNOWN_SCHEMA = "Unknown CSV schema '{schema}' (expected 'long' or 'wide')"
MSG_ERROR_BAD_DATE = "malformed date '{value}'"
MSG_ERROR_BAD_VALUE = "non-numeric value '{value}' for channel '{channel}'"
MSG_ERROR_DUPLICATE = "duplicate observation for channel '{channel}' on {date}"
MSG_ERROR_DUPLICATE_DATE = "duplicate date row {date}"
MSG_ERROR_MISSING_COLUMNS = "long schema requires columns channel, date, value; missing {missing} (found {columns})"
MSG_ERROR_NO_CHANNELS = "wide schema requires a date column and at least one channel column"
MSG_ERROR_DETREND_POINTS = "Channel '{channel}' needs at least {min} training points to detrend, has {count}"
MSG_ERROR_LOG_DOMAIN = "Channel '{channel}' has non-positive value {value} at t={t}; log transform undefined"
MSG_ERROR_UNKNOWN_TRANSFORM = "Unknown transform '{kind}' (expected one of {kinds})"

# ============================================================================
# DOMAIN TYPES
# ============================================================================

class Observation(NamedTuple):
    """One (timestamp, value) pair; t in days."""
    t: float
    y: float


@dataclass(frozen=True)
class TransformRecord:
    """An applied transform with the parameters needed to invert it."""

    kind: str
    slope: Optional[float] = None
    intercept: Optional[float] = None

    def inverse(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == TRANSFORM_LOG:
            return np.exp(y)
        return y + (self.slope * t + self.intercept)

    def inverse_slope(self, t: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Derivative of the inverse map with respect to y."""
        if self.kind == TRANSFORM_LOG:
            return np.exp(y)
        return np.ones_like(y)

    def to_dict(self) -> Dict:
        if self.kind == TRANSFORM_LOG:
            return {"kind": self.kind}
        return {"kind": self.kind, "slope": self.slope, "intercept": self.intercept}

    @classmethod
    def from_dict(cls, data: Dict) -> "TransformRecord":
        kind = data.get("kind")
        if kind not in TRANSFORM_KINDS:
            raise DataError(MSG_ERROR_UNKNOWN_TRANSFORM.format(kind=kind, kinds=TRANSFORM_KINDS))
        return cls(kind=kind, slope=data.get("slope"), intercept=data.get("intercept"))


def _frozen_array(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Channel:
    """One output channel: strictly increasing timestamps with values."""

    name: str
    t: np.ndarray
    y: np.ndarray
    transforms: Tuple[TransformRecord, ...] = ()

    def __post_init__(self):
        t = _frozen_array(self.t)
        y = _frozen_array(self.y)
        if t.ndim != 1 or t.shape != y.shape:
            raise DataError(f"Channel '{self.name}': t and y must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise DataError(f"Channel '{self.name}': timestamps and values must be finite")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DataError(f"Channel '{self.name}': timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def observations(self) -> List[Observation]:
        return [Observation(float(a), float(b)) for a, b in zip(self.t, self.y)]


@dataclass(frozen=True)
class MaskSpec:
    """
    Removal recipe. Each field maps channel name to a setting; the "*" key
    applies to channels without their own entry.
    """

    random_fraction: Dict[str, float] = field(default_factory=dict)
    ranges: Dict[str, Tuple[Tuple[float, float], ...]] = field(default_factory=dict)
    tail_days: Dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name, fraction in self.random_fraction.items():
            if not 0.0 <= float(fraction) <= 1.0:
                raise SpecError(f"random_fraction for '{name}' must lie in [0, 1], got {fraction}")
        for name, intervals in self.ranges.items():
            for start, end in intervals:
                if not float(start) < float(end):
                    raise SpecError(f"range for '{name}' must have t_start < t_end, got [{start}, {end}]")
        for name, days in self.tail_days.items():
            if float(days) < 0:
                raise SpecError(f"tail_days for '{name}' must be >= 0, got {days}")

    def fraction_for(self, channel: str) -> float:
        return float(per_channel_value(self.random_fraction, channel, 0.0))

    def ranges_for(self, channel: str) -> Tuple[Tuple[float, float], ...]:
        return tuple(per_channel_value(self.ranges, channel, ()))

    def tail_for(self, channel: str) -> float:
        return float(per_channel_value(self.tail_days, channel, 0.0))

    def to_dict(self) -> Dict:
        return {
            "random_fraction": {k: float(v) for k, v in self.random_fraction.items()},
            "ranges": {k: [[float(a), float(b)] for a, b in v] for k, v in self.ranges.items()},
            "tail_days": {k: float(v) for k, v in self.tail_days.items()},
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MaskSpec":
        return cls(
            random_fraction=dict(data.get("random_fraction") or {}),
            ranges={k: tuple((float(a), float(b)) for a, b in v) for k, v in (data.get("ranges") or {}).items()},
            tail_days=dict(data.get("tail_days") or {}),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True, eq=False)
class TimeSeriesSet:
    """M named channels with disjoint train/test index sets per channel."""

    channels: Tuple[Channel, ...]
    train_mask: Tuple[np.ndarray, ...] = None
    test_mask: Tuple[np.ndarray, ...] = None
    origin: Optional[str] = None
    seed: Optional[int] = None
    mask_spec: Optional[MaskSpec] = None
    mask_warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        channels = tuple(self.channels)
        names = [ch.name for ch in channels]
        if len(set(names)) != len(names):
            raise DataError(f"Channel names must be unique, got {names}")
        train = self.train_mask
        test = self.test_mask
        if train is None:
            train = tuple(np.arange(len(ch)) for ch in channels)
        if test is None:
            test = tuple(np.arange(0) for _ in channels)
        train = tuple(_frozen_array(np.sort(np.asarray(m, dtype=int)), dtype=int) for m in train)
        test = tuple(_frozen_array(np.sort(np.asarray(m, dtype=int)), dtype=int) for m in test)
        if len(train) != len(channels) or len(test) != len(channels):
            raise DataError("Masks must have one index set per channel")
        for ch, tr, te in zip(channels, train, test):
            if np.intersect1d(tr, te).size or tr.size + te.size != len(ch) \
                    or not np.array_equal(np.union1d(tr, te), np.arange(len(ch))):
                raise DataError(f"Channel '{ch.name}': train and test masks must partition its indices")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "train_mask", train)
        object.__setattr__(self, "test_mask", test)
        object.__setattr__(self, "mask_warnings", tuple(self.mask_warnings))

    @property
    def names(self) -> List[str]:
        return [ch.name for ch in self.channels]

    @property
    def M(self) -> int:
        return len(self.channels)

    def channel_index(self, name: str) -> int:
        for idx, ch in enumerate(self.channels):
            if ch.name == name:
                return idx
        raise UnknownChannelError(f"Unknown channel '{name}' (known: {', '.join(self.names)})")

    def channel(self, name: str) -> Channel:
        return self.channels[self.channel_index(name)]

    def n_train(self) -> int:
        return int(sum(m.size for m in self.train_mask))

    def n_test(self) -> int:
        return int(sum(m.size for m in self.test_mask))

# ============================================================================
# CSV INGESTION
# ============================================================================

def _parse_dates(values: pd.Series) -> pd.Series:
    """Parse ISO dates; raise DataParseError naming the first bad file line."""
    parsed = pd.to_datetime(values, format=DATE_FORMAT, errors="coerce")
    bad = parsed.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataParseError(MSG_ERROR_BAD_DATE.format(value=values.iloc[row]), line=row + 2)
    return parsed


def _parse_value(raw: str, channel: str, row: int) -> Optional[float]:
    """Parse one cell; empty means no observation."""
    text = raw.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise DataParseError(MSG_ERROR_BAD_VALUE.format(value=text, channel=channel), line=row + 2) from None
    if not np.isfinite(value):
        raise DataParseError(MSG_ERROR_BAD_VALUE.format(value=text, channel=channel), line=row + 2)
    return value


def _build_channels(records: Dict[str, List[Tuple[float, float]]]) -> Tuple[Channel, ...]:
    channels = []
    for name, points in records.items():
        points = sorted(points)
        channels.append(Channel(name=name, t=[p[0] for p in points], y=[p[1] for p in points]))
    return tuple(channels)


def load_csv(path: str, schema: str = SCHEMA_LONG) -> TimeSeriesSet:
    """
    Load a CSV file in long (channel, date, value) or wide (date, ch1, ch2, ...)
    layout. Dates become day offsets from the earliest date in the file and
    rows with empty value cells are skipped.
    """
    if schema not in (SCHEMA_LONG, SCHEMA_WIDE):
        raise DataError(MSG_ERROR_UNKNOWN_SCHEMA.format(schema=schema))
    if not os.path.exists(path):
        raise DataError(MSG_ERROR_FILE_NOT_FOUND.format(path=path))

    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    frame.columns = [str(c).strip() for c in frame.columns]
    records: Dict[str, List[Tuple[float, float]]] = {}

    if schema == SCHEMA_LONG:
        lowered = {c.lower(): c for c in frame.columns}
        missing = [c for c in LONG_COLUMNS if c not in lowered]
        if missing:
            raise DataParseError(
                MSG_ERROR_MISSING_COLUMNS.format(missing=", ".join(missing), columns=list(frame.columns)), line=1)
        cols = [lowered[c] for c in LONG_COLUMNS]
        names = frame[cols[0]].str.strip()
        dates = _parse_dates(frame[cols[1]].str.strip())
        origin = dates.min()
        seen = set()
        for row, (name, when, raw) in enumerate(zip(names, dates, frame[cols[2]])):
            key = (name, when)
            if key in seen:
                raise DuplicateObservationError(
                    MSG_ERROR_DUPLICATE.format(channel=name, date=when.strftime(DATE_FORMAT)))
            seen.add(key)
            records.setdefault(name, [])
            value = _parse_value(raw, name, row)
            if value is not None:
                records[name].append((float((when - origin).days), value))
    else:
        if len(frame.columns) < 2:
            raise DataParseError(MSG_ERROR_NO_CHANNELS, line=1)
        date_col, channel_cols = frame.columns[0], list(frame.columns[1:])
        dates = _parse_dates(frame[date_col].str.strip())
        duplicated = dates.duplicated()
        if duplicated.any():
            row = int(np.flatnonzero(duplicated.to_numpy())[0])
            raise DuplicateObservationError(
                MSG_ERROR_DUPLICATE_DATE.format(date=dates.iloc[row].strftime(DATE_FORMAT)))
        origin = dates.min()
        offsets = [float((d - origin).days) for d in dates]
        for name in channel_cols:
            records[name] = []
            for row, raw in enumerate(frame[name]):
                value = _parse_value(raw, name, row)
                if value is not None:
                    records[name].append((offsets[row], value))

    channels = _build_channels(records)
    origin_text = origin.strftime(DATE_FORMAT) if len(frame) else None
    logger.info(MSG_INFO_LOADED_CSV.format(
        channels=len(channels), points=sum(len(c) for c in channels), path=path))
    return TimeSeriesSet(channels=channels, origin=origin_text)


def date_to_offset(value: Union[str, float, int], origin: Optional[str]) -> float:
    """Convert an ISO date (or a plain number of days) to a day offset."""
    if isinstance(value, (int, float)):
        return float(value)
    if origin is None:
        raise SpecError(f"Cannot convert date '{value}' without a data origin date")
    try:
        when = pd.to_datetime(value, format=DATE_FORMAT)
    except (ValueError, TypeError) as e:
        raise SpecError(f"Malformed date '{value}' in mask ranges") from e
    return float((when - pd.to_datetime(origin, format=DATE_FORMAT)).days)


def offset_to_date(offset: float, origin: str) -> str:
    """Inverse of date_to_offset for whole-day offsets."""
    base = date.fromisoformat(origin)
    return (base + timedelta(days=int(round(offset)))).isoformat()

# ============================================================================
# TRANSFORMS
# ============================================================================

def detrend_linear(ch: Channel, train_index: Optional[Sequence[int]] = None) -> Channel:
    """
    Subtract the least-squares line fitted on the training points (all points
    when no index set is given) and record slope/intercept for inversion.
    """
    idx = np.arange(len(ch)) if train_index is None else np.asarray(train_index, dtype=int)
    if idx.size < MIN_DETREND_POINTS:
        raise InsufficientDataError(MSG_ERROR_DETREND_POINTS.format(
            channel=ch.name, min=MIN_DETREND_POINTS, count=idx.size))
    t_fit = ch.t[idx]
    design = np.column_stack([t_fit, np.ones_like(t_fit)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ch.y[idx], rcond=None)
    record = TransformRecord(kind=TRANSFORM_DETREND, slope=float(slope), intercept=float(intercept))
    residuals = ch.y - (record.slope * ch.t + record.intercept)
    return replace(ch, y=residuals, transforms=ch.transforms + (record,))


def log_transform(ch: Channel) -> Channel:
    """Map y to ln(y); every value must be strictly positive."""
    bad = np.flatnonzero(ch.y <= 0)
    if bad.size:
        first = int(bad[0])
        raise TransformDomainError(MSG_ERROR_LOG_DOMAIN.format(
            channel=ch.name, value=ch.y[first], t=ch.t[first]))
    return replace(ch, y=np.log(ch.y), transforms=ch.transforms + (TransformRecord(kind=TRANSFORM_LOG),))


def invert_values(ch: Channel, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Map transformed-scale values at times t back to original units."""
    values = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    for record in reversed(ch.transforms):
        values = record.inverse(t, values)
    return values


def inverse_slope(ch: Channel, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(original value)/d(transformed value) at transformed values y."""
    values = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    slope = np.ones_like(values)
    for record in reversed(ch.transforms):
        slope = slope * record.inverse_slope(t, values)
        values = record.inverse(t, values)
    return slope


def invert_transforms(ch: Channel) -> Channel:
    """Return the channel in original units with an empty transform log."""
    return replace(ch, y=invert_values(ch, ch.t, ch.y), transforms=())


def transform_set(ts: TimeSeriesSet, kinds: Iterable[str]) -> TimeSeriesSet:
    """Apply an ordered list of transforms to every channel of a set."""
    channels = list(ts.channels)
    for kind in kinds:
        if kind not in TRANSFORM_KINDS:
            raise DataError(MSG_ERROR_UNKNOWN_TRANSFORM.format(kind=kind, kinds=TRANSFORM_KINDS))
        for i, ch in enumerate(channels):
            if kind == TRANSFORM_LOG:
                channels[i] = log_transform(ch)
            else:
                channels[i] = detrend_linear(ch, ts.train_mask[i])
            logger.debug(MSG_INFO_TRANSFORM.format(kind=kind, channel=ch.name))
    return replace(ts, channels=tuple(channels))

# ============================================================================
# MASKING
# ============================================================================

def apply_mask(ts: TimeSeriesSet, spec: MaskSpec) -> TimeSeriesSet:
    """
    Move range-removed, tail-removed and randomly removed indices to the test
    set. Random removal draws round(fraction * n) raw indices per channel
    without replacement from one generator seeded with spec.seed, channels in
    order, so the result is deterministic given (data, spec).
    """
    rng = np.random.default_rng(spec.seed)
    train_masks, test_masks, warnings = [], [], []
    for ch, train, test in zip(ts.channels, ts.train_mask, ts.test_mask):
        n = len(ch)
        removed = np.zeros(n, dtype=bool)
        removed[test] = True
        for start, end in spec.ranges_for(ch.name):
            removed |= (ch.t >= start) & (ch.t <= end)
        tail = spec.tail_for(ch.name)
        if tail > 0 and n:
            removed |= ch.t > ch.t[-1] - tail
        fraction = spec.fraction_for(ch.name)
        count = int(round(fraction * n))
        if count:
            removed[rng.choice(n, size=count, replace=False)] = True
        if n and removed.all():
            message = MSG_WARNING_EMPTY_TRAIN.format(channel=ch.name)
            logger.warning(message)
            warnings.append(message)
        train_masks.append(np.flatnonzero(~removed))
        test_masks.append(np.flatnonzero(removed))

    masked = replace(ts, train_mask=tuple(train_masks), test_mask=tuple(test_masks),
                     seed=int(spec.seed), mask_spec=spec,
                     mask_warnings=ts.mask_warnings + tuple(warnings))
    logger.info(MSG_INFO_MASK_APPLIED.format(train=masked.n_train(), test=masked.n_test(), seed=spec.seed))
    return masked


def mask_spec_from_config(mask_config: Dict, origin: Optional[str]) -> MaskSpec:
    """Build a MaskSpec from config, converting ISO-date range endpoints."""
    mask_config = mask_config or {}

    def as_mapping(value):
        if value is None:
            return {}
        return dict(value) if isinstance(value, dict) else {"*": value}

    ranges = {}
    for name, intervals in as_mapping(mask_config.get("ranges")).items():
        converted = []
        for interval in intervals or []:
            if len(interval) != 2:
                raise SpecError(f"Range for '{name}' must be [t_start, t_end], got {interval}")
            converted.append((date_to_offset(interval[0], origin), date_to_offset(interval[1], origin)))
        ranges[name] = tuple(converted)

    return MaskSpec(
        random_fraction={k: float(v) for k, v in as_mapping(mask_config.get("random_fraction")).items()},
        ranges=ranges,
        tail_days={k: float(v) for k, v in as_mapping(mask_config.get("tail_days")).items()},
        seed=int(mask_config.get("seed", 0)),
    )

# ============================================================================
# ENGINE VIEWS
# ============================================================================

def _flatten(ts: TimeSeriesSet, masks: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    channels, times, values = [], [], []
    for i, (ch, idx) in enumerate(zip(ts.channels, masks)):
        channels.append(np.full(idx.size, i, dtype=int))
        times.append(ch.t[idx])
        values.append(ch.y[idx])
    if not channels:
        return np.zeros(0, dtype=int), np.zeros(0), np.zeros(0)
    return np.concatenate(channels), np.concatenate(times), np.concatenate(values)


def training_arrays(ts: TimeSeriesSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(channel index, t, y) of all training points, channel-major."""
    return _flatten(ts, ts.train_mask)


def test_arrays(ts: TimeSeriesSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(channel index, t, y) of all held-out points, channel-major."""
    return _flatten(ts, ts.test_mask)

# ============================================================================
# PERSISTENCE
# ============================================================================

def to_dict(ts: TimeSeriesSet) -> Dict:
    return {
        "origin": ts.origin,
        "seed": ts.seed,
        "channels": [
            {
                "name": ch.name,
                "t": ch.t.tolist(),
                "y": ch.y.tolist(),
                "transforms": [r.to_dict() for r in ch.transforms],
            }
            for ch in ts.channels
        ],
        "train_mask": {ch.name: m.tolist() for ch, m in zip(ts.channels, ts.train_mask)},
        "test_mask": {ch.name: m.tolist() for ch, m in zip(ts.channels, ts.test_mask)},
        "mask_spec": ts.mask_spec.to_dict() if ts.mask_spec is not None else None,
        "mask_warnings": list(ts.mask_warnings),
    }


def from_dict(data: Dict) -> TimeSeriesSet:
    channels = tuple(
        Channel(
            name=c["name"],
            t=c["t"],
            y=c["y"],
            transforms=tuple(TransformRecord.from_dict(r) for r in c.get("transforms", [])),
        )
        for c in data["channels"]
    )
    train = data.get("train_mask")
    test = data.get("test_mask")
    return TimeSeriesSet(
        channels=channels,
        train_mask=tuple(train[c.name] for c in channels) if train is not None else None,
        test_mask=tuple(test[c.name] for c in channels) if test is not None else None,
        origin=data.get("origin"),
        seed=data.get("seed"),
        mask_spec=MaskSpec.from_dict(data["mask_spec"]) if data.get("mask_spec") else None,
        mask_warnings=tuple(data.get("mask_warnings", [])),
    )


def save_json(ts: TimeSeriesSet, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_dict(ts), f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def load_json(path: str) -> TimeSeriesSet:
    if not os.path.exists(path):
        raise DataError(MSG_ERROR_FILE_NOT_FOUND.format(path=path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DataParseError(f"invalid JSON in {path}: {e.msg}", line=e.lineno) from e
    return from_dict(data)
