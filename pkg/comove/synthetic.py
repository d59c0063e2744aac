# -*- coding: utf-8 -*-
"""
Synthetic benchmark data: channels built from shared latent sinusoids with
per-channel delay, phase, mixing weights and Gaussian noise.

    y_i(t) = sum_l m_il * A_l * sin(2 pi f_l (t - d_i) + phi_i) + eps_i
"""

import json
import logging
import os
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from comove.errors import SpecError
from comove.series_store import Channel, TimeSeriesSet

logger = logging.getLogger(__name__)

DEFAULT_START = "2017-01-02"

MSG_INFO_WROTE = "Wrote {channels} synthetic channel(s) x {length} point(s) to {path}"
MSG_ERROR_NYQUIST = "latent frequency {frequency} must be below the Nyquist frequency {nyquist} (0.5 / spacing)"


@dataclass(frozen=True)
class LatentWave:
    frequency: float  # cycles/day
    amplitude: float


@dataclass(frozen=True)
class SyntheticChannel:
    name: str
    mixing: Tuple[float, ...]
    delay: float = 0.0
    phase: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator recipe; spacing is a whole number of days so dates stay exact."""

    length: int
    spacing: int
    latent: Tuple[LatentWave, ...]
    channels: Tuple[SyntheticChannel, ...]
    seed: int = 0
    start: str = DEFAULT_START

    def __post_init__(self):
        if int(self.length) < 1:
            raise SpecError(f"length must be >= 1, got {self.length}")
        if int(self.spacing) != self.spacing or int(self.spacing) < 1:
            raise SpecError(f"spacing must be a positive whole number of days, got {self.spacing}")
        if not self.latent:
            raise SpecError("at least one latent wave is required")
        if not self.channels:
            raise SpecError("at least one channel is required")
        nyquist = self.nyquist
        for wave in self.latent:
            if not 0 <= wave.frequency < nyquist:
                raise SpecError(MSG_ERROR_NYQUIST.format(frequency=wave.frequency, nyquist=nyquist))
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise SpecError(f"channel names must be unique, got {names}")
        for ch in self.channels:
            if ch.noise_std < 0:
                raise SpecError(f"noise_std of '{ch.name}' must be >= 0")
            if len(ch.mixing) != len(self.latent):
                raise SpecError(f"channel '{ch.name}' needs {len(self.latent)} mixing weight(s)")
        try:
            date.fromisoformat(self.start)
        except ValueError as e:
            raise SpecError(f"start must be an ISO date, got '{self.start}'") from e

    @property
    def M(self) -> int:
        return len(self.channels)

    @property
    def nyquist(self) -> float:
        return 0.5 / self.spacing

    def to_dict(self) -> Dict:
        return {
            "M": self.M,
            "length": self.length,
            "spacing": self.spacing,
            "seed": self.seed,
            "start": self.start,
            "latent": [{"frequency": w.frequency, "amplitude": w.amplitude} for w in self.latent],
            "channels": [
                {"name": c.name, "mixing": list(c.mixing), "delay": c.delay,
                 "phase": c.phase, "noise_std": c.noise_std}
                for c in self.channels
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SyntheticSpec":
        try:
            latent = tuple(LatentWave(float(w["frequency"]), float(w["amplitude"])) for w in data["latent"])
            channels = tuple(
                SyntheticChannel(
                    name=str(c.get("name", f"ch{i + 1}")),
                    mixing=tuple(float(v) for v in c.get("mixing", [1.0] * len(latent))),
                    delay=float(c.get("delay", 0.0)),
                    phase=float(c.get("phase", 0.0)),
                    noise_std=float(c.get("noise_std", 0.0)),
                )
                for i, c in enumerate(data["channels"])
            )
            spec = cls(length=int(data["length"]), spacing=data.get("spacing", 1), latent=latent,
                       channels=channels, seed=int(data.get("seed", 0)), start=data.get("start", DEFAULT_START))
        except (KeyError, TypeError, ValueError) as e:
            raise SpecError(f"invalid synthetic spec: {e}") from e
        if "M" in data and int(data["M"]) != spec.M:
            raise SpecError(f"M={data['M']} but {spec.M} channel(s) are described")
        return spec


def generate_values(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(t, Y) with Y of shape (M, length); noise drawn per channel in order."""
    rng = np.random.default_rng(spec.seed)
    t = spec.spacing * np.arange(spec.length, dtype=float)
    values = np.zeros((spec.M, spec.length))
    for i, ch in enumerate(spec.channels):
        for weight, wave in zip(ch.mixing, spec.latent):
            values[i] += weight * wave.amplitude * np.sin(2.0 * np.pi * wave.frequency * (t - ch.delay) + ch.phase)
        values[i] += rng.normal(0.0, ch.noise_std, spec.length)
    return t, values


def generate(spec: SyntheticSpec) -> TimeSeriesSet:
    t, values = generate_values(spec)
    channels = tuple(Channel(name=c.name, t=t, y=y) for c, y in zip(spec.channels, values))
    return TimeSeriesSet(channels=channels, origin=spec.start)


def manifest_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return f"{root}.manifest.json"


def write_dataset(spec: SyntheticSpec, csv_path: str) -> Tuple[str, str]:
    """Write a wide CSV plus a ground-truth manifest next to it."""
    t, values = generate_values(spec)
    start = date.fromisoformat(spec.start)
    frame = pd.DataFrame({"date": [(start + timedelta(days=int(d))).isoformat() for d in t]})
    for ch, y in zip(spec.channels, values):
        frame[ch.name] = y
    directory = os.path.dirname(csv_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(csv_path, index=False, float_format="%.17g")

    reference = spec.channels[0]
    manifest = spec.to_dict()
    manifest["nyquist"] = spec.nyquist
    manifest["relative_delays"] = {c.name: c.delay - reference.delay for c in spec.channels}
    manifest["csv"] = os.path.basename(csv_path)
    path = manifest_path(csv_path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
        f.write("\n")
    logger.info(MSG_INFO_WROTE.format(channels=spec.M, length=spec.length, path=csv_path))
    return csv_path, path
