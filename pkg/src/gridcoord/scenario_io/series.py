"""Uniformly sampled time series and the bundled synthetic profiles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TimeSeries:
    """Values on a fixed grid ``start_h + i * step_h``; each value holds until the next sample."""

    start_h: float
    step_h: float
    values: np.ndarray
    unit: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not self.step_h > 0.0:
            raise ValueError("time series step must be positive")
        if self.values.ndim != 1 or len(self.values) == 0:
            raise ValueError("time series needs a non-empty 1-D value array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("time series contains non-finite values (gaps are not allowed)")

    @property
    def end_h(self) -> float:
        return self.start_h + self.step_h * len(self.values)

    def covers(self, t0_h: float, t1_h: float) -> bool:
        return self.start_h <= t0_h + 1e-12 and t1_h <= self.end_h + 1e-12

    def at(self, t_h: float) -> float:
        i = int(math.floor((t_h - self.start_h) / self.step_h + 1e-9))
        if not 0 <= i < len(self.values):
            raise ValueError(f"time {t_h} h outside series range [{self.start_h}, {self.end_h})")
        return float(self.values[i])

    def average(self, t0_h: float, t1_h: float) -> float:
        """Time average over ``[t0_h, t1_h)`` of the piecewise-constant signal."""
        if not t1_h > t0_h:
            raise ValueError("averaging window must have positive length")
        if not self.covers(t0_h, t1_h):
            raise ValueError(f"window [{t0_h}, {t1_h}) h not covered by series [{self.start_h}, {self.end_h})")
        edges = self.start_h + self.step_h * np.arange(len(self.values) + 1)
        lo = np.clip(edges[:-1], t0_h, t1_h)
        hi = np.clip(edges[1:], t0_h, t1_h)
        return float(np.dot(self.values, hi - lo) / (t1_h - t0_h))

    def period_averages(self, period_h: float, n: int) -> np.ndarray:
        return np.array([self.average(i * period_h, (i + 1) * period_h) for i in range(n)])

    def period_starts(self, period_h: float, n: int) -> np.ndarray:
        return np.array([self.at(i * period_h) for i in range(n)])

    @classmethod
    def from_csv(cls, path: str | Path, unit: str) -> "TimeSeries":
        """Read a two-column ``time_h,value`` file with a uniform time grid."""
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        if len(rows) < 2:
            raise ValueError(f"{path}: need at least two samples")
        t = np.array([float(r[0]) for r in rows])
        v = np.array([float(r[1]) for r in rows])
        steps = np.diff(t)
        if not np.allclose(steps, steps[0], rtol=0.0, atol=1e-9) or steps[0] <= 0.0:
            raise ValueError(f"{path}: samples must be uniformly spaced in increasing time")
        return cls(float(t[0]), float(steps[0]), v, unit)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def summer_day_temperature(step_h: float, hours: float, t_low_f: float = 72.0, t_high_f: float = 96.0,
                           peak_hour: float = 15.0) -> TimeSeries:
    """Sinusoidal outdoor temperature peaking at ``peak_hour``."""
    t = np.arange(0.0, hours, step_h)
    mid, amp = 0.5 * (t_high_f + t_low_f), 0.5 * (t_high_f - t_low_f)
    return TimeSeries(0.0, step_h, mid + amp * np.cos(2.0 * np.pi * (t - peak_hour) / 24.0), "degF")


def solar_fraction(step_h: float, hours: float, sunrise: float = 6.0, sunset: float = 20.0) -> TimeSeries:
    """Clear-sky solar fraction: half sine between sunrise and sunset, zero at night."""
    t = np.arange(0.0, hours, step_h) % 24.0
    frac = np.where((t > sunrise) & (t < sunset), np.sin(np.pi * (t - sunrise) / (sunset - sunrise)), 0.0)
    return TimeSeries(0.0, step_h, frac, "fraction")


def residential_load(step_h: float, hours: float, per_house_kw: float, n_houses: int,
                     noise_frac: float, rng: np.random.Generator) -> TimeSeries:
    """Non-AC household load: overnight base, morning bump and evening peak, with multiplicative noise."""
    t = np.arange(0.0, hours, step_h) % 24.0
    shape = (
        0.6
        + 0.35 * np.exp(-0.5 * ((t - 7.5) / 1.2) ** 2)
        + 0.7 * np.exp(-0.5 * ((t - 19.5) / 2.0) ** 2)
    )
    noise = 1.0 + noise_frac * rng.standard_normal(len(t))
    return TimeSeries(0.0, step_h, per_house_kw * n_houses * shape * np.clip(noise, 0.0, None), "kW")
