"""Head-tracker stream filtering, pitch extraction, and drift-reset displacement.

Double integration of acceleration drifts without bound, so displacement is
computed per fixed-length reset window: the window-mean of the x acceleration
is removed (taking static gravity projection and sensor bias with it), the
remainder is trapezoidally integrated twice with velocity and displacement
pinned to zero at the window start. Displacement therefore returns to exactly
zero at every reset boundary.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, CsvParseError, ValidationError

IMU_CSV_HEADER = "timestamp,yaw,pitch,roll,x,y,z"

_CHANNELS = ("yaw_deg", "pitch_deg", "roll_deg", "ax", "ay", "az")


@dataclass(frozen=True)
class ImuSample:
    """One head-tracker reading: orientation in degrees, acceleration in m/s^2."""

    timestamp_s: float
    yaw_deg: float
    pitch_deg: float
    roll_deg: float
    ax: float
    ay: float
    az: float


@dataclass(frozen=True)
class ImuSeries:
    """A time-ordered head-tracker stream at a nominal (default 50 Hz) rate."""

    timestamps_s: np.ndarray
    yaw_deg: np.ndarray
    pitch_deg: np.ndarray
    roll_deg: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray
    nominal_rate_hz: float = 50.0

    def __post_init__(self):
        arrays = {}
        n = None
        for name in ("timestamps_s",) + _CHANNELS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise ValidationError("all channels must have equal length")
            arr = arr.copy()
            arr.flags.writeable = False
            arrays[name] = arr
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        if n == 0:
            return
        if np.any(np.diff(self.timestamps_s) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        if np.any(np.abs(self.pitch_deg) > 90.0):
            raise ValidationError("pitch must lie in [-90, 90] degrees")
        if np.any(np.abs(self.yaw_deg) > 180.0) or np.any(np.abs(self.roll_deg) > 180.0):
            raise ValidationError("yaw/roll must lie in [-180, 180] degrees")
        if n > 1:
            median_dt = float(np.median(np.diff(self.timestamps_s)))
            nominal_dt = 1.0 / self.nominal_rate_hz
            if abs(median_dt - nominal_dt) > 0.2 * nominal_dt:
                raise ValidationError(
                    f"median sample interval {median_dt:.4f}s is more than 20% off "
                    f"the nominal {nominal_dt:.4f}s"
                )

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample], nominal_rate_hz: float = 50.0) -> "ImuSeries":
        return cls(
            timestamps_s=np.array([s.timestamp_s for s in samples]),
            yaw_deg=np.array([s.yaw_deg for s in samples]),
            pitch_deg=np.array([s.pitch_deg for s in samples]),
            roll_deg=np.array([s.roll_deg for s in samples]),
            ax=np.array([s.ax for s in samples]),
            ay=np.array([s.ay for s in samples]),
            az=np.array([s.az for s in samples]),
            nominal_rate_hz=nominal_rate_hz,
        )

    def __len__(self) -> int:
        return self.timestamps_s.size

    def __getitem__(self, i: int) -> ImuSample:
        return ImuSample(
            self.timestamps_s[i], self.yaw_deg[i], self.pitch_deg[i],
            self.roll_deg[i], self.ax[i], self.ay[i], self.az[i],
        )

    def __iter__(self) -> Iterator[ImuSample]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class KinematicTrace:
    """Filtered pitch plus drift-reset x displacement, aligned on timestamps."""

    timestamps_s: np.ndarray
    pitch_deg: np.ndarray
    displacement_x_m: np.ndarray

    def __post_init__(self):
        for name in ("timestamps_s", "pitch_deg", "displacement_x_m"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (len(self.timestamps_s) == len(self.pitch_deg) == len(self.displacement_x_m)):
            raise ValidationError("trace sequences must have equal length")

    def __len__(self) -> int:
        return self.timestamps_s.size


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with shrunken symmetric windows at the edges."""
    n = x.size
    half = window // 2
    idx = np.arange(n)
    halves = np.minimum(half, np.minimum(idx, n - 1 - idx))
    starts = idx - halves
    stops = idx + halves + 1
    csum = np.concatenate([[0.0], np.cumsum(x)])
    return (csum[stops] - csum[starts]) / (stops - starts)


def smooth(series: ImuSeries, window_samples: int = 5) -> ImuSeries:
    """Apply a centered moving average independently to every channel.

    The window must be odd; edges shrink symmetrically so timestamps are
    untouched and no phase shift is introduced.
    """
    if window_samples < 1 or window_samples % 2 == 0:
        raise ConfigurationError("window_samples must be odd and >= 1")
    if window_samples > len(series):
        raise ConfigurationError("window_samples exceeds series length")
    if window_samples == 1:
        return series
    smoothed = {
        name: _moving_average(getattr(series, name), window_samples)
        for name in _CHANNELS
    }
    return replace(series, **smoothed)


def integrate_displacement(series: ImuSeries, reset_period_s: float = 2.0) -> KinematicTrace:
    """Double-integrate x acceleration into displacement with periodic resets.

    Windows are anchored at the first timestamp. Within each window the mean
    of ax is subtracted, then trapezoidal integration runs twice with v[0] and
    d[0] forced to zero; the first sample of every window restarts at exactly
    zero displacement.
    """
    if not reset_period_s > 0:
        raise ConfigurationError("reset_period_s must be positive")
    n = len(series)
    if n == 0:
        return KinematicTrace(np.array([]), np.array([]), np.array([]))

    t = series.timestamps_s
    nominal_dt = 1.0 / series.nominal_rate_hz
    if n > 1 and np.any(np.diff(t) > 3.0 * nominal_dt):
        warnings.warn("sample gap exceeds 3x the nominal interval", stacklevel=2)

    window_index = np.floor((t - t[0]) / reset_period_s).astype(np.int64)
    displacement = np.zeros(n)
    for w in np.unique(window_index):
        sel = np.flatnonzero(window_index == w)
        tw = t[sel]
        a = series.ax[sel] - np.mean(series.ax[sel])
        if sel.size == 1:
            continue
        dt = np.diff(tw)
        v = np.concatenate([[0.0], np.cumsum(0.5 * (a[1:] + a[:-1]) * dt)])
        d = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])
        displacement[sel] = d
    return KinematicTrace(t, series.pitch_deg, displacement)


def write_imu_csv(series: ImuSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(IMU_CSV_HEADER + "\n")
        for i in range(len(series)):
            fh.write(
                f"{series.timestamps_s[i]:.6f},{series.yaw_deg[i]:.6f},"
                f"{series.pitch_deg[i]:.6f},{series.roll_deg[i]:.6f},"
                f"{series.ax[i]:.6f},{series.ay[i]:.6f},{series.az[i]:.6f}\n"
            )


def load_imu_csv(path, nominal_rate_hz: float = 50.0) -> ImuSeries:
    """Parse a head-tracker log; malformed rows name their line number."""
    path = Path(path)
    columns: list[list[float]] = [[] for _ in range(7)]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != IMU_CSV_HEADER:
            raise CsvParseError(path, 1, "bad IMU CSV header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise CsvParseError(path, line_no, f"expected 7 fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise CsvParseError(path, line_no, str(exc)) from exc
            for col, v in zip(columns, values):
                col.append(v)
    return ImuSeries(
        timestamps_s=np.array(columns[0]),
        yaw_deg=np.array(columns[1]),
        pitch_deg=np.array(columns[2]),
        roll_deg=np.array(columns[3]),
        ax=np.array(columns[4]),
        ay=np.array(columns[5]),
        az=np.array(columns[6]),
        nominal_rate_hz=nominal_rate_hz,
    )
