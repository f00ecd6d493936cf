"""Windowed feature extraction over the four fused channels.

Each analysis window yields 32 values, channel-major over
(pitch, displacement, distance1, distance2) with eight statistics per
channel: mean, population standard deviation, minimum, maximum, peak
frequency, mean frequency, skewness, and excess kurtosis.

Conventions pinned for reproducibility: standard deviation is the population
form; kurtosis is excess (a normal distribution scores 0); spectral features
come from the magnitude of the real-input transform of the mean-removed,
untapered window, with the DC bin excluded from the peak search; skewness and
kurtosis are 0 whenever the second central moment vanishes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, CsvParseError
from .fusion import FusedSeries
from .postures import PostureLabel

CHANNELS = ("pitch", "displacement", "distance1", "distance2")
STATISTICS = (
    "mean", "std", "min", "max", "peak_freq", "mean_freq", "skewness", "kurtosis"
)
N_FEATURES = len(CHANNELS) * len(STATISTICS)

FEATURE_NAMES = tuple(f"f{i:02d}" for i in range(N_FEATURES))
FEATURE_DESCRIPTIONS = tuple(
    f"{ch}_{st}" for ch in CHANNELS for st in STATISTICS
)

FEATURES_CSV_HEADER = "participant,label," + ",".join(FEATURE_NAMES)

_EPS = 1e-12


def channel_indices(channel: str) -> range:
    """Feature-vector index range of one channel's eight statistics."""
    c = CHANNELS.index(channel)
    return range(c * len(STATISTICS), (c + 1) * len(STATISTICS))


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window geometry in seconds."""

    length_s: float = 2.0
    hop_s: float = 1.0

    def __post_init__(self):
        if not (0 < self.hop_s <= self.length_s):
            raise ConfigurationError("need 0 < hop_s <= length_s")
        if self.length_s * 50.0 < 16:
            raise ConfigurationError("window must cover at least 16 samples at 50 Hz")


@dataclass(frozen=True)
class FeatureVector:
    """32 features for one window, optionally labeled and participant-tagged."""

    values: np.ndarray
    label: Optional[PostureLabel] = None
    participant_id: int = -1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_FEATURES,):
            raise ConfigurationError(f"expected {N_FEATURES} feature values")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("feature values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def _channel_stats(x: np.ndarray, rate_hz: float) -> list[float]:
    mean = float(np.mean(x))
    centered = x - mean
    m2 = float(np.mean(centered**2))
    std = float(np.sqrt(m2))

    mags = np.abs(np.fft.rfft(centered))
    freqs = np.fft.rfftfreq(x.size, d=1.0 / rate_hz)
    if np.all(mags < _EPS):
        peak_freq = 0.0
        mean_freq = 0.0
    else:
        peak_freq = float(freqs[1:][np.argmax(mags[1:])]) if mags.size > 1 else 0.0
        mean_freq = float(np.sum(freqs * mags) / np.sum(mags))

    if m2 < _EPS:
        skewness = 0.0
        kurtosis = 0.0
    else:
        m3 = float(np.mean(centered**3))
        m4 = float(np.mean(centered**4))
        skewness = m3 / m2**1.5
        kurtosis = m4 / m2**2 - 3.0

    return [mean, std, float(np.min(x)), float(np.max(x)),
            peak_freq, mean_freq, skewness, kurtosis]


def extract_window(
    window: FusedSeries, rate_hz: float = 50.0, participant_id: int = -1
) -> Optional[FeatureVector]:
    """Compute the 32-feature vector for one dense window of fused records.

    Returns None when the window has an internal gap wider than three sample
    periods (a skip signal, not an error); windows shorter than 16 samples are
    rejected outright.
    """
    n = len(window)
    if n < 16:
        raise ConfigurationError("window must contain at least 16 records")
    if np.any(np.diff(window.timestamps_s) > 3.0 / rate_hz):
        return None
    values: list[float] = []
    for ch in CHANNELS:
        values.extend(_channel_stats(window.channel(ch), rate_hz))
    codes = window.label_codes[window.label_codes >= 0]
    label = None
    if codes.size:
        label = list(PostureLabel)[int(np.argmax(np.bincount(codes)))]
    return FeatureVector(np.array(values), label=label, participant_id=participant_id)


def extract_session(
    records: FusedSeries,
    spec: WindowSpec = WindowSpec(),
    rate_hz: float = 50.0,
    participant_id: int = -1,
) -> list[FeatureVector]:
    """Slide the window over a session; sparse windows are skipped silently.

    The window label is the majority label of its records; the participant id
    is stamped on every vector.
    """
    if len(records) > 1 and np.any(np.diff(records.timestamps_s) < 0):
        raise ConfigurationError("records must be time-ordered")
    w = int(round(spec.length_s * rate_hz))
    hop = int(round(spec.hop_s * rate_hz))
    vectors: list[FeatureVector] = []
    for start in range(0, len(records) - w + 1, hop):
        vec = extract_window(records[start:start + w], rate_hz, participant_id)
        if vec is not None:
            vectors.append(vec)
    return vectors


def write_features_csv(vectors: Sequence[FeatureVector], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(FEATURES_CSV_HEADER + "\n")
        for vec in vectors:
            label = "" if vec.label is None else vec.label.value
            row = ",".join(f"{v:.6f}" for v in vec.values)
            fh.write(f"{vec.participant_id},{label},{row}\n")


def load_features_csv(path) -> list[FeatureVector]:
    path = Path(path)
    vectors: list[FeatureVector] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != FEATURES_CSV_HEADER:
            raise CsvParseError(path, 1, "bad features CSV header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 2 + N_FEATURES:
                raise CsvParseError(
                    path, line_no, f"expected {2 + N_FEATURES} fields, got {len(row)}"
                )
            try:
                participant = int(row[0])
                values = np.array([float(v) for v in row[2:]])
            except ValueError as exc:
                raise CsvParseError(path, line_no, str(exc)) from exc
            label = None if row[1] == "" else PostureLabel.from_name(row[1])
            vectors.append(FeatureVector(values, label=label, participant_id=participant))
    return vectors
