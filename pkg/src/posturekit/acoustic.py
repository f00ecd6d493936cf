"""Chirp generation, matched-filter cross-correlation, and time-of-flight ranging.

The ranging chain is: emit a linear frequency sweep, cross-correlate each
microphone capture against the template, locate the correlation peak on the
envelope of the analytic correlation, refine it with three-point parabolic
interpolation, subtract the calibrated loopback latency, and convert the
remaining delay to distance via the speed of sound.

Peak location uses the analytic-signal envelope rather than the absolute
value of the raw correlation: a band-pass chirp correlation oscillates at the
sweep's center frequency, so |corr| peaks ride the carrier and can sit up to
half a carrier period away from the true arrival, which is several
millimetres at 48 kHz. The envelope is carrier-free and interpolates cleanly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import fft as _fft
from scipy.io import wavfile as _wavfile

from .errors import ConfigurationError, CsvParseError, NoDetectionError

SPEED_OF_SOUND_MPS = 343.0  # dry air, 20 degC

RANGING_CSV_HEADER = (
    "timestamp,raw_distance1,raw_distance2,corrected_distance1,corrected_distance2"
)

# Samples excluded on each side of the main lobe when judging peak prominence.
# The sweep's correlation main lobe is ~fs/bandwidth wide (8 samples for a
# 6 kHz sweep at 48 kHz), so 32 comfortably covers it while keeping nearby
# reflections outside.
_PROMINENCE_EXCLUSION = 32


@dataclass(frozen=True)
class SampleBuffer:
    """Uniformly sampled mono audio; the unit of all acoustic DSP."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ConfigurationError("SampleBuffer needs a non-empty 1-d sample array")
        if not self.sample_rate_hz > 0:
            raise ConfigurationError("sample_rate_hz must be positive")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class ChirpSpec:
    """Linear frequency sweep parameters."""

    f_start_hz: float
    f_end_hz: float
    duration_s: float
    sample_rate_hz: float
    amplitude: float = 0.8

    def __post_init__(self):
        if not (0 < self.f_start_hz < self.f_end_hz <= self.sample_rate_hz / 2):
            raise ConfigurationError(
                "need 0 < f_start < f_end <= sample_rate/2, got "
                f"{self.f_start_hz}..{self.f_end_hz} at fs={self.sample_rate_hz}"
            )
        if not self.duration_s > 0 or self.duration_s * self.sample_rate_hz < 8:
            raise ConfigurationError("chirp must span at least 8 samples")
        if not (0 < self.amplitude <= 1):
            raise ConfigurationError("amplitude must be in (0, 1]")

    @property
    def bandwidth_hz(self) -> float:
        return self.f_end_hz - self.f_start_hz


# Default sweep: 18 kHz up to just below Nyquist at 48 kHz. The top edge is
# pulled to 23.9 kHz to avoid the aliasing ambiguity of sweeping to exactly
# fs/2; 50 ms is long enough for good correlation gain while staying short
# against the 0.5 s chirp period.
DEFAULT_CHIRP = ChirpSpec(
    f_start_hz=18000.0,
    f_end_hz=23900.0,
    duration_s=0.05,
    sample_rate_hz=48000.0,
    amplitude=0.8,
)


@dataclass(frozen=True)
class RangingConfig:
    """Constants of the ranging chain: speed of sound, calibration, gating."""

    speed_of_sound_mps: float = SPEED_OF_SOUND_MPS
    loopback_latency_s: float = 0.0
    peak_min_prominence: float = 0.25

    def __post_init__(self):
        if not (300.0 <= self.speed_of_sound_mps <= 400.0):
            raise ConfigurationError("speed_of_sound_mps outside the sanity band for air")
        if self.loopback_latency_s < 0:
            raise ConfigurationError("loopback_latency_s must be >= 0")
        if self.peak_min_prominence < 0:
            raise ConfigurationError("peak_min_prominence must be >= 0")


@dataclass(frozen=True)
class DistanceEstimate:
    """One dual-channel ranging result, latency-corrected."""

    timestamp_s: float
    distance1_m: float
    distance2_m: float
    correlation_quality: float
    raw_distance1_m: float = math.nan
    raw_distance2_m: float = math.nan
    clamped: bool = False

    def __post_init__(self):
        for d in (self.distance1_m, self.distance2_m):
            if not (math.isfinite(d) and d >= 0):
                raise ConfigurationError("corrected distances must be finite and >= 0")


def generate_chirp(spec: ChirpSpec, fade_fraction: float = 0.1) -> SampleBuffer:
    """Synthesize a linear sweep with raised-cosine fades on both ends.

    The instantaneous frequency rises linearly from f_start to f_end over the
    duration; the output is rescaled so its peak magnitude equals
    spec.amplitude exactly.
    """
    if not (0 <= fade_fraction < 0.5):
        raise ConfigurationError("fade_fraction must be in [0, 0.5)")
    n = int(round(spec.duration_s * spec.sample_rate_hz))
    t = np.arange(n) / spec.sample_rate_hz
    rate = (spec.f_end_hz - spec.f_start_hz) / spec.duration_s
    phase = 2.0 * np.pi * (spec.f_start_hz * t + 0.5 * rate * t * t)
    x = np.sin(phase)
    n_fade = int(round(fade_fraction * n))
    if n_fade > 0:
        ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(n_fade) / n_fade))
        x[:n_fade] *= ramp
        x[-n_fade:] *= ramp[::-1]
    x *= spec.amplitude / np.max(np.abs(x))
    return SampleBuffer(x, spec.sample_rate_hz)


def cross_correlate(
    recorded: SampleBuffer, template: SampleBuffer, method: str = "auto"
) -> SampleBuffer:
    """Full linear cross-correlation of a capture against the template.

    Output index i corresponds to lag i - (len(template) - 1); a template
    arriving d samples into the recording peaks at lag d. The direct and
    transform-based paths agree to 1e-9 relative.
    """
    if recorded.sample_rate_hz != template.sample_rate_hz:
        raise ConfigurationError("recorded and template sample rates differ")
    if len(template) > len(recorded):
        raise ConfigurationError("template longer than recording")
    if method not in ("auto", "direct", "fft"):
        raise ConfigurationError(f"unknown correlation method {method!r}")
    if method == "auto":
        method = "direct" if len(recorded) * len(template) <= 1 << 16 else "fft"
    if method == "direct":
        corr = np.correlate(recorded.samples, template.samples, mode="full")
    else:
        corr = _correlate_fft(recorded.samples, template.samples)
    return SampleBuffer(corr, recorded.sample_rate_hz)


def _correlate_fft(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    n, m = a.size, v.size
    length = _fft.next_fast_len(n + m - 1)
    spec = _fft.rfft(a, length) * np.conj(_fft.rfft(v, length))
    circ = _fft.irfft(spec, length)
    # circular index k holds lag k; stitch lags -(m-1)..-1 from the tail.
    return np.concatenate([circ[length - (m - 1):], circ[:n]]) if m > 1 else circ[:n]


def _envelope(x: np.ndarray) -> np.ndarray:
    """Magnitude of the analytic signal (Hilbert transform via FFT)."""
    n = x.size
    if n == 1:
        return np.abs(x)
    length = _fft.next_fast_len(n)
    spectrum = _fft.fft(x, length)
    weights = np.zeros(length)
    weights[0] = 1.0
    if length % 2 == 0:
        weights[length // 2] = 1.0
        weights[1: length // 2] = 2.0
    else:
        weights[1: (length + 1) // 2] = 2.0
    return np.abs(_fft.ifft(spectrum * weights)[:n])


def _pick_peak(envelope: np.ndarray) -> int:
    """Earliest peak whose height reaches 90% of the global maximum.

    The direct path is the strongest arrival in the near-field scenario, but
    should a late reflection come within a whisker of it, the earliest
    credible peak is the physical one.
    """
    peak = float(envelope.max())
    above = np.flatnonzero(envelope >= 0.9 * peak)
    first = above[0]
    run_end = first
    while run_end + 1 < envelope.size and envelope[run_end + 1] >= 0.9 * peak:
        run_end += 1
    segment = envelope[first: run_end + 1]
    return int(first + np.argmax(segment))


def _parabolic_offset(y0: float, y1: float, y2: float) -> float:
    denom = y0 - 2.0 * y1 + y2
    if denom == 0.0:
        return 0.0
    delta = 0.5 * (y0 - y2) / denom
    return float(np.clip(delta, -0.5, 0.5))


def estimate_tof(
    recorded: SampleBuffer,
    template: SampleBuffer,
    cfg: RangingConfig,
    method: str = "auto",
) -> tuple[float, float]:
    """Estimate the template's time of flight within a capture.

    Returns (tof_s, quality). tof_s is the sub-sample refined peak lag over
    the sample rate minus the configured loopback latency. quality is the
    envelope peak normalized by template energy and capture RMS, clamped to
    [0, 1].

    Raises NoDetectionError when the peak does not stand out from the rest of
    the correlation by at least cfg.peak_min_prominence.
    """
    corr = cross_correlate(recorded, template, method=method)
    env = _envelope(corr.samples)
    peak_value = float(env.max())
    rec_rms = float(np.sqrt(np.mean(recorded.samples**2)))
    if peak_value <= 0.0 or rec_rms == 0.0:
        raise NoDetectionError("capture carries no signal")

    idx = _pick_peak(env)
    lo = max(0, idx - _PROMINENCE_EXCLUSION)
    hi = min(env.size, idx + _PROMINENCE_EXCLUSION + 1)
    outside = np.concatenate([env[:lo], env[hi:]])
    prominence = 1.0 - float(outside.max()) / env[idx] if outside.size else 1.0
    if prominence < cfg.peak_min_prominence:
        raise NoDetectionError(
            f"peak prominence {prominence:.3f} below threshold {cfg.peak_min_prominence:.3f}"
        )

    delta = 0.0
    if 0 < idx < env.size - 1:
        delta = _parabolic_offset(env[idx - 1], env[idx], env[idx + 1])
    lag = idx + delta - (len(template) - 1)
    tof_s = lag / recorded.sample_rate_hz - cfg.loopback_latency_s

    template_energy = float(np.sum(template.samples**2))
    norm = math.sqrt(template_energy) * rec_rms * math.sqrt(len(template))
    quality = min(1.0, env[idx] / norm) if norm > 0 else 0.0
    return tof_s, quality


def tof_to_distance(tof_s: float, cfg: RangingConfig) -> tuple[float, bool]:
    """Convert a corrected time of flight to metres.

    Negative post-calibration delays are physically impossible; they clamp to
    zero and the second element of the result flags the clamp so calibration
    drift is visible to callers.
    """
    if not math.isfinite(tof_s):
        raise ConfigurationError("tof_s must be finite")
    distance = tof_s * cfg.speed_of_sound_mps
    if distance < 0.0:
        return 0.0, True
    return distance, False


def calibrate_loopback(
    recorded_at_contact: SampleBuffer,
    template: SampleBuffer,
    cfg: Optional[RangingConfig] = None,
) -> float:
    """Measure the fixed playback-to-capture latency from a contact recording.

    The microphones sit against the speaker, so the raw peak lag is pure
    pipeline delay. Store the result into RangingConfig.loopback_latency_s.
    """
    base = cfg if cfg is not None else RangingConfig()
    raw_cfg = replace(base, loopback_latency_s=0.0)
    latency_s, _ = estimate_tof(recorded_at_contact, template, raw_cfg)
    return latency_s


def range_dual(
    mic1: SampleBuffer,
    mic2: SampleBuffer,
    template: SampleBuffer,
    cfg: RangingConfig,
    timestamp_s: float,
) -> Optional[DistanceEstimate]:
    """Range both microphone channels for one chirp slot.

    Returns None (a missing estimate) when either channel yields no credible
    detection; fusion treats the slot as absent.
    """
    try:
        tof1, q1 = estimate_tof(mic1, template, cfg)
        tof2, q2 = estimate_tof(mic2, template, cfg)
    except NoDetectionError:
        return None
    d1, clamped1 = tof_to_distance(tof1, cfg)
    d2, clamped2 = tof_to_distance(tof2, cfg)
    raw1 = (tof1 + cfg.loopback_latency_s) * cfg.speed_of_sound_mps
    raw2 = (tof2 + cfg.loopback_latency_s) * cfg.speed_of_sound_mps
    return DistanceEstimate(
        timestamp_s=timestamp_s,
        distance1_m=d1,
        distance2_m=d2,
        correlation_quality=min(q1, q2),
        raw_distance1_m=raw1,
        raw_distance2_m=raw2,
        clamped=clamped1 or clamped2,
    )


def read_wav(path, n_channels: int = 1) -> list[SampleBuffer]:
    """Read the first n channels of a WAV file as normalized float buffers.

    PCM 16/32-bit samples are scaled to [-1, 1]; float32/float64 pass through.
    The sample rate comes from the header.
    """
    rate, data = _wavfile.read(str(path))
    if data.ndim == 1:
        data = data[:, None]
    if n_channels > data.shape[1]:
        raise ConfigurationError(
            f"requested {n_channels} channels, file has {data.shape[1]}"
        )
    if data.dtype == np.int16:
        scaled = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        scaled = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        scaled = data.astype(np.float64)
    else:
        raise ConfigurationError(f"unsupported WAV sample format {data.dtype}")
    return [SampleBuffer(scaled[:, ch], float(rate)) for ch in range(n_channels)]


def write_wav(path, buffers: SampleBuffer | Sequence[SampleBuffer]) -> None:
    """Write one or more equal-rate buffers as a float32 WAV file."""
    if isinstance(buffers, SampleBuffer):
        buffers = [buffers]
    rates = {b.sample_rate_hz for b in buffers}
    if len(rates) != 1:
        raise ConfigurationError("all channels must share one sample rate")
    data = np.stack([b.samples for b in buffers], axis=1).astype(np.float32)
    if data.shape[1] == 1:
        data = data[:, 0]
    _wavfile.write(str(path), int(rates.pop()), data)


def write_ranging_csv(estimates: Sequence[DistanceEstimate], path) -> None:
    """Log raw and corrected dual-channel distances, 6 decimal places."""
    with open(path, "w", newline="") as fh:
        fh.write(RANGING_CSV_HEADER + "\n")
        for est in estimates:
            fh.write(
                f"{est.timestamp_s:.6f},{est.raw_distance1_m:.6f},"
                f"{est.raw_distance2_m:.6f},{est.distance1_m:.6f},"
                f"{est.distance2_m:.6f}\n"
            )


def load_ranging_csv(path) -> list[DistanceEstimate]:
    path = Path(path)
    estimates: list[DistanceEstimate] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != RANGING_CSV_HEADER:
            raise CsvParseError(path, 1, "bad ranging CSV header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise CsvParseError(path, line_no, f"expected 5 fields, got {len(row)}")
            try:
                ts, raw1, raw2, d1, d2 = (float(v) for v in row)
            except ValueError as exc:
                raise CsvParseError(path, line_no, str(exc)) from exc
            estimates.append(
                DistanceEstimate(
                    timestamp_s=ts,
                    distance1_m=d1,
                    distance2_m=d2,
                    correlation_quality=1.0,
                    raw_distance1_m=raw1,
                    raw_distance2_m=raw2,
                )
            )
    return estimates
