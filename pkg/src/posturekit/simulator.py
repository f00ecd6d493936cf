"""Physics-based sensor simulator: labeled IMU traces and dual-mic captures.

Stands in for the hearable hardware and the participant study. All posture
parameter magnitudes below are simulator constants chosen to preserve the
documented ordinal relations (deeper bends pitch further down, hunching sits
closest to the screen and moves the most); they are not measured values, and
tests assert orderings rather than magnitudes.

Sign convention: neck flexion (looking down) is negative pitch.

Everything is a pure function of (configuration, seed). Child seeds derive
through seeding.derive_seed, so a dataset generated serially is byte-identical
to one generated with any parallel fan-out over participants or sessions.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import fft as _fft

from .acoustic import (
    DEFAULT_CHIRP,
    SPEED_OF_SOUND_MPS,
    ChirpSpec,
    DistanceEstimate,
    RangingConfig,
    SampleBuffer,
    calibrate_loopback,
    generate_chirp,
    range_dual,
)
from .errors import ConfigurationError
from .fusion import FusedSeries, merge, write_fused_csv
from .imu import ImuSeries, integrate_displacement, smooth
from .postures import PostureLabel
from .seeding import derive_seed

MANIFEST_CSV_HEADER = "participant,posture,session,path,seed"

IMU_RATE_HZ = 50.0
CHIRP_PERIOD_S = 0.5
TRANSITION_S = 2.0  # settle-into-posture ramp at session start
SWAY_FREQ_HZ = 0.25  # torso sway that drives the x-displacement channel
MOVEMENT_FREQ_HZ = 0.2  # slow head sway for the movement condition
GRAVITY_MPS2 = 9.81

# Fixed playback-to-capture pipeline delay of the simulated rig: 512 samples
# at 48 kHz. Real systems measure this with a contact calibration.
DEFAULT_PIPELINE_DELAY_S = 512.0 / 48000.0


class Condition(enum.Enum):
    """Acoustic scene conditions of the distance experiments."""

    SILENCE = "silence"
    PINK_NOISE_75 = "pink"
    POP_MUSIC_82 = "music"
    SILENCE_WITH_MOVEMENT = "movement"


@dataclass(frozen=True)
class PostureProfile:
    """Per-posture signal parameters of the simulator."""

    label: PostureLabel
    pitch_mean_deg: float
    pitch_jitter_deg: float
    displacement_amp_m: float
    screen_distance_m: float
    distance_jitter_m: float

    def __post_init__(self):
        if not (0.1 < self.screen_distance_m < 1.5):
            raise ConfigurationError("screen_distance_m must lie in (0.1, 1.5)")
        if self.pitch_jitter_deg < 0 or self.distance_jitter_m < 0:
            raise ConfigurationError("jitters must be >= 0")


@dataclass(frozen=True)
class ParticipantModel:
    """Inter-participant variability: neutral offset, mic placement, motility."""

    id: int
    neutral_pitch_offset_deg: float = 0.0
    mic_offsets_m: tuple[float, float] = (0.0, 0.0)
    movement_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        for off in self.mic_offsets_m:
            if abs(off) > 0.05:
                raise ConfigurationError("mic offsets must lie in [-0.05, 0.05] m")
        if not self.movement_scale > 0:
            raise ConfigurationError("movement_scale must be positive")


@dataclass(frozen=True)
class AcousticSceneConfig:
    """Noise condition, SNR, reflections, and head-movement amplitude."""

    condition: Condition = Condition.SILENCE
    snr_db: float = math.inf
    n_reflections: int = 2
    reflection_atten: float = 0.3
    movement_amp_m: float = 0.0

    def __post_init__(self):
        if self.n_reflections < 0:
            raise ConfigurationError("n_reflections must be >= 0")
        if not (0 <= self.reflection_atten < 1):
            raise ConfigurationError("reflection_atten must lie in [0, 1)")
        if self.movement_amp_m < 0:
            raise ConfigurationError("movement_amp_m must be >= 0")


def scene_for_condition(condition: Condition, **overrides) -> AcousticSceneConfig:
    """Pinned scene defaults per condition.

    The experiment's sound pressure levels cannot be reproduced without
    hardware calibration, so they map to SNR relative to the received chirp:
    pink noise at 6 dB and the louder pop music at 0 dB.
    """
    defaults = {
        Condition.SILENCE: dict(snr_db=math.inf, movement_amp_m=0.0),
        Condition.PINK_NOISE_75: dict(snr_db=6.0, movement_amp_m=0.0),
        Condition.POP_MUSIC_82: dict(snr_db=0.0, movement_amp_m=0.0),
        Condition.SILENCE_WITH_MOVEMENT: dict(snr_db=math.inf, movement_amp_m=0.02),
    }[condition]
    defaults.update(overrides)
    return AcousticSceneConfig(condition=condition, **defaults)


def default_profiles() -> dict[PostureLabel, PostureProfile]:
    """The pinned per-posture parameter table (simulator constants)."""
    rows = [
        # label,            pitch,  jitter, disp_amp, screen_d, dist_jitter
        (PostureLabel.NEUTRAL,      -2.0, 0.6, 0.005, 0.60, 0.006),
        (PostureLabel.FORWARD_HEAD, -10.0, 0.8, 0.020, 0.45, 0.006),
        (PostureLabel.SLIGHT_BEND,  -25.0, 1.0, 0.010, 0.50, 0.006),
        (PostureLabel.SEVERE_BEND,  -50.0, 1.2, 0.015, 0.40, 0.006),
        (PostureLabel.HUNCH,        -45.0, 1.5, 0.060, 0.35, 0.006),
    ]
    return {
        label: PostureProfile(label, pitch, jitter, disp, screen, djit)
        for label, pitch, jitter, disp, screen, djit in rows
    }


def make_participants(n: int, seed: int) -> list[ParticipantModel]:
    """Draw a virtual cohort: neutral-pitch offsets, mic placement, motility."""
    participants = []
    for pid in range(1, n + 1):
        rng = np.random.default_rng(derive_seed(seed, "participant", pid))
        offset = float(np.clip(rng.normal(0.0, 4.5), -9.0, 9.0))
        mic1, mic2 = rng.uniform(-0.04, 0.04, size=2)
        scale = float(rng.uniform(0.7, 1.4))
        participants.append(ParticipantModel(
            id=pid,
            neutral_pitch_offset_deg=offset,
            mic_offsets_m=(float(mic1), float(mic2)),
            movement_scale=scale,
            rng_seed=derive_seed(seed, "participant-stream", pid),
        ))
    return participants


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _band_limited_noise(n: int, rng: np.random.Generator, window: int = 25) -> np.ndarray:
    """Unit-variance smooth noise (moving-averaged white noise)."""
    raw = rng.standard_normal(n + window)
    kernel = np.ones(window) / window
    smoothed = np.convolve(raw, kernel, mode="valid")[:n]
    std = smoothed.std()
    return smoothed / std if std > 0 else smoothed


def synth_imu(
    profile: PostureProfile,
    participant: ParticipantModel,
    duration_s: float,
    rate_hz: float = IMU_RATE_HZ,
    seed: Optional[int] = None,
) -> ImuSeries:
    """Synthesize a head-tracker stream for one posture-holding session.

    Pitch ramps from the participant's neutral into the posture over the
    first 2 s, then holds with band-limited jitter. The x acceleration carries
    the static gravity projection of the held pitch, the transition ramp, a
    slow sway whose displacement amplitude is posture-specific, and micro
    movement noise scaled per participant.
    """
    if not duration_s > 0:
        raise ConfigurationError("duration_s must be positive")
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    if seed is None:
        seed = derive_seed(participant.rng_seed, "imu", profile.label.name)
    rng = np.random.default_rng(seed)

    ramp = _smoothstep(t / TRANSITION_S)
    base_pitch = participant.neutral_pitch_offset_deg + profile.pitch_mean_deg * ramp
    jitter = profile.pitch_jitter_deg * _band_limited_noise(n, rng)
    pitch = np.clip(base_pitch + jitter, -90.0, 90.0)

    # transition: one smoothstep translation toward the screen, scaled with
    # how far the posture pitches down
    trans_dist = -0.0015 * profile.pitch_mean_deg
    u = np.clip(t / TRANSITION_S, 0.0, 1.0)
    a_trans = np.where(t < TRANSITION_S,
                       trans_dist * (6.0 - 12.0 * u) / TRANSITION_S**2, 0.0)

    sway_phase = 2.0 * np.pi * rng.random()
    omega = 2.0 * np.pi * SWAY_FREQ_HZ
    a_sway = -(omega**2) * profile.displacement_amp_m * np.sin(omega * t + sway_phase)

    micro = 0.05 * participant.movement_scale * rng.standard_normal(n)
    gravity_x = GRAVITY_MPS2 * np.sin(np.radians(base_pitch))
    ax = gravity_x + a_trans + a_sway + micro

    yaw = 2.0 * _band_limited_noise(n, rng)
    roll = 1.0 * _band_limited_noise(n, rng)
    ay = 0.03 * rng.standard_normal(n)
    az = -GRAVITY_MPS2 * np.cos(np.radians(base_pitch)) + 0.03 * rng.standard_normal(n)

    return ImuSeries(
        timestamps_s=t, yaw_deg=yaw, pitch_deg=pitch, roll_deg=roll,
        ax=ax, ay=ay, az=az, nominal_rate_hz=rate_hz,
    )


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spectrum = _fft.rfft(rng.standard_normal(n))
    freqs = np.arange(spectrum.size, dtype=np.float64)
    freqs[0] = 1.0
    spectrum /= np.sqrt(freqs)
    spectrum[0] = 0.0
    noise = _fft.irfft(spectrum, n)
    return noise / np.sqrt(np.mean(noise**2))


def _music_noise(n: int, rng: np.random.Generator, fs: float) -> np.ndarray:
    """Amplitude-modulated broadband stand-in for pop music."""
    spectrum = _fft.rfft(rng.standard_normal(n))
    freqs = _fft.rfftfreq(n, 1.0 / fs)
    spectrum[(freqs < 60.0) | (freqs > 16000.0)] = 0.0
    carrier = _fft.irfft(spectrum, n)
    t = np.arange(n) / fs
    phase = 2.0 * np.pi * rng.random()
    envelope = 0.35 + 0.65 * np.abs(np.sin(2.0 * np.pi * 2.1 * t + phase)
                                    + 0.5 * np.sin(2.0 * np.pi * 0.7 * t))
    noise = carrier * envelope
    return noise / np.sqrt(np.mean(noise**2))


def _slow_sway(amp: float, timestamp_s: float, seed: int) -> float:
    """Deterministic band-limited sway of the true distance, as a function of time."""
    if amp == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    total = 0.0
    for k in range(3):
        freq = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        total += math.sin(2.0 * math.pi * freq * timestamp_s + phase)
    return amp * total / math.sqrt(3.0 / 2.0)  # three sinusoids have rms sqrt(3/2)


def synth_capture(
    profile: PostureProfile,
    participant: ParticipantModel,
    scene: AcousticSceneConfig,
    template: SampleBuffer,
    pipeline_delay_s: float = DEFAULT_PIPELINE_DELAY_S,
    timestamp_s: float = 0.0,
    seed: Optional[int] = None,
) -> tuple[SampleBuffer, SampleBuffer, tuple[float, float]]:
    """Simulate one dual-microphone chirp capture.

    Each channel is the template band-limited-delayed by the pipeline delay
    plus its propagation time, attenuated by 1/distance, plus delayed
    attenuated reflections and condition-shaped additive noise at the
    configured SNR (mean-square ratio against the received direct path over
    the capture). Returns both channels and the ground-truth instantaneous
    distances for oracle tests.
    """
    fs = template.sample_rate_hz
    c = SPEED_OF_SOUND_MPS
    if seed is None:
        seed = derive_seed(participant.rng_seed, "capture")
    rng = np.random.default_rng(seed)

    sway = _slow_sway(profile.distance_jitter_m, timestamp_s,
                      derive_seed(participant.rng_seed, "distance-sway"))
    movement = 0.0
    if scene.condition is Condition.SILENCE_WITH_MOVEMENT and scene.movement_amp_m > 0:
        phase = 2.0 * np.pi * (derive_seed(participant.rng_seed, "movement") % 4096) / 4096.0
        movement = scene.movement_amp_m * math.sin(
            2.0 * math.pi * MOVEMENT_FREQ_HZ * timestamp_s + phase
        )

    distances = tuple(
        profile.screen_distance_m + off + sway + movement
        for off in participant.mic_offsets_m
    )

    max_extra = 1.0  # reflections add at most this much path (metres)
    capture_len = int(math.ceil(
        fs * (pipeline_delay_s + (max(distances) + max_extra) / c + 0.015)
    )) + len(template)
    length = _fft.next_fast_len(capture_len)
    freqs = _fft.rfftfreq(length, 1.0 / fs)
    template_spectrum = _fft.rfft(template.samples, length)

    # room geometry is stable within a session: reflections derive from the
    # participant/condition, not from the per-capture seed
    room_rng = np.random.default_rng(
        derive_seed(participant.rng_seed, "room", scene.condition.name)
    )
    extra_paths = room_rng.uniform(0.3, max_extra, size=scene.n_reflections)

    channels = []
    for ch, dist in enumerate(distances):
        spectrum = np.zeros_like(template_spectrum)
        if scene.snr_db != -math.inf:
            delay = pipeline_delay_s + dist / c
            spectrum += np.exp(-2j * np.pi * freqs * delay) / dist
            for extra in extra_paths:
                path = dist + extra
                refl_delay = pipeline_delay_s + path / c
                spectrum += (scene.reflection_atten / path) * np.exp(
                    -2j * np.pi * freqs * refl_delay
                )
        signal = _fft.irfft(spectrum * template_spectrum, length)[:capture_len]

        if scene.condition is Condition.PINK_NOISE_75 or scene.condition is Condition.POP_MUSIC_82:
            if scene.snr_db == -math.inf:
                noise_rms = 0.05
            else:
                direct_power = float(np.sum(template.samples**2)) / dist**2 / capture_len
                noise_rms = math.sqrt(direct_power / 10.0 ** (scene.snr_db / 10.0))
            if scene.condition is Condition.PINK_NOISE_75:
                noise = _pink_noise(capture_len, rng)
            else:
                noise = _music_noise(capture_len, rng, fs)
            signal = signal + noise_rms * noise
        channels.append(SampleBuffer(signal, fs))

    return channels[0], channels[1], distances


def synth_contact_capture(
    template: SampleBuffer, pipeline_delay_s: float = DEFAULT_PIPELINE_DELAY_S
) -> SampleBuffer:
    """Capture with the microphone against the speaker: pipeline delay only."""
    fs = template.sample_rate_hz
    capture_len = int(math.ceil(fs * (pipeline_delay_s + 0.01))) + len(template)
    length = _fft.next_fast_len(capture_len)
    freqs = _fft.rfftfreq(length, 1.0 / fs)
    spectrum = _fft.rfft(template.samples, length) * np.exp(
        -2j * np.pi * freqs * pipeline_delay_s
    )
    return SampleBuffer(_fft.irfft(spectrum, length)[:capture_len], fs)


def calibrated_ranging_config(
    template: SampleBuffer,
    pipeline_delay_s: float = DEFAULT_PIPELINE_DELAY_S,
    base: Optional[RangingConfig] = None,
) -> RangingConfig:
    """Run the real loopback calibration against a simulated contact capture."""
    base = base if base is not None else RangingConfig()
    contact = synth_contact_capture(template, pipeline_delay_s)
    latency = calibrate_loopback(contact, template, base)
    return replace(base, loopback_latency_s=latency)


def synth_session(
    profile: PostureProfile,
    participant: ParticipantModel,
    scene: AcousticSceneConfig,
    duration_s: float = 180.0,
    chirp: ChirpSpec = DEFAULT_CHIRP,
    ranging_cfg: Optional[RangingConfig] = None,
    pipeline_delay_s: float = DEFAULT_PIPELINE_DELAY_S,
    seed: Optional[int] = None,
    smoothing_window: int = 5,
    reset_period_s: float = 2.0,
) -> FusedSeries:
    """One labeled recording, produced through the real processing pipeline.

    The IMU stream is smoothed and double-integrated, chirps fire every 0.5 s
    through synth_capture and the matched-filter ranger, and the two streams
    are merged on timestamps. No shortcuts from ground truth.
    """
    if seed is None:
        seed = derive_seed(participant.rng_seed, "session", profile.label.name)
    template = generate_chirp(chirp)
    if ranging_cfg is None:
        ranging_cfg = calibrated_ranging_config(template, pipeline_delay_s)

    series = synth_imu(profile, participant, duration_s,
                       seed=derive_seed(seed, "imu"))
    trace = integrate_displacement(smooth(series, smoothing_window), reset_period_s)

    estimates: list[Optional[DistanceEstimate]] = []
    n_chirps = int(math.floor(duration_s / CHIRP_PERIOD_S))
    for k in range(n_chirps):
        ts = k * CHIRP_PERIOD_S
        mic1, mic2, _truth = synth_capture(
            profile, participant, scene, template, pipeline_delay_s,
            timestamp_s=ts, seed=derive_seed(seed, "chirp", k),
        )
        estimates.append(range_dual(mic1, mic2, template, ranging_cfg, ts))

    fused = merge(trace, estimates)
    return fused.with_label(profile.label)


def synth_dataset(
    participants: int,
    sessions_per_posture: int,
    seed: int,
    out_dir,
    duration_s: float = 180.0,
    scene: Optional[AcousticSceneConfig] = None,
    chirp: ChirpSpec = DEFAULT_CHIRP,
    profiles: Optional[dict[PostureLabel, PostureProfile]] = None,
) -> Path:
    """Generate the labeled fused dataset plus its manifest; returns the manifest path.

    Layout: one fused CSV per (participant, posture, session) and a manifest
    with `participant,posture,session,path,seed` rows for split control.
    Byte-identical for identical arguments.
    """
    if participants < 2:
        raise ConfigurationError("need at least 2 participants for a train/test split")
    if sessions_per_posture < 1:
        raise ConfigurationError("sessions_per_posture must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = scene if scene is not None else AcousticSceneConfig()
    profiles = profiles if profiles is not None else default_profiles()

    template = generate_chirp(chirp)
    ranging_cfg = calibrated_ranging_config(template)

    cohort = make_participants(participants, seed)
    manifest_rows: list[tuple[int, str, int, str, int]] = []
    for person in cohort:
        for label in PostureLabel:
            profile = profiles[label]
            for session_idx in range(sessions_per_posture):
                session_seed = derive_seed(
                    seed, "session", person.id, label.name, session_idx
                )
                fused = synth_session(
                    profile, person, scene,
                    duration_s=duration_s, chirp=chirp,
                    ranging_cfg=ranging_cfg, seed=session_seed,
                )
                name = f"p{person.id:02d}_{label.value}_s{session_idx}.csv"
                write_fused_csv(fused, out_dir / name)
                manifest_rows.append(
                    (person.id, label.value, session_idx, name, session_seed)
                )

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        fh.write(MANIFEST_CSV_HEADER + "\n")
        for pid, label, sess, name, sseed in manifest_rows:
            fh.write(f"{pid},{label},{sess},{name},{sseed}\n")
    return manifest_path


def load_manifest(path) -> list[dict]:
    """Read a dataset manifest into row dicts with typed fields."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != MANIFEST_CSV_HEADER:
            raise ConfigurationError(f"bad manifest header in {path}")
        for row in reader:
            rows.append({
                "participant": int(row[0]),
                "posture": PostureLabel.from_name(row[1]),
                "session": int(row[2]),
                "path": path.parent / row[3],
                "seed": int(row[4]),
            })
    return rows
