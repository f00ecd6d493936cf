"""Real-time alert assessment as a pure state machine.

step() is a deterministic transition function over immutable state values:
replaying a stream gives identical events, and splitting a stream at any
point and resuming with the carried state equals unsplit processing.

Two alert kinds: a posture that persists past its dwell threshold, and a
screen distance that stays below the minimum for too long. Each (kind,
posture) pair fires at most once per cooldown window. Posture flips shorter
than the debounce interval are treated as classifier noise and do not reset
the previous dwell.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

from .errors import ConfigurationError, StateError
from .fusion import FusedRecord
from .postures import PostureLabel

ALERTS_CSV_HEADER = "timestamp,kind,posture,dwell,message"


class AlertKind(enum.Enum):
    POSTURE_PERSISTED = "PosturePersisted"
    TOO_CLOSE_TO_SCREEN = "TooCloseToScreen"


def _default_thresholds() -> Mapping[PostureLabel, Optional[float]]:
    # severity-ordered defaults; Neutral never alerts. Physician-tunable.
    return MappingProxyType({
        PostureLabel.NEUTRAL: None,
        PostureLabel.FORWARD_HEAD: 120.0,
        PostureLabel.SLIGHT_BEND: 90.0,
        PostureLabel.SEVERE_BEND: 30.0,
        PostureLabel.HUNCH: 45.0,
    })


@dataclass(frozen=True)
class AlertPolicy:
    """Dwell thresholds, screen-distance rule, cooldown, and debounce."""

    posture_thresholds_s: Mapping[PostureLabel, Optional[float]] = field(
        default_factory=_default_thresholds
    )
    min_screen_distance_m: float = 0.40
    distance_threshold_s: float = 60.0
    cooldown_s: float = 300.0
    debounce_s: float = 2.0

    def __post_init__(self):
        object.__setattr__(
            self, "posture_thresholds_s",
            MappingProxyType(dict(self.posture_thresholds_s)),
        )
        for label, thr in self.posture_thresholds_s.items():
            if thr is not None and not thr > 0:
                raise ConfigurationError(f"threshold for {label.value} must be > 0")
        if not self.distance_threshold_s > 0 or not self.cooldown_s > 0:
            raise ConfigurationError("time thresholds must be > 0")
        if self.debounce_s < 0:
            raise ConfigurationError("debounce_s must be >= 0")


@dataclass(frozen=True)
class AlertEvent:
    timestamp_s: float
    kind: AlertKind
    posture: Optional[PostureLabel]
    dwell_s: float
    message: str


@dataclass(frozen=True)
class MonitorState:
    """Immutable monitor state; create via initial_state() and advance via step()."""

    posture: Optional[PostureLabel] = None
    posture_since_s: float = 0.0
    candidate: Optional[PostureLabel] = None
    candidate_since_s: float = 0.0
    close_since_s: Optional[float] = None
    last_now_s: float = -math.inf
    # ((kind value, posture value or ""), fired-at time) pairs, kept sorted
    fired: tuple[tuple[tuple[str, str], float], ...] = ()

    def fired_at(self, kind: AlertKind, posture: Optional[PostureLabel]) -> float:
        key = (kind.value, posture.value if posture else "")
        for k, t in self.fired:
            if k == key:
                return t
        return -math.inf

    def _with_fired(self, kind: AlertKind, posture: Optional[PostureLabel],
                    now_s: float) -> tuple[tuple[tuple[str, str], float], ...]:
        key = (kind.value, posture.value if posture else "")
        entries = dict(self.fired)
        entries[key] = now_s
        return tuple(sorted(entries.items()))


def initial_state() -> MonitorState:
    return MonitorState()


def step(
    state: MonitorState,
    record: FusedRecord,
    predicted: PostureLabel,
    now_s: float,
    policy: AlertPolicy = AlertPolicy(),
) -> tuple[MonitorState, list[AlertEvent]]:
    """Advance the monitor by one fused record and classification.

    Raises StateError if now_s moves backwards. Returns the successor state
    and any events that fired at this instant.
    """
    if now_s < state.last_now_s:
        raise StateError(f"time regressed from {state.last_now_s} to {now_s}")

    posture = state.posture
    posture_since = state.posture_since_s
    candidate = state.candidate
    candidate_since = state.candidate_since_s

    if posture is None:
        posture, posture_since = predicted, now_s
        candidate = None
    elif predicted == posture:
        candidate = None
    elif predicted == candidate:
        if now_s - candidate_since >= policy.debounce_s:
            posture, posture_since = candidate, candidate_since
            candidate = None
    else:
        candidate, candidate_since = predicted, now_s

    events: list[AlertEvent] = []
    fired = state.fired

    dwell = now_s - posture_since
    threshold = policy.posture_thresholds_s.get(posture)
    if threshold is not None and dwell >= threshold:
        if now_s - state.fired_at(AlertKind.POSTURE_PERSISTED, posture) >= policy.cooldown_s:
            events.append(AlertEvent(
                timestamp_s=now_s,
                kind=AlertKind.POSTURE_PERSISTED,
                posture=posture,
                dwell_s=dwell,
                message=(f"{posture.value} held for {dwell:.0f}s "
                         f"(threshold {threshold:.0f}s); adjust your posture"),
            ))

    close_since = state.close_since_s
    if min(record.distance1_m, record.distance2_m) < policy.min_screen_distance_m:
        if close_since is None:
            close_since = now_s
        close_dwell = now_s - close_since
        if close_dwell >= policy.distance_threshold_s:
            if now_s - state.fired_at(AlertKind.TOO_CLOSE_TO_SCREEN, None) >= policy.cooldown_s:
                events.append(AlertEvent(
                    timestamp_s=now_s,
                    kind=AlertKind.TOO_CLOSE_TO_SCREEN,
                    posture=None,
                    dwell_s=close_dwell,
                    message=(f"closer than {policy.min_screen_distance_m:.2f}m "
                             f"for {close_dwell:.0f}s; move back from the screen"),
                ))
    else:
        close_since = None

    new_state = MonitorState(
        posture=posture,
        posture_since_s=posture_since,
        candidate=candidate,
        candidate_since_s=candidate_since,
        close_since_s=close_since,
        last_now_s=now_s,
        fired=fired,
    )
    for event in events:
        new_state = replace(
            new_state, fired=new_state._with_fired(event.kind, event.posture, now_s)
        )
    return new_state, events


def format_event(event: AlertEvent) -> str:
    """Single-line record for live output."""
    posture = event.posture.value if event.posture else "-"
    return (f"ALERT t={event.timestamp_s:.2f}s kind={event.kind.value} "
            f"posture={posture} dwell={event.dwell_s:.1f}s :: {event.message}")


def write_alerts_csv(events: Sequence[AlertEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(ALERTS_CSV_HEADER + "\n")
        for ev in events:
            posture = ev.posture.value if ev.posture else ""
            message = ev.message.replace(",", ";")
            fh.write(f"{ev.timestamp_s:.6f},{ev.kind.value},{posture},"
                     f"{ev.dwell_s:.6f},{message}\n")
