"""Merge the 50 Hz kinematic trace with ~2 Hz ranging into fused records.

Distances are piecewise-constant between chirps, so the merge is a zero-order
hold keyed on timestamps: every kinematic sample takes the most recent
estimate no older than the staleness bound. Samples before the first estimate
and samples whose freshest estimate has gone stale are dropped rather than
emitted with gaps, keeping downstream feature windows dense.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .acoustic import DistanceEstimate
from .errors import CsvParseError, ValidationError
from .imu import KinematicTrace
from .postures import PostureLabel

FUSED_CSV_HEADER = "timestamp,pitch,displacement,distance1,distance2,label"

DEFAULT_MAX_STALENESS_S = 0.75


@dataclass(frozen=True)
class FusedRecord:
    """One row of the fused stream: timestamp, pitch, displacement, two distances."""

    timestamp_s: float
    pitch_deg: float
    displacement_x_m: float
    distance1_m: float
    distance2_m: float
    label: Optional[PostureLabel] = None


class FusedSeries:
    """Column-array container for fused records; indexes like a sequence."""

    def __init__(
        self,
        timestamps_s: np.ndarray,
        pitch_deg: np.ndarray,
        displacement_x_m: np.ndarray,
        distance1_m: np.ndarray,
        distance2_m: np.ndarray,
        labels: Optional[Sequence[Optional[PostureLabel]]] = None,
    ):
        self.timestamps_s = np.asarray(timestamps_s, dtype=np.float64)
        self.pitch_deg = np.asarray(pitch_deg, dtype=np.float64)
        self.displacement_x_m = np.asarray(displacement_x_m, dtype=np.float64)
        self.distance1_m = np.asarray(distance1_m, dtype=np.float64)
        self.distance2_m = np.asarray(distance2_m, dtype=np.float64)
        n = self.timestamps_s.size
        lengths = {
            self.pitch_deg.size, self.displacement_x_m.size,
            self.distance1_m.size, self.distance2_m.size,
        }
        if lengths != {n}:
            raise ValidationError("fused channels must have equal length")
        # labels held as class codes, -1 meaning unlabeled
        order = list(PostureLabel)
        if labels is None:
            self.label_codes = np.full(n, -1, dtype=np.int8)
        else:
            if len(labels) != n:
                raise ValidationError("label count must match record count")
            self.label_codes = np.array(
                [-1 if lab is None else order.index(lab) for lab in labels],
                dtype=np.int8,
            )

    def __len__(self) -> int:
        return self.timestamps_s.size

    def label_at(self, i: int) -> Optional[PostureLabel]:
        code = int(self.label_codes[i])
        return None if code < 0 else list(PostureLabel)[code]

    def __getitem__(self, key):
        if isinstance(key, slice):
            return FusedSeries(
                self.timestamps_s[key], self.pitch_deg[key],
                self.displacement_x_m[key], self.distance1_m[key],
                self.distance2_m[key],
                [self.label_at(i) for i in range(*key.indices(len(self)))],
            )
        return FusedRecord(
            self.timestamps_s[key], self.pitch_deg[key],
            self.displacement_x_m[key], self.distance1_m[key],
            self.distance2_m[key], self.label_at(key),
        )

    def __iter__(self) -> Iterator[FusedRecord]:
        for i in range(len(self)):
            yield self[i]

    def with_label(self, label: Optional[PostureLabel]) -> "FusedSeries":
        return FusedSeries(
            self.timestamps_s, self.pitch_deg, self.displacement_x_m,
            self.distance1_m, self.distance2_m, [label] * len(self),
        )

    def channel(self, name: str) -> np.ndarray:
        return {
            "pitch": self.pitch_deg,
            "displacement": self.displacement_x_m,
            "distance1": self.distance1_m,
            "distance2": self.distance2_m,
        }[name]


def merge(
    trace: KinematicTrace,
    estimates: Sequence[Optional[DistanceEstimate]],
    max_staleness_s: float = DEFAULT_MAX_STALENESS_S,
) -> FusedSeries:
    """Zero-order-hold merge of the kinematic trace with distance estimates.

    Each kinematic sample is paired with the most recent estimate whose age is
    at most max_staleness_s. None entries (missing ranging slots) simply do
    not refresh the hold. Kinematic samples with no fresh estimate are
    dropped.
    """
    valid = [e for e in estimates if e is not None]
    if len(trace) == 0 or not valid:
        return FusedSeries(
            np.array([]), np.array([]), np.array([]), np.array([]), np.array([])
        )
    est_times = np.array([e.timestamp_s for e in valid])
    if np.any(np.diff(est_times) < 0):
        raise ValidationError("estimates must be time-ordered")
    d1 = np.array([e.distance1_m for e in valid])
    d2 = np.array([e.distance2_m for e in valid])

    t = trace.timestamps_s
    idx = np.searchsorted(est_times, t, side="right") - 1
    fresh = idx >= 0
    age = np.where(fresh, t - est_times[np.clip(idx, 0, None)], np.inf)
    keep = fresh & (age <= max_staleness_s)
    idx = idx[keep]
    return FusedSeries(
        t[keep], trace.pitch_deg[keep], trace.displacement_x_m[keep],
        d1[idx], d2[idx],
    )


def write_fused_csv(series: FusedSeries, path) -> None:
    """Write the fused stream; the label column is empty for unlabeled rows."""
    with open(path, "w", newline="") as fh:
        fh.write(FUSED_CSV_HEADER + "\n")
        for i in range(len(series)):
            label = series.label_at(i)
            fh.write(
                f"{series.timestamps_s[i]:.6f},{series.pitch_deg[i]:.6f},"
                f"{series.displacement_x_m[i]:.6f},{series.distance1_m[i]:.6f},"
                f"{series.distance2_m[i]:.6f},{'' if label is None else label.value}\n"
            )


def load_fused_csv(path) -> FusedSeries:
    path = Path(path)
    columns: list[list[float]] = [[] for _ in range(5)]
    labels: list[Optional[PostureLabel]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != FUSED_CSV_HEADER:
            raise CsvParseError(path, 1, "bad fused CSV header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise CsvParseError(path, line_no, f"expected 6 fields, got {len(row)}")
            try:
                for col, v in zip(columns, row[:5]):
                    col.append(float(v))
            except ValueError as exc:
                raise CsvParseError(path, line_no, str(exc)) from exc
            labels.append(None if row[5] == "" else PostureLabel.from_name(row[5]))
    return FusedSeries(*(np.array(c) for c in columns), labels=labels)
