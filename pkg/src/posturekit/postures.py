"""The closed five-posture taxonomy used throughout the pipeline."""

from __future__ import annotations

import enum


class PostureLabel(enum.Enum):
    """Head/neck postures ordered from baseline to most stooped.

    The definition order is the canonical class order: probability vectors,
    confusion matrices, and argmax tie-breaks all follow it.
    """

    NEUTRAL = "Neutral"
    FORWARD_HEAD = "ForwardHead"
    SLIGHT_BEND = "SlightBend"
    SEVERE_BEND = "SevereBend"
    HUNCH = "Hunch"

    @classmethod
    def from_name(cls, name: str) -> "PostureLabel":
        for label in cls:
            if label.value == name or label.name == name:
                return label
        raise ValueError(f"unknown posture label: {name!r}")


CLASS_ORDER: tuple[PostureLabel, ...] = tuple(PostureLabel)
