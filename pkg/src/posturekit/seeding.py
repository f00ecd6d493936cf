"""Deterministic seed derivation.

One root seed fans out into independent child seeds via a splitmix64-style
mixer, so adding units of work (trees, participants, chirps) never reshuffles
the streams of earlier units, and parallel and serial runs see identical
randomness.
"""

from __future__ import annotations

import zlib

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 step: advance by the golden gamma and mix."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(root: int, *parts: int | str) -> int:
    """Derive a child seed from a root and a path of ints/labels.

    Strings are folded in through crc32 so the derivation is stable across
    processes (unlike the builtin salted hash()).
    """
    state = splitmix64(root & _MASK)
    for part in parts:
        token = part if isinstance(part, int) else zlib.crc32(part.encode("utf-8"))
        state = splitmix64(state ^ (token & _MASK))
    return state
