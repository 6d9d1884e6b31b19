"""Shared helpers: stable digests, seed derivation, rounding."""

from __future__ import annotations

import hashlib
import math
from typing import Iterable


def stable_digest(parts: Iterable[object], bits: int) -> int:
    """Deterministic digest of a tuple of values, truncated to ``bits`` bits.

    Stable across runs and platforms (no reliance on hash randomization).
    """
    h = hashlib.blake2b(digest_size=32)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big") % (1 << bits)


def derive_seed(*parts: object) -> int:
    """64-bit seed derived from arbitrary labelled parts."""
    return stable_digest(parts, 64)


def round_half_up(x: float) -> int:
    # round() uses banker's rounding; experiments need plain .5-up behaviour.
    return math.floor(x + 0.5)


def pairwise(seq):
    for i in range(len(seq) - 1):
        yield seq[i], seq[i + 1]
