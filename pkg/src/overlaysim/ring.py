"""Ring address arithmetic: distances, arcs and greedy next-hop selection.

Overlay identifiers live on a ring of ``2**bits`` addresses.  Distance ties
are always broken toward the smaller identifier so that every decision built
on these primitives is deterministic.  All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional


@dataclass(frozen=True)
class AddressSpace:
    """Ring of ``2**bits`` addresses; identifiers are ints in ``[0, size)``."""

    bits: int = 160

    def __post_init__(self) -> None:
        if not 1 <= self.bits <= 160:
            raise ValueError(f"address bits must be in 1..160, got {self.bits}")

    @property
    def size(self) -> int:
        return 1 << self.bits

    def contains(self, value: int) -> bool:
        return 0 <= value < self.size

    def random_id(self, rng) -> int:
        return rng.randrange(self.size)


def clockwise_distance(a: int, b: int, space: AddressSpace) -> int:
    """Steps from ``a`` to ``b`` moving clockwise (increasing, wrapping)."""
    return (b - a) % space.size


def ring_distance(a: int, b: int, space: AddressSpace) -> int:
    """Length of the shorter arc between ``a`` and ``b``.

    Symmetric, zero only for equal addresses, and never exceeds ``size // 2``.
    """
    d = (b - a) % space.size
    return min(d, space.size - d)


def closest_to(target: int, candidates: Iterable[int], space: AddressSpace) -> int:
    """Candidate with minimal ring distance to ``target``; ties go to the
    smaller identifier."""
    best: Optional[int] = None
    best_key = None
    for c in candidates:
        key = (ring_distance(c, target, space), c)
        if best_key is None or key < best_key:
            best, best_key = c, key
    if best is None:
        raise ValueError("closest_to: empty candidate set")
    return best


@dataclass(frozen=True)
class RingRange:
    """Clockwise arc from ``start`` toward ``end``, possibly wrapping zero.

    The start address is always a member.  With ``end_inclusive`` the arc is
    ``[start, end]``, otherwise ``[start, end)``.  ``[x, x]`` is the singleton
    ``{x}`` and ``[x, x-1]`` (inclusive) covers the whole ring.
    """

    start: int
    end: int
    end_inclusive: bool = False

    def contains(self, addr: int, space: AddressSpace) -> bool:
        if addr == self.start:
            return True
        arc = clockwise_distance(self.start, self.end, space)
        d = clockwise_distance(self.start, addr, space)
        return d <= arc if self.end_inclusive else d < arc


def in_range(addr: int, rng: RingRange, space: AddressSpace) -> bool:
    return rng.contains(addr, space)


def next_greedy_hop(
    self_id: int,
    connections: Iterable[int],
    target: int,
    space: AddressSpace,
) -> Optional[int]:
    """Connection strictly closer to ``target`` than ``self_id``, else None.

    Returning None means the message is delivered here: self is at least as
    close as every connection (a local minimum).  Ties between connections go
    to the smaller identifier; a connection that merely ties self's distance
    does not win, so routing distance is strictly decreasing hop over hop.
    """
    own = ring_distance(self_id, target, space)
    best = None
    best_key = None
    for c in connections:
        key = (ring_distance(c, target, space), c)
        if best_key is None or key < best_key:
            best, best_key = c, key
    if best is None or best_key[0] >= own:
        return None
    return best
