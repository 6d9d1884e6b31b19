"""Ring arithmetic: distances, arcs, closest-candidate and greedy hops."""

import random

from overlaysim.ring import (
    AddressSpace,
    RingRange,
    clockwise_distance,
    closest_to,
    next_greedy_hop,
    ring_distance,
)

SMALL = AddressSpace(bits=8)   # 256 addresses, easy to reason about
FULL = AddressSpace(bits=160)


def test_space_bounds():
    assert SMALL.size == 256
    assert SMALL.contains(0)
    assert SMALL.contains(255)
    assert not SMALL.contains(256)
    assert not SMALL.contains(-1)


def test_space_rejects_bad_bits():
    for bits in (0, -3, 161):
        try:
            AddressSpace(bits=bits)
            assert False, f"bits={bits} should be rejected"
        except ValueError:
            pass


def test_clockwise_distance_wraps():
    assert clockwise_distance(10, 20, SMALL) == 10
    assert clockwise_distance(20, 10, SMALL) == 246
    assert clockwise_distance(250, 5, SMALL) == 11
    assert clockwise_distance(7, 7, SMALL) == 0


def test_ring_distance_symmetric_and_bounded():
    rng = random.Random(7)
    for _ in range(500):
        a = rng.randrange(SMALL.size)
        b = rng.randrange(SMALL.size)
        d = ring_distance(a, b, SMALL)
        assert d == ring_distance(b, a, SMALL)
        assert 0 <= d <= SMALL.size // 2
        assert (d == 0) == (a == b)


def test_ring_distance_agrees_with_clockwise():
    rng = random.Random(8)
    for _ in range(500):
        a = rng.randrange(SMALL.size)
        b = rng.randrange(SMALL.size)
        cw = clockwise_distance(a, b, SMALL)
        assert ring_distance(a, b, SMALL) == min(cw, SMALL.size - cw)


def test_closest_to_brute_force():
    rng = random.Random(9)
    for _ in range(200):
        cands = rng.sample(range(SMALL.size), rng.randint(1, 12))
        target = rng.randrange(SMALL.size)
        got = closest_to(target, cands, SMALL)
        best = min(cands, key=lambda c: (ring_distance(c, target, SMALL), c))
        assert got == best


def test_closest_to_tie_breaks_to_smaller_id():
    # 90 and 110 are both 10 away from 100
    assert closest_to(100, [90, 110], SMALL) == 90
    assert closest_to(100, [110, 90], SMALL) == 90


def test_closest_to_empty_raises():
    try:
        closest_to(1, [], SMALL)
        assert False
    except ValueError:
        pass


def test_range_contains_basic():
    r = RingRange(10, 20)
    assert r.contains(10, SMALL)
    assert r.contains(19, SMALL)
    assert not r.contains(20, SMALL)
    ri = RingRange(10, 20, end_inclusive=True)
    assert ri.contains(20, SMALL)


def test_range_wrapping():
    r = RingRange(250, 5)
    assert r.contains(250, SMALL)
    assert r.contains(255, SMALL)
    assert r.contains(0, SMALL)
    assert r.contains(4, SMALL)
    assert not r.contains(5, SMALL)
    assert not r.contains(128, SMALL)


def test_range_degenerate_singleton_and_full():
    single = RingRange(42, 42)
    for addr in range(SMALL.size):
        assert single.contains(addr, SMALL) == (addr == 42)
    full = RingRange(42, 41, end_inclusive=True)
    for addr in (0, 41, 42, 43, 255):
        assert full.contains(addr, SMALL)


def test_greedy_hop_picks_strictly_closer():
    # self at 0, target 100; 90 is closer than 50
    assert next_greedy_hop(0, [50, 90], 100, SMALL) == 90
    # no connection closer than self -> local delivery
    assert next_greedy_hop(100, [0, 50], 100, SMALL) is None
    assert next_greedy_hop(0, [], 100, SMALL) is None


def test_greedy_hop_tie_with_self_is_delivery():
    # connection at same distance as self must not win: distance would stop
    # decreasing and the route could loop
    assert next_greedy_hop(90, [110], 100, SMALL) is None


def test_greedy_route_terminates_and_matches_closest():
    """Walking greedy hops over a full view always ends at the population's
    closest node: the routing oracle at small scale."""
    rng = random.Random(10)
    for _ in range(50):
        nodes = sorted(rng.sample(range(SMALL.size), 20))
        target = rng.randrange(SMALL.size)
        cur = nodes[0]
        seen = {cur}
        while True:
            nxt = next_greedy_hop(cur, nodes, target, SMALL)
            if nxt is None:
                break
            assert nxt not in seen, "greedy route revisited a node"
            seen.add(nxt)
            cur = nxt
        assert cur == closest_to(target, nodes, SMALL)


def test_full_width_space_distances():
    a = 2 ** 159
    assert ring_distance(0, a, FULL) == a
    assert clockwise_distance(a, 0, FULL) == FULL.size - a
