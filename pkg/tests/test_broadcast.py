"""Bounded broadcast: range splitting and the adjacency-walk engine."""

import random

from overlaysim.broadcast import run_on_adjacency, split_range
from overlaysim.modeler import build_model
from overlaysim.ring import AddressSpace, RingRange, clockwise_distance

SP = AddressSpace(bits=8)


def ring_adjacency(ids, per_side=1):
    """Ring graph over sorted ids, per_side successors/predecessors each."""
    ids = sorted(ids)
    n = len(ids)
    adj = {i: set() for i in ids}
    for pos, node in enumerate(ids):
        for step in range(1, per_side + 1):
            adj[node].add(ids[(pos + step) % n])
            adj[node].add(ids[(pos - step) % n])
    return {i: sorted(v) for i, v in adj.items()}


def test_split_range_hand_case():
    # node 0 responsible for the whole ring, connections at 10/50/200
    full = RingRange(0, 255, end_inclusive=True)
    parts = split_range(0, full, [10, 50, 200], frozenset(), SP)
    assert parts == [
        (10, RingRange(10, 50, end_inclusive=False)),
        (50, RingRange(50, 200, end_inclusive=False)),
        (200, RingRange(200, 255, end_inclusive=True)),
    ]


def test_split_range_excludes_self_out_of_arc_and_excluded():
    arc = RingRange(10, 100)
    parts = split_range(20, arc, [20, 30, 150, 60], frozenset({60}), SP)
    assert [p for p, _ in parts] == [30]
    assert parts[0][1] == RingRange(30, 100, end_inclusive=False)


def test_split_range_sub_arcs_are_disjoint_and_cover():
    """From the first child onward, every address of the parent arc lands in
    exactly one child sub-arc; the stretch between the holder and its first
    connection stays the holder's own (it contains no other node)."""
    rng = random.Random(4)
    for _ in range(100):
        ids = sorted(rng.sample(range(SP.size), 8))
        holder = ids[0]
        arc = RingRange(holder, (holder - 1) % SP.size, end_inclusive=True)
        parts = split_range(holder, arc, ids[1:], frozenset(), SP)
        first = parts[0][0]
        for addr in range(SP.size):
            owners = [c for c, sub in parts if sub.contains(addr, SP)]
            before_first = clockwise_distance(holder, addr, SP) < \
                clockwise_distance(holder, first, SP)
            if before_first:
                assert owners == []
            else:
                assert len(owners) == 1, f"addr {addr} owned by {owners}"
        # and no id is ever in the unowned stretch
        for nid in ids[1:]:
            assert any(sub.contains(nid, SP) for _, sub in parts)


def test_walk_reaches_all_exactly_once_minimal_ring():
    ids = [4, 30, 77, 129, 200, 251]
    adj = ring_adjacency(ids)
    res = run_on_adjacency(ids[0], adj, SP)
    assert res.reached() == set(ids)
    assert res.messages == len(ids) - 1
    assert res.violations == []


def test_walk_message_count_scales_exactly(seed=3):
    """One message per node beyond the origin, independent of connectivity
    density: the defining property of the split discipline."""
    rng = random.Random(seed)
    for n in (8, 64, 256):
        ids = sorted(rng.sample(range(2 ** 30), n))
        sp = AddressSpace(bits=30)
        adj = ring_adjacency(ids, per_side=3)
        origin = ids[rng.randrange(n)]
        res = run_on_adjacency(origin, adj, sp)
        assert res.reached() == set(ids)
        assert res.messages == n - 1
        assert res.violations == []


def test_walk_exclusion():
    ids = [4, 30, 77, 129, 200, 251]
    adj = ring_adjacency(ids, per_side=2)
    res = run_on_adjacency(4, adj, SP, exclude=frozenset({77}))
    assert res.reached() == set(ids) - {77}
    assert res.messages == len(ids) - 2


def test_walk_latency_accumulates_and_depth_counts():
    ids = [10, 20, 30, 40]
    adj = ring_adjacency(ids, per_side=3)  # complete graph at this size
    res = run_on_adjacency(10, adj, SP, latency_of=lambda a, b: 7)
    # 10 splits [10..9] among 20,30,40: direct children, all depth 1
    assert res.max_depth() == 1
    assert res.completion_ms() == 7
    sparse = {10: [20], 20: [10, 30], 30: [20, 40], 40: [30]}
    line = run_on_adjacency(10, sparse, SP, latency_of=lambda a, b: 7)
    assert line.reached() == set(ids)
    assert line.max_depth() == 3
    assert line.completion_ms() == 21


def test_walk_single_node():
    res = run_on_adjacency(9, {9: []}, SP)
    assert res.reached() == {9}
    assert res.messages == 0


def test_depth_grows_subquadratically_in_log():
    """Median depth on the idealized topology (neighbors plus shortcuts)
    follows the log-squared trend; a plain ring without shortcuts would be
    linear and fail this bound by an order of magnitude."""
    depths = {}
    for n in (64, 256):
        samples = []
        for seed in range(8):
            model = build_model(n, bits=40, seed=seed)
            res = run_on_adjacency(model.ids[0], model.adjacency, model.space)
            assert res.messages == n - 1
            assert res.reached() == set(model.ids)
            samples.append(res.max_depth())
        samples.sort()
        depths[n] = samples[len(samples) // 2]
    assert depths[256] <= depths[64] * (8 * 8) / (6 * 6) * 1.5
