"""Overlay nodes: handshakes, neighbor upkeep, relays, repair, broadcast."""

import pytest

from overlaysim.experiments import World, crawl
from overlaysim.kernel import LatencyMatrix, NatClass
from overlaysim.node import (
    LinkKind,
    NodeConfig,
    Overlay,
    desired_neighbors,
    next_backoff,
    sample_shortcut_target,
    shortcut_count,
)
from overlaysim.ring import AddressSpace
from overlaysim.security import GroupCA, Policy
from overlaysim.util import derive_seed

import random


def flat_matrix(rtt_ms=100, sites=8):
    return LatencyMatrix([[0 if i == j else rtt_ms for j in range(sites)]
                          for i in range(sites)])


def make_overlay(kernel_seed=0, secured=False, ca=None, n_estimate=1,
                 config=None):
    from overlaysim.kernel import SimKernel
    k = SimKernel(flat_matrix(), seed=kernel_seed)
    for m in range(8):
        k.latency.assign_sites([m], random.Random(m))
    ov = Overlay(k, "t", AddressSpace(16), config or NodeConfig(),
                 secured=secured,
                 ca_verifier=ca.verifier() if ca else None,
                 seed=derive_seed(7, "t"), n_estimate=n_estimate)
    return k, ov


def boot(node):
    return {"id": node.id, "machine": node.machine, "nat": node.nat}


# ------------------------------------------------------------- pure helpers


def test_next_backoff_doubles_and_caps():
    assert [next_backoff(a) for a in range(8)] == [
        1_000, 2_000, 4_000, 8_000, 16_000, 32_000, 60_000, 60_000]
    assert next_backoff(500) == 60_000
    with pytest.raises(ValueError):
        next_backoff(-1)


def test_desired_neighbors_three_per_side():
    space = AddressSpace(8)
    ring = [10, 40, 70, 100, 130, 160, 190, 220]
    got = desired_neighbors(10, ring, 3, space)
    assert set(got) == {40, 70, 100, 220, 190, 160}


def test_desired_neighbors_small_ring_takes_everyone():
    space = AddressSpace(8)
    got = desired_neighbors(10, [10, 60, 200], 3, space)
    assert set(got) == {60, 200}


def test_shortcut_count_half_log2_rounded_half_up():
    expected = {1: 0, 2: 1, 4: 1, 8: 2, 16: 2, 32: 3, 64: 3,
                256: 4, 1024: 5}
    for n, k in expected.items():
        assert shortcut_count(n) == k, n


def test_shortcut_targets_cover_multiple_scales():
    space = AddressSpace(8)
    rng = random.Random(11)
    assert sample_shortcut_target(5, 1, rng, space) is None
    dists = []
    for _ in range(500):
        t = sample_shortcut_target(5, 16, rng, space)
        assert 0 <= t < space.size
        dists.append((t - 5) % space.size)
    # harmonic draw spans from the typical neighbor gap up to the full ring
    assert min(dists) < 32
    assert max(dists) > 128


def test_shortcut_targets_deterministic_per_seed():
    space = AddressSpace(16)
    a = [sample_shortcut_target(9, 64, random.Random(3), space) for _ in range(5)]
    b = [sample_shortcut_target(9, 64, random.Random(3), space) for _ in range(5)]
    assert a == b


# --------------------------------------------------------------- handshakes


def test_unsecured_handshake_two_messages_of_50_bytes():
    k, ov = make_overlay()
    a = ov.add_node(1000, 0, NatClass.PUBLIC)
    b = ov.add_node(30000, 1, NatClass.PUBLIC, bootstrap=[boot(a)])
    k.run_for(3_000)
    assert a.link_established(b.id)
    assert b.link_established(a.id)
    assert ov.counters["bytes:hs"] == 2 * 50
    assert ov.counters["links_established"] == 2


def test_secured_handshake_six_messages_with_certificates():
    ca = GroupCA("g", Policy.AUTO_SIGN, seed=1)
    k, ov = make_overlay(secured=True, ca=ca)
    certs = {}
    for user, nid in (("alice", 1000), ("bob", 30000)):
        ca.add_member(user, f"secret:{user}")
        certs[nid] = ca.enroll(user, f"secret:{user}", nid, 0).certificate
    a = ov.add_node(1000, 0, NatClass.PUBLIC, certificate=certs[1000])
    b = ov.add_node(30000, 1, NatClass.PUBLIC, certificate=certs[30000],
                    bootstrap=[boot(a)])
    k.run_for(5_000)
    assert a.link_established(b.id)
    assert b.link_established(a.id)
    # six steps at 150 B, the two certificate-bearing ones 800 B heavier
    assert ov.counters["bytes:hs"] == 6 * 150 + 2 * 800
    assert a.links[b.id].peer_cert is not None
    assert a.links[b.id].peer_cert.user == "bob"


def test_handshake_carries_peer_contact_info():
    k, ov = make_overlay()
    a = ov.add_node(1000, 0, NatClass.PUBLIC)
    b = ov.add_node(30000, 1, NatClass.CONE, bootstrap=[boot(a)])
    k.run_for(3_000)
    conn = a.links[b.id]
    assert conn.peer_machine == 1
    assert conn.peer_nat is NatClass.CONE
    assert a.known_peers[b.id]["machine"] == 1


# ------------------------------------------------------------------- relays


def test_symmetric_pair_relays_through_shared_partner():
    k, ov = make_overlay()
    r = ov.add_node(40000, 0, NatClass.PUBLIC)
    a = ov.add_node(1000, 1, NatClass.SYMMETRIC, bootstrap=[boot(r)])
    b = ov.add_node(30000, 2, NatClass.SYMMETRIC, bootstrap=[boot(r)])
    k.run_for(20_000)
    assert a.link_established(b.id)
    # two 50 ms legs through the relay instead of one direct leg
    assert k.link_latency("t", a.id, b.id) == 100
    assert a.stats["relay_links"] + b.stats["relay_links"] >= 1


def test_no_path_between_isolated_symmetric_nats():
    k, ov = make_overlay()
    a = ov.add_node(1000, 0, NatClass.SYMMETRIC)
    b = ov.add_node(30000, 1, NatClass.SYMMETRIC)
    assert not a.open_link(b.id, b.machine, b.nat, LinkKind.NEIGHBOR)
    assert a.stats["no_path"] == 1
    assert b.id not in a.links


def test_open_link_to_self_refused():
    k, ov = make_overlay()
    a = ov.add_node(1000, 0, NatClass.PUBLIC)
    assert not a.open_link(a.id, a.machine, a.nat, LinkKind.NEIGHBOR)


# ----------------------------------------------------- formation and repair


def test_small_public_overlay_forms_a_ring_cycle():
    w = World(flat_matrix(), seed=11)
    formed = w.build_public(8)
    assert formed is not None and formed > 0
    assert w.public.all_connected()
    rep = crawl(w.public)
    assert rep.cycle
    assert rep.visited == 8


def test_neighbor_summary_excludes_pure_shortcuts():
    w = World(flat_matrix(), seed=11)
    w.build_public(8)
    for node in w.public.nodes.values():
        summary_ids = {p for p, _, _ in node.neighbor_summary()}
        ring_ids = set(desired_neighbors(
            node.id, node.established_peer_ids(),
            node.cfg.neighbors_per_side, node.space))
        assert summary_ids <= ring_ids
        for p in node.shortcut_peers - ring_ids:
            assert p not in summary_ids


def test_graceful_leave_repairs_the_ring():
    w = World(flat_matrix(), seed=11)
    w.build_public(8)
    victim = sorted(w.public.nodes)[3]
    w.detach_public(victim)
    healed = w.poll(
        lambda: (w.public.all_connected() and crawl(w.public).cycle),
        2_000, 180_000,
    )
    assert healed is not None
    assert len(w.public.nodes) == 7
    assert victim not in w.public.nodes


def test_crash_detected_by_silence_and_repaired():
    w = World(flat_matrix(), seed=11)
    w.build_public(8)
    victim = sorted(w.public.nodes)[5]
    neighbors = [i for i in w.public.nodes if i != victim
                 and w.public.nodes[i].link_established(victim)]
    w.detach_public(victim, crash=True)
    # links to the dead node still look alive until the silence timeout
    assert any(w.public.nodes[i].believes_connected() for i in neighbors)
    healed = w.poll(
        lambda: (w.public.all_connected() and crawl(w.public).cycle),
        2_000, 300_000,
    )
    assert healed is not None
    # stale links to the dead node are torn down by the silence timeout
    w.kernel.run_for(90_000)
    for i in neighbors:
        assert victim not in w.public.nodes[i].links


def test_keepalives_flow_on_idle_links():
    w = World(flat_matrix(), seed=11)
    w.build_public(8)
    before = w.public.counters["bytes:ping"]
    w.kernel.run_for(60_000)
    assert w.public.counters["bytes:ping"] > before


# ---------------------------------------------------------------- broadcast


def test_full_broadcast_reaches_every_node_exactly_once():
    w = World(flat_matrix(), seed=11)
    w.build_public(8)
    origin = sorted(w.public.nodes)[0]
    trace = w.public.full_broadcast(origin, 100)
    w.kernel.run_for(10_000)
    assert set(trace.deliveries) == set(w.public.nodes)
    assert trace.messages == 7
    assert trace.violations == []
    assert trace.bytes_sent == 7 * (60 + 100)


def test_full_broadcast_exclusion_skips_nodes():
    w = World(flat_matrix(), seed=11)
    w.build_public(8)
    ids = sorted(w.public.nodes)
    origin, excluded = ids[0], ids[4]
    trace = w.public.full_broadcast(origin, 40, exclude=[excluded])
    w.kernel.run_for(10_000)
    assert excluded not in trace.deliveries
    assert set(trace.deliveries) == set(ids) - {excluded}
