"""Soft-state DHT: leases, replication, retries, reply paths."""

from overlaysim.dht import (
    DhtConfig,
    DhtService,
    DhtStore,
    ENTRY_OVERHEAD_BYTES,
    PUSH_HEADER_BYTES,
)
from overlaysim.experiments import World
from overlaysim.kernel import LatencyMatrix
from overlaysim.ring import closest_to
from overlaysim.util import stable_digest


def flat_matrix(rtt_ms=100, sites=8):
    return LatencyMatrix([[0 if i == j else rtt_ms for j in range(sites)]
                          for i in range(sites)])


def make_world(n=8, seed=3):
    w = World(flat_matrix(), seed=seed)
    w.build_public(n)
    return w


def any_key(w, tag):
    return stable_digest(("test-key", tag), w.space.bits)


def holder_of(w, key):
    return closest_to(key, list(w.public.nodes), w.space)


# ---------------------------------------------------------------------- store


def test_store_put_get_and_expiry():
    s = DhtStore()
    s.put(5, "a", inserter=1, expiry=100, value_size=10)
    s.put(5, "b", inserter=2, expiry=200, value_size=20)
    assert s.get(5, now=50) == [("a", 1, 10), ("b", 2, 20)]
    assert s.get(5, now=150) == [("b", 2, 20)]
    assert s.get(5, now=250) == []


def test_store_lease_renewal_keeps_max_expiry():
    s = DhtStore()
    s.put(5, "a", inserter=1, expiry=100, value_size=10)
    s.put(5, "a", inserter=1, expiry=300, value_size=10)
    s.put(5, "a", inserter=1, expiry=200, value_size=10)  # stale renewal
    assert s.get(5, now=250) == [("a", 1, 10)]


def test_store_same_value_different_inserters_coexist():
    s = DhtStore()
    s.put(5, "a", inserter=1, expiry=100, value_size=10)
    s.put(5, "a", inserter=2, expiry=100, value_size=10)
    assert len(s.get(5, now=50)) == 2


def test_store_purge_drops_empty_keys():
    s = DhtStore()
    s.put(5, "a", inserter=1, expiry=100, value_size=10)
    s.put(9, "b", inserter=1, expiry=500, value_size=10)
    s.purge(now=200)
    assert s.keys() == [9]


# -------------------------------------------------------------- service basics


def test_put_then_get_from_another_node():
    w = make_world()
    ids = sorted(w.public.nodes)
    key = any_key(w, 1)
    acked = []
    w.dht_services[ids[0]].put(key, ("v", 42), 100, 60_000,
                               on_done=acked.append)
    w.kernel.run_for(5_000)
    assert acked == [True]
    got = []
    w.dht_services[ids[-1]].get(key, got.append)
    w.kernel.run_for(5_000)
    assert got == [[(("v", 42), ids[0], 100)]]


def test_get_unknown_key_returns_empty_list():
    w = make_world()
    ids = sorted(w.public.nodes)
    got = []
    w.dht_services[ids[0]].get(any_key(w, "missing"), got.append)
    w.kernel.run_for(8_000)
    assert got == [[]]


def test_value_expires_after_ttl():
    w = make_world()
    ids = sorted(w.public.nodes)
    key = any_key(w, 2)
    w.dht_services[ids[0]].put(key, "short", 40, 10_000)
    w.kernel.run_for(5_000)
    got = []
    w.dht_services[ids[1]].get(key, got.append)
    w.kernel.run_for(3_000)
    assert got and got[0] and got[0][0][0] == "short"
    # one full maintenance period past the lease end clears every copy
    w.kernel.run_for(60_000)
    got2 = []
    w.dht_services[ids[1]].get(key, got2.append)
    w.kernel.run_for(5_000)
    assert got2 == [[]]


def test_renewal_extends_lease():
    w = make_world()
    ids = sorted(w.public.nodes)
    key = any_key(w, 3)
    svc = w.dht_services[ids[0]]
    svc.put(key, "keep", 40, 10_000)
    w.kernel.run_for(6_000)
    svc.put(key, "keep", 40, 10_000)  # renewal before the first lease lapses
    w.kernel.run_for(8_000)           # 14s after the first put
    got = []
    w.dht_services[ids[2]].get(key, got.append)
    w.kernel.run_for(5_000)
    assert got and [v for v, _, _ in got[0]] == ["keep"]


def test_local_get_completes_asynchronously():
    w = make_world()
    key = any_key(w, 4)
    holder = holder_of(w, key)
    svc = w.dht_services[holder]
    svc.put(key, "mine", 40, 60_000)
    w.kernel.run_for(5_000)
    got = []
    svc.get(key, got.append)
    assert got == []            # never completed inside the caller's stack
    w.kernel.run_for(1)
    assert got and got[0][0][0] == "mine"


# -------------------------------------------------------------- replication


def test_value_survives_holder_crash():
    w = make_world(n=10, seed=5)
    key = any_key(w, 5)
    holder = holder_of(w, key)
    asker = next(i for i in sorted(w.public.nodes) if i != holder)
    w.dht_services[asker].put(key, "precious", 40, 600_000)
    w.kernel.run_for(35_000)    # one maintenance period: replicas pushed
    w.detach_public(holder, crash=True)
    w.kernel.run_for(120_000)   # silence detection + ring repair + handoff
    got = []
    w.dht_services[asker].get(key, got.append)
    w.kernel.run_for(20_000)
    assert got and got[0], "replica lost with the primary holder"
    assert got[0][0][0] == "precious"


def test_replica_pushes_are_incremental():
    w = make_world()
    key = any_key(w, 6)
    ids = sorted(w.public.nodes)
    w.dht_services[ids[0]].put(key, "steady", 40, 3_600_000)
    w.kernel.run_for(65_000)    # two maintenance passes replicate the entry
    before = w.public.counters["bytes:dht_push"]
    assert before > 0
    w.kernel.run_for(120_000)   # four more passes, lease unchanged
    after = w.public.counters["bytes:dht_push"]
    assert after == before, "unchanged lease was re-pushed"


def test_handoff_relinquishes_entries():
    w = make_world()
    key = any_key(w, 7)
    holder = holder_of(w, key)
    svc = w.dht_services[holder]
    # plant the entry on a node that is NOT responsible for the key
    wrong = next(i for i in sorted(w.public.nodes) if i != holder)
    w.dht_services[wrong].store.put(key, "migrant", inserter=wrong,
                                    expiry=w.kernel.now + 3_600_000,
                                    value_size=40)
    w.kernel.run_for(65_000)
    assert key not in w.dht_services[wrong].store.keys()
    assert svc.store.get(key, w.kernel.now)


def test_push_size_accounting():
    w = make_world()
    key = any_key(w, 8)
    ids = sorted(w.public.nodes)
    w.dht_services[ids[0]].put(key, "sized", 100, 3_600_000)
    w.kernel.run_for(95_000)
    push_bytes = w.public.counters["bytes:dht_push"]
    # pushes go one hop to a ring neighbor, so totals are whole messages
    assert push_bytes > 0
    assert push_bytes % (PUSH_HEADER_BYTES + ENTRY_OVERHEAD_BYTES + 100) == 0


# -------------------------------------------------------------------- config


def test_service_config_defaults():
    cfg = DhtConfig()
    assert cfg.period_ms == 30_000
    assert cfg.request_timeout_ms == 5_000
    assert cfg.max_attempts == 3
    assert cfg.replicas_per_side == 1
