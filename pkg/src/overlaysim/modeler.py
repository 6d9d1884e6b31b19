"""Connection-free analytical model of overlay behavior.

Builds an idealized steady-state topology (every node holding its ring
neighbors plus shortcuts at the ideal harmonic quantiles), walks greedy
routes over it, and turns route lengths plus site latencies into closed-form
estimates for join duration and revocation dissemination.  No sockets, no
events, no clock: a 100k-node model with a thousand route samples runs in
seconds, which makes it the cheap design-exploration companion to the
event-driven simulator.
"""

from __future__ import annotations

import random
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .broadcast import WalkResult, run_on_adjacency
from .kernel import LatencyMatrix
from .node import shortcut_count
from .ring import AddressSpace, ring_distance
from .security import REVOCATION_NOTICE_BYTES
from .dht import GET_REQ_BYTES, PUT_OVERHEAD_BYTES, REPLY_HEADER_BYTES
from .private_overlay import NOTICE_UNICAST_BYTES, SUBSCRIPTION_VALUE_BYTES
from .util import derive_seed


@dataclass
class ModelRoute:
    path: List[int]
    latency_ms: int

    @property
    def hops(self) -> int:
        return len(self.path) - 1


@dataclass
class JoinEstimate:
    public_ms: int
    dht_ms: int
    private_ms: int
    security_delta_ms: int
    handshake_peers: List[int] = field(default_factory=list)

    @property
    def total_ms(self) -> int:
        return self.public_ms + self.dht_ms + self.private_ms


class TopologyModel:
    """Idealized overlay snapshot: sorted ids, per-node adjacency, and a
    node-to-site map for latency lookups."""

    def __init__(
        self,
        space: AddressSpace,
        ids: Sequence[int],
        adjacency: Dict[int, Tuple[int, ...]],
        latency: Optional[LatencyMatrix] = None,
        site_of: Optional[Dict[int, int]] = None,
    ):
        self.space = space
        self.ids = sorted(ids)
        self.adjacency = adjacency
        self.latency = latency
        self.site_of = site_of or {}

    def __len__(self) -> int:
        return len(self.ids)

    def closest(self, addr: int) -> int:
        """Ring-closest node to an address (either direction)."""
        pos = bisect_left(self.ids, addr)
        n = len(self.ids)
        best = None
        for cand in (self.ids[pos % n], self.ids[(pos - 1) % n]):
            key = (ring_distance(addr, cand, self.space), cand)
            if best is None or key < best:
                best = key
        return best[1]

    def ring_neighbors(self, addr: int, per_side: int) -> List[int]:
        """The nodes a member at ``addr`` would hold as ring neighbors."""
        n = len(self.ids)
        pos = bisect_left(self.ids, addr)
        out = []
        span = min(per_side, n)
        for step in range(span):
            cand = self.ids[(pos + step) % n]
            if cand != addr and cand not in out:
                out.append(cand)
        for step in range(1, span + 1):
            cand = self.ids[(pos - step) % n]
            if cand != addr and cand not in out:
                out.append(cand)
        return out

    def rtt(self, a: int, b: int) -> int:
        return self.latency.rtt[self.site_of[a]][self.site_of[b]]

    def one_way(self, a: int, b: int) -> int:
        if self.latency is None:
            return 0
        return self.rtt(a, b) // 2

    def site_rtt(self, site: int, node: int) -> int:
        return self.latency.rtt[site][self.site_of[node]]

    def route(self, src: int, dst_addr: int) -> ModelRoute:
        """Greedy walk toward an address; ends at the node closest to it."""
        cur = src
        path = [cur]
        latency = 0
        while True:
            nxt = _greedy_step(cur, self.adjacency[cur], dst_addr, self.space)
            if nxt is None:
                return ModelRoute(path, latency)
            latency += self.one_way(cur, nxt)
            path.append(nxt)
            cur = nxt

    def broadcast(self, origin: int, timed: bool = True) -> WalkResult:
        latency_of = self.one_way if (timed and self.latency is not None) else None
        return run_on_adjacency(origin, self.adjacency, self.space, latency_of)


def _greedy_step(cur: int, candidates, dst: int, space: AddressSpace) -> Optional[int]:
    best = None
    here = ring_distance(cur, dst, space)
    for cand in candidates:
        d = ring_distance(cand, dst, space)
        if d < here and (best is None or (d, cand) < best):
            best = (d, cand)
    return None if best is None else best[1]


def ideal_shortcut_distances(n: int, space: AddressSpace) -> List[int]:
    """Clockwise distances of the ideal shortcut set for an n-node overlay.

    The k shortcuts sit at the midpoints of the k quantiles of the harmonic
    link-length distribution, so distance i covers the quantile
    (i + 0.5) / k: distance = size * n^((i + 0.5) / k - 1).
    """
    k = shortcut_count(n)
    out = []
    for i in range(k):
        frac = n ** ((i + 0.5) / k - 1.0)
        out.append(max(1, int(space.size * frac)))
    return out


def build_model(
    n: int,
    bits: int = 160,
    latency: Optional[LatencyMatrix] = None,
    seed: int = 0,
    per_side: int = 3,
) -> TopologyModel:
    """Construct the idealized steady-state topology for n members.

    Each node links to per_side ring neighbors in each direction and to the
    nodes closest to its ideal shortcut targets.  Links are bidirectional:
    an edge appears in both endpoints' adjacency.
    """
    if n < 1:
        raise ValueError("model needs at least one node")
    space = AddressSpace(bits)
    rng = random.Random(derive_seed(seed, "model", n, bits))
    taken = set()
    while len(taken) < n:
        taken.add(space.random_id(rng))
    ids = sorted(taken)
    neighbors: Dict[int, set] = {i: set() for i in ids}

    for pos, node in enumerate(ids):
        span = min(per_side, n - 1)
        for step in range(1, span + 1):
            for other in (ids[(pos + step) % n], ids[(pos - step) % n]):
                if other != node:
                    neighbors[node].add(other)
                    neighbors[other].add(node)

    distances = ideal_shortcut_distances(n, space)
    model = TopologyModel(space, ids, {})
    for node in ids:
        for dist in distances:
            target = model.closest((node + dist) % space.size)
            if target != node:
                neighbors[node].add(target)
                neighbors[target].add(node)

    adjacency = {i: tuple(sorted(neighbors[i])) for i in ids}
    site_of: Dict[int, int] = {}
    if latency is not None:
        site_rng = random.Random(derive_seed(seed, "model-sites", n))
        for i in ids:
            site_of[i] = site_rng.randrange(latency.n_sites)
    return TopologyModel(space, ids, adjacency, latency, site_of)


def estimate_join(
    public: TopologyModel,
    private: TopologyModel,
    joiner_site: int,
    secured: bool,
    joiner_pub_addr: int,
    joiner_priv_addr: int,
    entry: Optional[int] = None,
    private_entry: Optional[int] = None,
    per_side: int = 3,
    key_addr: Optional[int] = None,
) -> JoinEstimate:
    """Closed-form join duration for one new member.

    Models the join as a sequential walk through its phases: handshake with
    the public entry node, connect requests routed to each would-be public
    neighbor, advertisement store plus discovery query in the DHT, then
    bootstrap off the first discovered member and neighbor handshakes inside
    the private overlay.  Secured private handshakes cost three round trips
    instead of one, so the security surcharge is exactly two extra round
    trips per private handshake partner.
    """
    if public.latency is None or private.latency is None:
        raise ValueError("estimates need latency-annotated models")
    if entry is None:
        entry = public.ids[0]
    rtt_entry = public.site_rtt(joiner_site, entry)

    public_ms = rtt_entry  # bootstrap handshake, single round trip
    for nb in public.ring_neighbors(joiner_pub_addr, per_side):
        req = public.route(entry, nb)
        public_ms += rtt_entry + 2 * req.latency_ms + public.site_rtt(joiner_site, nb)

    dht_ms = 0
    if key_addr is None:
        key_addr = private_key_addr(public, private)
    key_route = public.route(entry, key_addr)
    for _ in ("put", "get"):
        dht_ms += rtt_entry + 2 * key_route.latency_ms

    hs_rtts = 3 if secured else 1
    handshake_peers: List[int] = []
    boot = private.ids[0] if private_entry is None else private_entry
    private_ms = hs_rtts * private.site_rtt(joiner_site, boot)
    handshake_peers.append(boot)
    boot_rtt = private.site_rtt(joiner_site, boot)
    for nb in private.ring_neighbors(joiner_priv_addr, per_side):
        req = private.route(boot, nb)
        private_ms += boot_rtt + 2 * req.latency_ms
        private_ms += hs_rtts * private.site_rtt(joiner_site, nb)
        handshake_peers.append(nb)

    delta = sum(2 * private.site_rtt(joiner_site, p) for p in handshake_peers) \
        if secured else 0
    return JoinEstimate(public_ms, dht_ms, private_ms, delta, handshake_peers)


def private_key_addr(public: TopologyModel, private: TopologyModel) -> int:
    """Deterministic stand-in for the group's discovery key."""
    return (private.ids[0] * 2654435761 + len(private.ids)) % public.space.size


def estimate_revocation(
    private: TopologyModel,
    public: TopologyModel,
    origin: int,
    subscribers: Sequence[int],
    entry: Optional[int] = None,
    key_addr: Optional[int] = None,
) -> dict:
    """Completion time and traffic for both revocation mechanisms.

    Broadcast: the bounded flood over the private topology; every member
    gets the notice, total traffic is one notice-sized message per edge of
    the dissemination tree.  DHT: one store at the revoked node's
    notification key, one fetch of the subscriber list, then a unicast
    notice to each subscriber; traffic is independent of overlay size for a
    fixed subscriber count.
    """
    if private.latency is None or public.latency is None:
        raise ValueError("estimates need latency-annotated models")
    if entry is None:
        entry = public.ids[0]
    if key_addr is None:
        key_addr = private_key_addr(public, private)

    walk = private.broadcast(origin)
    bcast_ms = max((t for t, _ in walk.deliveries.values()), default=0)
    bcast_bytes = walk.messages * NOTICE_UNICAST_BYTES

    key_route = public.route(entry, key_addr)
    put_ms = 2 * key_route.latency_ms
    get_ms = 2 * key_route.latency_ms
    notify_ms = 0
    for sub in subscribers:
        r = private.route(origin, sub)
        notify_ms = max(notify_ms, r.latency_ms)
    s = len(subscribers)
    dht_bytes = (PUT_OVERHEAD_BYTES + REVOCATION_NOTICE_BYTES)
    dht_bytes += GET_REQ_BYTES + REPLY_HEADER_BYTES + REVOCATION_NOTICE_BYTES \
        + s * SUBSCRIPTION_VALUE_BYTES
    dht_bytes += s * NOTICE_UNICAST_BYTES
    return {
        "broadcast": {
            "completion_ms": bcast_ms,
            "messages": walk.messages,
            "bytes": bcast_bytes,
            "reached": len(walk.deliveries),
        },
        "dht": {
            "completion_ms": put_ms + get_ms + notify_ms,
            "messages": 2 + s,
            "bytes": dht_bytes,
            "reached": 1 + s,
        },
    }


def route_sample(model: TopologyModel, count: int, seed: int = 0) -> dict:
    """Summary statistics over random greedy routes (design-check helper)."""
    rng = random.Random(derive_seed(seed, "routes", len(model.ids)))
    hops: List[int] = []
    latencies: List[int] = []
    for _ in range(count):
        src = model.ids[rng.randrange(len(model.ids))]
        dst_addr = model.space.random_id(rng)
        r = model.route(src, dst_addr)
        hops.append(r.hops)
        latencies.append(r.latency_ms)
    hops.sort()
    latencies.sort()
    mid = len(hops) // 2
    return {
        "routes": count,
        "mean_hops": sum(hops) / max(1, len(hops)),
        "median_hops": hops[mid] if hops else 0,
        "max_hops": hops[-1] if hops else 0,
        "mean_latency_ms": sum(latencies) / max(1, len(latencies)),
        "max_latency_ms": latencies[-1] if latencies else 0,
    }
