"""Structured ring overlay: per-node state machine and the overlay registry.

Each node keeps near-neighbor links on both ring sides plus long-range
shortcut links drawn from a harmonic distance distribution, and repairs its
neighborhood with a periodic maintenance pass.  Connections are acquired
either by direct contact (bootstrap and discovered rendezvous peers, whose
transport address is known) or by routing a connect request through the
overlay toward the target, which then opens the link back toward the
requester.  All timers and draws come from per-node seeded RNG streams, so
a run is a pure function of its seed.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from . import broadcast as broadcast_mod
from .kernel import NatClass, OverlayMessage, SimKernel, can_connect_directly
from .ring import (
    AddressSpace,
    RingRange,
    clockwise_distance,
    next_greedy_hop,
    ring_distance,
)
from .security import Certificate, RevocationView, verify_peer
from .util import derive_seed, round_half_up

logger = logging.getLogger(__name__)


@dataclass
class NodeConfig:
    """Protocol knobs shared by every node of an overlay."""

    neighbors_per_side: int = 3
    maintenance_period_ms: int = 10_000
    ping_interval_ms: int = 15_000
    silence_timeout_ms: int = 45_000
    grace_period_ms: int = 30_000
    hs_timeout_ms: int = 10_000
    backoff_initial_ms: int = 1_000
    backoff_max_ms: int = 60_000
    # consecutive connect failures before a peer is presumed gone
    forget_after_failures: int = 4
    probe_min_interval_ms: int = 1_000
    max_bootstrap_inflight: int = 3
    hs_bytes_unsecured: int = 50
    hs_bytes_secured: int = 150
    cert_bytes: int = 800
    ctm_req_bytes: int = 80
    ctm_rep_bytes: int = 160
    ping_bytes: int = 40
    close_bytes: int = 30
    reject_bytes: int = 60
    broadcast_header_bytes: int = 60


def next_backoff(attempt: int, initial_ms: int = 1_000, max_ms: int = 60_000) -> int:
    """Exponential backoff delay for the given retry attempt, capped."""
    if attempt < 0:
        raise ValueError("attempt must be >= 0")
    if attempt > 60:
        return max_ms
    return min(initial_ms << attempt, max_ms)


def desired_neighbors(
    self_id: int, known_peers: Iterable[int], per_side: int, space: AddressSpace
) -> List[int]:
    """The ``per_side`` nearest known peers on each ring side of self."""
    peers = [p for p in known_peers if p != self_id]
    cw = sorted(peers, key=lambda p: clockwise_distance(self_id, p, space))[:per_side]
    ccw = sorted(peers, key=lambda p: clockwise_distance(p, self_id, space))[:per_side]
    out: List[int] = []
    for p in cw + ccw:
        if p not in out:
            out.append(p)
    return out


def shortcut_count(n_estimate: int) -> int:
    """Number of long-range shortcut links to hold: half of log2(N),
    rounded half up."""
    if n_estimate < 2:
        return 0
    return round_half_up(0.5 * math.log2(n_estimate))


def sample_shortcut_target(
    self_id: int, n_estimate: int, rng: random.Random, space: AddressSpace
) -> Optional[int]:
    """Harmonic shortcut draw: clockwise distance ``size * n**(u-1)`` for
    uniform u, so every scale of ring distance down to the typical neighbor
    gap is equally likely."""
    if n_estimate < 2:
        return None
    u = rng.random()
    dist = max(1, round_half_up(space.size * math.exp(math.log(n_estimate) * (u - 1.0))))
    return (self_id + dist) % space.size


class LinkKind(Enum):
    NEIGHBOR = "neighbor"
    SHORTCUT = "shortcut"
    BOOTSTRAP = "bootstrap"


class Phase(Enum):
    INITIATING = "initiating"       # connect request sent, no transport link yet
    HANDSHAKE = "handshake"
    ESTABLISHED = "established"
    CLOSED = "closed"


@dataclass
class Connection:
    peer: int
    kind: LinkKind
    phase: Phase
    secured: bool
    initiator: bool
    created_at: int
    peer_machine: Optional[int] = None
    peer_nat: Optional[NatClass] = None
    peer_cert: Optional[Certificate] = None
    established_at: Optional[int] = None
    last_seen: int = 0
    hs_total: int = 0
    pending_verify: bool = False
    timeout_handle: object = None


class Overlay:
    """Registry and shared context for one overlay instance (one ring).

    Holds ground-truth views used by the harness (which node is live, who is
    whose true ring neighbor); protocol decisions inside nodes only use
    state they learned through messages.
    """

    def __init__(
        self,
        kernel: SimKernel,
        tag: str,
        space: AddressSpace,
        config: NodeConfig,
        secured: bool = False,
        ca_verifier=None,
        seed: int = 0,
        n_estimate: int = 1,
    ):
        self.kernel = kernel
        self.tag = tag
        self.space = space
        self.config = config
        self.secured = secured
        self.ca_verifier = ca_verifier
        self.seed = seed
        self.n_estimate = n_estimate
        self.nodes: Dict[int, "OverlayNode"] = {}
        self.counters: Counter = Counter()
        self.broadcast_traces: Dict[int, broadcast_mod.BroadcastTrace] = {}
        self._trace_seq = 0
        self.on_established: List[Callable] = []
        self.on_closed: List[Callable] = []
        self.on_broadcast: List[Callable] = []

    # -- membership ---------------------------------------------------------

    def add_node(
        self,
        node_id: int,
        machine: int,
        nat: NatClass,
        bootstrap: Sequence[dict] = (),
        certificate: Optional[Certificate] = None,
        revocation_view: Optional[RevocationView] = None,
        owner=None,
        start: bool = True,
    ) -> "OverlayNode":
        if node_id in self.nodes:
            raise ValueError(f"node {node_id} already present in overlay {self.tag}")
        node = OverlayNode(
            self, node_id, machine, nat,
            certificate=certificate,
            revocation_view=revocation_view or RevocationView(),
            owner=owner,
        )
        self.nodes[node_id] = node
        if start:
            node.start(bootstrap)
        return node

    def remove_node(self, node_id: int) -> None:
        """Crash: the node vanishes without notifying anyone."""
        node = self.nodes.pop(node_id, None)
        if node:
            node.crash()

    def graceful_leave(self, node_id: int) -> None:
        node = self.nodes.pop(node_id, None)
        if node:
            node.stop()

    # -- ground truth (harness view) ----------------------------------------

    def live_ids(self) -> List[int]:
        return sorted(self.nodes)

    def successor_of(self, node_id: int) -> Optional[int]:
        others = [i for i in self.nodes if i != node_id]
        if not others:
            return None
        return min(others, key=lambda p: clockwise_distance(node_id, p, self.space))

    def predecessor_of(self, node_id: int) -> Optional[int]:
        others = [i for i in self.nodes if i != node_id]
        if not others:
            return None
        return min(others, key=lambda p: clockwise_distance(p, node_id, self.space))

    def is_connected(self, node_id: int) -> bool:
        """True iff the node holds Established links to the live nodes
        immediately clockwise and counter-clockwise of it.  A sole node is
        connected by convention."""
        node = self.nodes.get(node_id)
        if node is None:
            return False
        succ = self.successor_of(node_id)
        if succ is None:
            return True
        pred = self.predecessor_of(node_id)
        return node.link_established(succ) and node.link_established(pred)

    def all_connected(self) -> bool:
        return all(self.is_connected(i) for i in self.nodes)

    # -- broadcast glue -------------------------------------------------------

    def full_broadcast(
        self,
        origin_id: int,
        payload_size: int,
        payload: Optional[dict] = None,
        exclude: Iterable[int] = (),
    ) -> broadcast_mod.BroadcastTrace:
        """Start a bounded broadcast covering the whole ring from origin."""
        origin = self.nodes[origin_id]
        self._trace_seq += 1
        trace = broadcast_mod.BroadcastTrace(
            trace_id=self._trace_seq, origin=origin_id, started_at=self.kernel.now
        )
        self.broadcast_traces[trace.trace_id] = trace
        full = RingRange(origin_id, (origin_id - 1) % self.space.size, end_inclusive=True)
        origin.deliver_broadcast(trace, full, dict(payload or {}), payload_size,
                                 frozenset(exclude), depth=0)
        return trace

    # -- security -------------------------------------------------------------

    def base_verify(self, node: "OverlayNode", peer_id: int, cert) -> Tuple[bool, Optional[str]]:
        if not self.secured:
            return True, None
        res = verify_peer(cert, self.ca_verifier, peer_id, node.revocation_view)
        return res.accepted, res.reason


class OverlayNode:
    """One overlay endpoint: link table, discovery state and timers."""

    def __init__(
        self,
        overlay: Overlay,
        node_id: int,
        machine: int,
        nat: NatClass,
        certificate: Optional[Certificate] = None,
        revocation_view: Optional[RevocationView] = None,
        owner=None,
    ):
        self.overlay = overlay
        self.id = node_id
        self.machine = machine
        self.nat = nat
        self.certificate = certificate
        self.revocation_view = revocation_view or RevocationView()
        self.owner = owner  # paired-node container for private instances
        self.cfg = overlay.config
        self.kernel = overlay.kernel
        self.space = overlay.space
        self.rng = random.Random(derive_seed(overlay.seed, overlay.tag, node_id))
        self.alive = False
        self.links: Dict[int, Connection] = {}
        # peer id -> {'machine': int, 'nat': NatClass, 'pub': Optional[int]}
        self.known_peers: Dict[int, dict] = {}
        self.bootstrap_candidates: List[dict] = []
        self._failed: Dict[int, Tuple[int, int]] = {}  # peer -> (attempts, next_try_ms)
        self.shortcut_peers: Set[int] = set()
        self._pending_shortcuts: Dict[int, int] = {}  # target addr -> deadline
        self.handlers: Dict[str, Callable] = {}  # extra message kinds (services)
        self.link_established_hooks: List[Callable] = []
        self.link_closed_hooks: List[Callable] = []
        self.stats: Counter = Counter()
        self._maint_handle = None
        self._ping_handle = None
        self._last_probe_ms = -(10 ** 9)

    # ------------------------------------------------------------------ basics

    def __repr__(self) -> str:
        return f"<node {self.overlay.tag}:{self.id}>"

    @property
    def now(self) -> int:
        return self.kernel.now

    def start(self, bootstrap: Sequence[dict] = ()) -> None:
        self.alive = True
        self.kernel.attach(self.overlay.tag, self.id, self.machine, self._on_message)
        self.add_bootstrap_candidates(bootstrap)
        jitter = self.rng.randrange(self.cfg.maintenance_period_ms)
        self._maint_handle = self.kernel.schedule(jitter, self._maintenance_event)
        pjitter = self.rng.randrange(self.cfg.ping_interval_ms)
        self._ping_handle = self.kernel.schedule(pjitter, self._ping_event)

    def stop(self) -> None:
        """Graceful leave: notify link partners, then detach."""
        for peer in sorted(self.links):
            conn = self.links[peer]
            if conn.phase is Phase.ESTABLISHED:
                self._send_link(peer, "close", {"leaving": True}, self.cfg.close_bytes)
            self.kernel.cancel(conn.timeout_handle)
            self.kernel.remove_link(self.overlay.tag, self.id, peer)
        self.links.clear()
        self.crash()

    def crash(self) -> None:
        self.alive = False
        self.kernel.cancel(self._maint_handle)
        self.kernel.cancel(self._ping_handle)
        self.kernel.detach(self.overlay.tag, self.id)

    def established_peer_ids(self) -> List[int]:
        return sorted(p for p, c in self.links.items() if c.phase is Phase.ESTABLISHED)

    def link_established(self, peer: int) -> bool:
        c = self.links.get(peer)
        return c is not None and c.phase is Phase.ESTABLISHED

    def believes_connected(self) -> bool:
        """Local belief of ring wellness: Established links to the nearest
        known peer on both sides (vacuously true when no peers are known)."""
        peers = [p for p in self.known_peers if p != self.id]
        if not peers:
            return True
        succ = min(peers, key=lambda p: (clockwise_distance(self.id, p, self.space), p))
        pred = min(peers, key=lambda p: (clockwise_distance(p, self.id, self.space), p))
        return self.link_established(succ) and self.link_established(pred)

    def shortcut_target_count(self) -> int:
        return shortcut_count(self.overlay.n_estimate)

    # ------------------------------------------------------------- transmission

    def _send_link(self, peer: int, kind: str, payload: dict, size: int) -> bool:
        msg = OverlayMessage(self.id, peer, kind, size, self.overlay.tag, payload)
        ok = self.kernel.transmit(self.id, peer, msg)
        if ok:
            self.overlay.counters[f"bytes:{kind}"] += size
        return ok

    def send_routed(
        self, dst_addr: int, kind: str, payload: dict, size: int,
        exclude: Iterable[int] = (), first_hop: Optional[int] = None,
    ) -> None:
        """Greedy-route a message toward an address.  ``first_hop`` forces the
        initial link (used when the origin itself would be the greedy
        delivery point, as in self-probes)."""
        payload = dict(payload)
        payload["_route"] = {
            "origin": self.id,
            "origin_machine": self.machine,
            "origin_nat": self.nat,
            "path": [],
            "exclude": tuple(sorted(exclude)),
        }
        msg = OverlayMessage(self.id, dst_addr, kind, size, self.overlay.tag, payload)
        if first_hop is None:
            self._route_step(msg)
        else:
            payload["_route"]["path"].append(self.id)
            if self.kernel.transmit(self.id, first_hop, msg):
                self.overlay.counters[f"bytes:{kind}"] += size
            else:
                self.stats["route_drops"] += 1

    def send_reverse(self, path_back: List[int], kind: str, payload: dict, size: int) -> None:
        """Send along an explicit node path (reply retracing a request)."""
        if not path_back:
            return
        payload = dict(payload)
        payload["_rpath"] = list(path_back)
        msg = OverlayMessage(self.id, path_back[-1], kind, size, self.overlay.tag, payload)
        self._reverse_step(msg)

    def send_direct(self, dst_id: int, dst_machine: int, dst_nat: Optional[NatClass],
                    kind: str, payload: dict, size: int) -> bool:
        """One-shot message straight to a peer's machine, usable only when
        NAT classes permit a direct path; no link state is created."""
        if dst_nat is None or not can_connect_directly(self.nat, dst_nat):
            return False
        msg = OverlayMessage(self.id, dst_id, kind, size, self.overlay.tag, dict(payload))
        if self.kernel.transmit_path(self.id, dst_id, (self.machine, dst_machine), msg):
            self.overlay.counters[f"bytes:{kind}"] += size
            return True
        return False

    def _route_step(self, msg: OverlayMessage) -> None:
        route = msg.payload["_route"]
        skip = set(route["exclude"])
        while True:
            candidates = [p for p in self.established_peer_ids() if p not in skip]
            nh = next_greedy_hop(self.id, candidates, msg.destination, self.space)
            if nh is None:
                self._dispatch(msg, prev_hop=None)
                return
            route["path"].append(self.id)
            if self.kernel.transmit(self.id, nh, msg):
                self.overlay.counters[f"bytes:{msg.kind}"] += msg.size_bytes
                return
            # the link evaporated under us: drop it and pick the next hop
            route["path"].pop()
            skip.add(nh)
            self._drop_conn(nh, penalize=False)

    def _reverse_step(self, msg: OverlayMessage) -> None:
        rpath: List[int] = msg.payload["_rpath"]
        nxt = rpath.pop(0)
        if self.kernel.transmit(self.id, nxt, msg):
            self.overlay.counters[f"bytes:{msg.kind}"] += msg.size_bytes
        else:
            self.stats["route_drops"] += 1  # reply path broke; requester retries

    # --------------------------------------------------------------- reception

    def _on_message(self, msg: OverlayMessage, prev_hop: int) -> None:
        if not self.alive:
            return
        if msg.kind == "_bounce":
            self._on_bounce(msg)
            return
        conn = self.links.get(prev_hop)
        if conn is not None:
            conn.last_seen = self.now
        payload = msg.payload
        if "_rpath" in payload:
            if payload["_rpath"]:
                self._reverse_step(msg)
            else:
                self._dispatch(msg, prev_hop)
            return
        if "_route" in payload and msg.destination != self.id:
            self._route_step(msg)
            return
        self._dispatch(msg, prev_hop)

    def _on_bounce(self, msg: OverlayMessage) -> None:
        """A peer's host reported the peer process gone: purge the link and,
        for routed traffic, resume the route around the corpse."""
        failed = msg.payload["failed"]
        orig: OverlayMessage = msg.payload["orig"]
        self.stats["bounces"] += 1
        self._drop_conn(failed, penalize=True)
        self.forget_peer(failed)
        payload = orig.payload
        if "_route" in payload:
            path = payload["_route"]["path"]
            if path and path[-1] == self.id:
                path.pop()
            self._route_step(orig)

    def _dispatch(self, msg: OverlayMessage, prev_hop: Optional[int]) -> None:
        kind = msg.kind
        if kind == "hs":
            self._on_handshake(msg)
        elif kind == "hs_reject":
            self._on_reject(msg)
        elif kind == "ping":
            pass  # arrival already refreshed last_seen
        elif kind == "close":
            self._on_close(msg)
        elif kind == "ctm_req":
            self._on_ctm_req(msg)
        elif kind == "ctm_rep":
            self._on_ctm_rep(msg)
        elif kind == "bcast":
            self._on_bcast(msg)
        else:
            handler = self.handlers.get(kind)
            if handler is not None:
                handler(msg)
            else:
                self.stats["unknown_kind"] += 1

    # ---------------------------------------------------------------- learning

    def learn_peer(self, peer_id: int, machine: Optional[int] = None,
                   nat: Optional[NatClass] = None, pub: Optional[int] = None) -> None:
        if peer_id == self.id:
            return
        info = self.known_peers.setdefault(peer_id, {"machine": None, "nat": None, "pub": None})
        if machine is not None:
            info["machine"] = machine
        if nat is not None:
            info["nat"] = nat
        if pub is not None:
            info["pub"] = pub

    def forget_peer(self, peer_id: int) -> None:
        self.known_peers.pop(peer_id, None)

    def neighbor_summary(self) -> List[Tuple[int, Optional[int], Optional[NatClass]]]:
        """Ring-side peers we would keep as neighbors, with contact info.

        Shortcuts are deliberately left out: they are this node's private
        routing aids, and gossiping them would hand every newcomer a map of
        the whole ring instead of the local neighborhood."""
        established = self.established_peer_ids()
        share = set(desired_neighbors(self.id, established,
                                      self.cfg.neighbors_per_side, self.space))
        out = []
        for p in sorted(established):
            if p in share:
                c = self.links[p]
                out.append((p, c.peer_machine, c.peer_nat))
        return out

    def _absorb_summary(self, entries) -> None:
        for p, machine, nat in entries:
            self.learn_peer(p, machine, nat)

    # ------------------------------------------------------------ path resolve

    def partner_candidates(self) -> List[Tuple[int, NatClass]]:
        """Machines of established partners, usable as relay midpoints."""
        out = []
        for p in self.established_peer_ids():
            c = self.links[p]
            if c.peer_machine is not None and c.peer_nat is not None:
                out.append((c.peer_machine, c.peer_nat))
        return out

    def _resolve_path(
        self,
        peer_machine: int,
        peer_nat: NatClass,
        extra_priv: Sequence[Tuple[int, NatClass]] = (),
        extra_pub: Sequence[Tuple[int, NatClass]] = (),
        peer_pub_id: Optional[int] = None,
    ) -> Optional[List[int]]:
        """Machine path to a peer: direct, two-hop relay, or routed fallback.

        Relay midpoints come from both sides' partner sets, same-overlay
        partners preferred over public-overlay ones; among feasible midpoints
        the minimal leg-latency sum wins, then the smaller machine id.
        """
        if can_connect_directly(self.nat, peer_nat):
            return [self.machine, peer_machine]
        own_priv = self.partner_candidates()
        own_pub = self.owner.public_partner_candidates() if self.owner else []
        for pool in (list(own_priv) + list(extra_priv), list(own_pub) + list(extra_pub)):
            best = None
            for m, nat in pool:
                if m in (self.machine, peer_machine) or nat is None:
                    continue
                if can_connect_directly(self.nat, nat) and can_connect_directly(nat, peer_nat):
                    lat = (self.kernel.latency.one_way(self.machine, m)
                           + self.kernel.latency.one_way(m, peer_machine))
                    key = (lat, m)
                    if best is None or key < best:
                        best = key
            if best is not None:
                self.stats["relay_links"] += 1
                return [self.machine, best[1], peer_machine]
        if self.owner is not None and peer_pub_id is not None:
            path = self.owner.routed_fallback_path(peer_pub_id)
            if path is not None:
                self.stats["fallback_links"] += 1
                return path
        return None

    # --------------------------------------------------------------- handshakes

    def _hs_msg_size(self, secured: bool, seq: int) -> int:
        base = self.cfg.hs_bytes_secured if secured else self.cfg.hs_bytes_unsecured
        # certificates ride on the second and third messages of a secured
        # handshake (responder's, then initiator's)
        if secured and seq in (2, 3):
            base += self.cfg.cert_bytes
        return base

    def open_link(
        self,
        peer_id: int,
        peer_machine: int,
        peer_nat: NatClass,
        kind: LinkKind,
        extra_priv: Sequence[Tuple[int, NatClass]] = (),
        extra_pub: Sequence[Tuple[int, NatClass]] = (),
        peer_pub_id: Optional[int] = None,
    ) -> bool:
        """Create the transport link and run the handshake as initiator.

        Returns True when a handshake is running or the link already exists;
        an outstanding routed connect request to the same peer is upgraded
        in place (both sides may race to open, the link table is shared).
        """
        if peer_id == self.id:
            return False
        conn = self.links.get(peer_id)
        if conn is not None and conn.phase in (Phase.HANDSHAKE, Phase.ESTABLISHED):
            return True
        path = self._resolve_path(peer_machine, peer_nat, extra_priv, extra_pub, peer_pub_id)
        if path is None:
            self.stats["no_path"] += 1
            return False
        self.kernel.add_link(self.overlay.tag, self.id, peer_id, path)
        if conn is None:
            conn = Connection(
                peer=peer_id, kind=kind, phase=Phase.HANDSHAKE,
                secured=self.overlay.secured, initiator=True,
                created_at=self.now, last_seen=self.now,
            )
            self.links[peer_id] = conn
        else:
            conn.phase = Phase.HANDSHAKE
            conn.initiator = True
            conn.kind = kind
        conn.peer_machine = peer_machine
        conn.peer_nat = peer_nat
        conn.hs_total = 6 if self.overlay.secured else 2
        self._arm_hs_timeout(conn)
        self.overlay.counters["connect_initiated"] += 1
        payload = {
            "seq": 1, "total": conn.hs_total, "kind": kind.value,
            "machine": self.machine, "nat": self.nat,
            "cert": self.certificate if self.overlay.secured else None,
            "neighbors": self.neighbor_summary(),
        }
        self._send_link(peer_id, "hs", payload, self._hs_msg_size(conn.secured, 1))
        return True

    def _arm_hs_timeout(self, conn: Connection) -> None:
        self.kernel.cancel(conn.timeout_handle)
        peer = conn.peer

        def check() -> None:
            cur = self.links.get(peer)
            if cur is conn and conn.phase in (Phase.INITIATING, Phase.HANDSHAKE):
                self._connection_failed(peer)

        conn.timeout_handle = self.kernel.schedule(self.cfg.hs_timeout_ms, check)

    def _on_handshake(self, msg: OverlayMessage) -> None:
        peer = msg.source
        p = msg.payload
        seq, total = p["seq"], p["total"]
        conn = self.links.get(peer)
        if conn is None:
            if seq != 1:
                return  # stray continuation of an abandoned handshake
            conn = Connection(
                peer=peer, kind=LinkKind(p["kind"]), phase=Phase.HANDSHAKE,
                secured=total == 6, initiator=False, created_at=self.now,
                last_seen=self.now, hs_total=total,
            )
            self.links[peer] = conn
            self._arm_hs_timeout(conn)
        elif conn.phase is Phase.INITIATING:
            # our routed connect request got through; the peer now drives
            conn.phase = Phase.HANDSHAKE
            conn.initiator = False
            conn.hs_total = total
            self._arm_hs_timeout(conn)
        elif conn.phase is Phase.ESTABLISHED:
            return  # duplicate tail of a crossed handshake
        if p.get("machine") is not None:
            conn.peer_machine = p["machine"]
            conn.peer_nat = p["nat"]
        if p.get("cert") is not None:
            conn.peer_cert = p["cert"]
        self._absorb_summary(p.get("neighbors", ()))
        self.learn_peer(peer, conn.peer_machine, conn.peer_nat)
        if (conn.secured and not conn.initiator and seq == 1
                and self.owner is not None):
            # start slow identity checks now; the verification gate at the
            # end of the handshake then joins an answer already in flight
            self.owner.pre_verify_hint(self, peer)
        if seq < total:
            # the summary already named better ring candidates; chase them
            # now instead of idling for the rest of a long handshake
            self._evaluate_neighbor_links()

        def advance(ok: bool, reason: Optional[str]) -> None:
            cur = self.links.get(peer)
            if cur is not conn or conn.phase is not Phase.HANDSHAKE:
                return
            conn.pending_verify = False
            if not ok:
                self._reject_link(conn, reason or "rejected")
                return
            if seq == total:
                self._mark_established(conn)
            elif seq == total - 1:
                self._send_hs_step(conn, seq + 1)
                self._mark_established(conn)
            else:
                self._send_hs_step(conn, seq + 1)

        # certificate checks: the initiator vets the responder's certificate
        # at message 2, the responder vets the initiator's at message 3
        needs_verify = conn.secured and (
            (seq == 2 and conn.initiator) or (seq == 3 and not conn.initiator)
        )
        if needs_verify:
            conn.pending_verify = True
            self._verify_async(peer, conn.peer_cert, advance)
        else:
            advance(True, None)

    def _send_hs_step(self, conn: Connection, seq: int) -> None:
        payload = {
            "seq": seq, "total": conn.hs_total, "kind": conn.kind.value,
            "machine": self.machine, "nat": self.nat,
            "cert": self.certificate if conn.secured and seq in (2, 3) else None,
            "neighbors": self.neighbor_summary(),
        }
        self._send_link(conn.peer, "hs", payload, self._hs_msg_size(conn.secured, seq))

    def _verify_async(self, peer_id: int, cert, cb: Callable[[bool, Optional[str]], None]) -> None:
        ok, reason = self.overlay.base_verify(self, peer_id, cert)
        if ok and self.owner is not None:
            self.owner.post_verify_check(self, peer_id, cert, cb)
        else:
            cb(ok, reason)

    def _mark_established(self, conn: Connection) -> None:
        if conn.phase is Phase.ESTABLISHED:
            return
        conn.phase = Phase.ESTABLISHED
        conn.established_at = self.now
        conn.last_seen = self.now
        self.kernel.cancel(conn.timeout_handle)
        self._failed.pop(conn.peer, None)
        self.learn_peer(conn.peer, conn.peer_machine, conn.peer_nat)
        if conn.kind is LinkKind.SHORTCUT:
            self.shortcut_peers.add(conn.peer)
        self.overlay.counters["links_established"] += 1
        logger.debug("%s established %s link to %s", self, conn.kind.value, conn.peer)
        for cb in self.overlay.on_established:
            cb(self, conn.peer)
        for cb in list(self.link_established_hooks):
            cb(conn.peer)
        # the handshake carried the peer's neighborhood; chase better ring
        # neighbors right away instead of waiting for the next tick
        self._evaluate_neighbor_links()
        if not self.believes_connected():
            self._maybe_probe()

    def _reject_link(self, conn: Connection, reason: str) -> None:
        self.overlay.counters["handshake_rejected"] += 1
        self.overlay.counters[f"reject:{reason}"] += 1
        self._send_link(conn.peer, "hs_reject", {"reason": reason}, self.cfg.reject_bytes)
        self._drop_conn(conn.peer, penalize=True)

    def _on_reject(self, msg: OverlayMessage) -> None:
        self.stats["rejected_by_peer"] += 1
        self._drop_conn(msg.source, penalize=True)

    def _on_close(self, msg: OverlayMessage) -> None:
        # a trimmed partner stays known; a departing one should not linger
        # in the neighbor candidate set
        if msg.payload.get("leaving"):
            self.forget_peer(msg.source)
        self._drop_conn(msg.source, penalize=False)

    def _drop_conn(self, peer: int, penalize: bool) -> None:
        conn = self.links.pop(peer, None)
        if conn is None:
            return
        self.kernel.cancel(conn.timeout_handle)
        self.kernel.remove_link(self.overlay.tag, self.id, peer)
        self.shortcut_peers.discard(peer)
        if penalize:
            self._note_failure(peer)
        if conn.phase is Phase.ESTABLISHED:
            self.overlay.counters["links_closed"] += 1
            for cb in self.overlay.on_closed:
                cb(self, peer)
            for cb in list(self.link_closed_hooks):
                cb(peer)
        # a node left with no links should not idle until the next tick
        if self.alive and not self.established_peer_ids() and self.bootstrap_candidates:
            self._bootstrap_step()

    def close_link(self, peer: int, notify: bool = True) -> None:
        conn = self.links.get(peer)
        if conn is None:
            return
        if notify and conn.phase is Phase.ESTABLISHED:
            self._send_link(peer, "close", {}, self.cfg.close_bytes)
        self._drop_conn(peer, penalize=False)

    def _connection_failed(self, peer: int) -> None:
        self.stats["connect_timeouts"] += 1
        self._drop_conn(peer, penalize=True)

    def _note_failure(self, peer: int) -> None:
        attempts, _ = self._failed.get(peer, (0, 0))
        delay = next_backoff(attempts, self.cfg.backoff_initial_ms, self.cfg.backoff_max_ms)
        self._failed[peer] = (attempts + 1, self.now + delay)
        if attempts + 1 >= self.cfg.forget_after_failures:
            # persistent failure: presume the peer dead so its id stops
            # occupying neighbor-candidate slots (rediscovery resurrects it)
            self.forget_peer(peer)
            self.bootstrap_candidates = [
                c for c in self.bootstrap_candidates if c["id"] != peer
            ]

    def _may_try(self, peer: int) -> bool:
        rec = self._failed.get(peer)
        return rec is None or self.now >= rec[1]

    # ------------------------------------------------------------ connect paths

    def add_bootstrap_candidates(self, candidates: Sequence[dict]) -> None:
        """Candidates are dicts with id/machine/nat and optionally the peer's
        public-overlay partner id (for relayed private bootstraps).

        Candidates are tried in seeded-random order to spread entry load;
        contact info is only learned once a link is actually established, so
        neighbor selection reflects observed topology, not the raw list."""
        known = {c["id"] for c in self.bootstrap_candidates}
        added = False
        for c in candidates:
            if c["id"] != self.id and c["id"] not in known:
                self.bootstrap_candidates.append(dict(c))
                known.add(c["id"])
                added = True
        if added:
            self.rng.shuffle(self.bootstrap_candidates)
        if self.alive and not self.established_peer_ids():
            self._bootstrap_step()

    def _bootstrap_step(self) -> bool:
        if self.established_peer_ids():
            return False
        inflight = sum(1 for c in self.links.values()
                       if c.phase in (Phase.INITIATING, Phase.HANDSHAKE))
        acted = False
        for cand in self.bootstrap_candidates:
            if inflight >= self.cfg.max_bootstrap_inflight:
                break
            pid = cand["id"]
            if pid in self.links or not self._may_try(pid):
                continue
            if self.open_link(pid, cand["machine"], cand["nat"], LinkKind.BOOTSTRAP,
                              peer_pub_id=cand.get("pub")):
                inflight += 1
                acted = True
            else:
                self._note_failure(pid)
        return acted

    def connect_peer(self, peer_id: int, kind: LinkKind) -> bool:
        """Connect to a peer, directly when its contact info is known and a
        transport path exists from this side, otherwise via a routed request
        (the peer then connects back, choosing among both relay pools)."""
        if peer_id == self.id or peer_id in self.links or not self._may_try(peer_id):
            return False
        info = self.known_peers.get(peer_id) or {}
        machine, nat = info.get("machine"), info.get("nat")
        if machine is not None and nat is not None:
            if self.open_link(peer_id, machine, nat, kind, peer_pub_id=info.get("pub")):
                return True
        self.request_connection(peer_id, kind)
        return True

    def request_connection(self, peer_id: int, kind: LinkKind) -> None:
        """Ask a peer (by overlay address) to open a link back to us, via a
        routed connect request."""
        if peer_id == self.id or peer_id in self.links:
            return
        conn = Connection(
            peer=peer_id, kind=kind, phase=Phase.INITIATING,
            secured=self.overlay.secured, initiator=False, created_at=self.now,
            last_seen=self.now,
        )
        self.links[peer_id] = conn
        self._arm_hs_timeout(conn)
        self.overlay.counters["connect_requested"] += 1
        self._send_ctm(peer_id, kind, exclude=())

    def _send_ctm(self, dst_addr: int, kind: LinkKind, exclude: Iterable[int],
                  first_hop: Optional[int] = None) -> None:
        payload = {
            "kind": kind.value,
            "cands_priv": self.partner_candidates()[:8],
            "cands_pub": (self.owner.public_partner_candidates()[:8] if self.owner else []),
            "origin_pub": self.owner.public_id if self.owner else None,
        }
        self.send_routed(dst_addr, "ctm_req", payload, self.cfg.ctm_req_bytes,
                         exclude=exclude, first_hop=first_hop)

    def probe_self(self) -> None:
        """Route a connect probe toward our own address; whoever is closest
        answers with its neighborhood, which includes our true neighbors.
        The probe starts on our closest link so it does not die at home."""
        peers = self.established_peer_ids()
        if not peers:
            return
        first = min(peers, key=lambda p: (ring_distance(p, self.id, self.space), p))
        self._send_ctm(self.id, LinkKind.NEIGHBOR, exclude=(self.id,), first_hop=first)
        self.stats["probes"] += 1

    def _maybe_probe(self) -> bool:
        """Probe at most once per rate-limit interval (establishment bursts
        would otherwise flood probes while the ring assembles)."""
        if self.now - self._last_probe_ms < self.cfg.probe_min_interval_ms:
            return False
        self._last_probe_ms = self.now
        self.probe_self()
        return True

    def request_shortcut(self, target_addr: int) -> None:
        self._pending_shortcuts[target_addr] = self.now + self.cfg.hs_timeout_ms
        self._send_ctm(target_addr, LinkKind.SHORTCUT, exclude=(self.id,))

    def _live_pending_shortcuts(self) -> int:
        self._pending_shortcuts = {
            t: dl for t, dl in self._pending_shortcuts.items() if dl > self.now
        }
        return len(self._pending_shortcuts)

    def _on_ctm_req(self, msg: OverlayMessage) -> None:
        p = msg.payload
        route = p["_route"]
        origin = route["origin"]
        if origin == self.id:
            return
        kind = LinkKind(p["kind"])
        self.learn_peer(origin, route["origin_machine"], route["origin_nat"],
                        p.get("origin_pub"))
        # a request delivered here is ours if it names us; shortcut requests
        # target an address and whoever is closest takes the role
        accepted = msg.destination == self.id or kind is LinkKind.SHORTCUT
        reason = None
        if accepted:
            opened = self.open_link(
                origin, route["origin_machine"], route["origin_nat"], kind,
                extra_priv=p.get("cands_priv", ()), extra_pub=p.get("cands_pub", ()),
                peer_pub_id=p.get("origin_pub"),
            )
            if not opened:
                accepted = False
                reason = "no_path"
        reply = {
            "responder": self.id,
            "machine": self.machine,
            "nat": self.nat,
            "accepted": accepted,
            "reason": reason,
            "target": msg.destination,
            "req_kind": p["kind"],
            "neighbors": self.neighbor_summary(),
        }
        back = list(reversed(route["path"]))
        if back:
            self.send_reverse(back, "ctm_rep", reply, self.cfg.ctm_rep_bytes)

    def _on_ctm_rep(self, msg: OverlayMessage) -> None:
        p = msg.payload
        responder = p["responder"]
        self.learn_peer(responder, p["machine"], p["nat"])
        self._absorb_summary(p.get("neighbors", ()))
        if p["req_kind"] == LinkKind.SHORTCUT.value:
            self._pending_shortcuts.pop(p["target"], None)
            if p["accepted"]:
                # the closest node took the slot; it may already be a neighbor
                self.shortcut_peers.add(responder)
        elif not p["accepted"]:
            conn = self.links.get(p["target"])
            if conn is not None and conn.phase is Phase.INITIATING:
                # request landed on the wrong node or could not open a path
                self._drop_conn(p["target"], penalize=True)
        # fresh knowledge may unlock better neighbor choices right away
        self._evaluate_neighbor_links()

    # ------------------------------------------------------------- maintenance

    def desired_neighbor_ids(self) -> List[int]:
        return desired_neighbors(self.id, self.known_peers.keys(),
                                 self.cfg.neighbors_per_side, self.space)

    def _evaluate_neighbor_links(self) -> List[str]:
        actions: List[str] = []
        for peer in self.desired_neighbor_ids():
            if self.connect_peer(peer, LinkKind.NEIGHBOR):
                actions.append(f"connect:{peer}")
        return actions

    def maintenance_tick(self) -> List[str]:
        """One maintenance pass; returns the actions taken (empty at the
        steady-state fixpoint)."""
        actions: List[str] = []
        established = self.established_peer_ids()
        if not established:
            if self._bootstrap_step():
                actions.append("bootstrap")
            return actions
        if not self.believes_connected():
            if self._maybe_probe():
                actions.append("probe")
        actions.extend(self._evaluate_neighbor_links())
        # shortcut upkeep: one draw per tick until the quota is filled
        want = self.shortcut_target_count()
        have = (len([p for p in self.shortcut_peers if self.link_established(p)])
                + self._live_pending_shortcuts())
        if have < want:
            target = sample_shortcut_target(self.id, self.overlay.n_estimate,
                                            self.rng, self.space)
            if target is not None:
                self.request_shortcut(target)
                actions.append(f"shortcut:{target}")
        actions.extend(self._trim_links())
        return actions

    def _trim_links(self) -> List[str]:
        """Close links that serve neither the neighborhood nor the shortcut
        quota, once they have outlived the grace period."""
        if not self.believes_connected():
            return []
        desired = set(self.desired_neighbor_ids())
        if not all(self.link_established(p) for p in desired):
            return []
        actions: List[str] = []
        want_shortcuts = self.shortcut_target_count()
        shortcuts = sorted(
            (p for p in self.shortcut_peers if self.link_established(p)),
            key=lambda p: (self.links[p].established_at, p),
        )
        keep = set(shortcuts[:want_shortcuts])
        for p in shortcuts[want_shortcuts:]:
            self.close_link(p)
            actions.append(f"trim_shortcut:{p}")
        for peer in sorted(self.links):
            conn = self.links.get(peer)
            if conn is None or conn.phase is not Phase.ESTABLISHED:
                continue
            if peer in desired or peer in keep:
                continue
            if self.now - (conn.established_at or conn.created_at) < self.cfg.grace_period_ms:
                continue
            self.close_link(peer)
            actions.append(f"trim:{peer}")
        return actions

    def _maintenance_event(self) -> None:
        if not self.alive:
            return
        self.maintenance_tick()
        self._maint_handle = self.kernel.schedule(
            self.cfg.maintenance_period_ms, self._maintenance_event
        )

    def _ping_event(self) -> None:
        if not self.alive:
            return
        for peer in sorted(self.links):
            conn = self.links.get(peer)
            if conn is None or conn.phase is not Phase.ESTABLISHED:
                continue
            if self.now - conn.last_seen > self.cfg.silence_timeout_ms:
                # partner fell silent: presume it dead, drop it from our view
                self.stats["silence_closes"] += 1
                self._drop_conn(peer, penalize=True)
                self.forget_peer(peer)
                continue
            self._send_link(peer, "ping", {}, self.cfg.ping_bytes)
        self._ping_handle = self.kernel.schedule(self.cfg.ping_interval_ms, self._ping_event)

    # ---------------------------------------------------------------- broadcast

    def deliver_broadcast(
        self,
        trace: broadcast_mod.BroadcastTrace,
        rng: RingRange,
        payload: dict,
        payload_size: int,
        exclude: frozenset,
        depth: int,
    ) -> None:
        trace.record_delivery(self.id, self.now, depth)
        for cb in self.overlay.on_broadcast:
            cb(self, payload)
        children = broadcast_mod.split_range(
            self.id, rng, self.established_peer_ids(), exclude, self.space
        )
        size = self.cfg.broadcast_header_bytes + payload_size
        for child, sub in children:
            msg = OverlayMessage(
                self.id, child, "bcast", size, self.overlay.tag,
                {
                    "range": (sub.start, sub.end, sub.end_inclusive),
                    "exclude": tuple(sorted(exclude)),
                    "trace": trace.trace_id,
                    "depth": depth + 1,
                    "payload_size": payload_size,
                    "app": payload,
                },
            )
            if self.kernel.transmit(self.id, child, msg):
                trace.record_message(size)
                self.overlay.counters["bytes:bcast"] += size

    def _on_bcast(self, msg: OverlayMessage) -> None:
        p = msg.payload
        trace = self.overlay.broadcast_traces.get(p["trace"])
        if trace is None:
            return
        s, e, inc = p["range"]
        self.deliver_broadcast(
            trace, RingRange(s, e, inc), p["app"], p["payload_size"],
            frozenset(p["exclude"]), p["depth"],
        )
