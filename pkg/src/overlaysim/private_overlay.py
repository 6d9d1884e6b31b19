"""Private overlays bootstrapped through a public overlay.

Each group member runs a pair of nodes: a public-overlay node used for
discovery and relay assistance, and a private-overlay node carrying the
group's traffic.  Joining walks five steps: connect publicly, advertise in
the public DHT under the group's discovery key, query that key on a
schedule, start the private instance bootstrapped from the retrieved
advertisements, and secure every private link with the group certificate.
Continued querying doubles as partition repair: discovering a member closer
than a current ring neighbor triggers a direct connection that lets
maintenance merge the rings.

Revocation travels either by bounded broadcast over the private ring or
through the public DHT: a notice is stored at the revoked node's
notification key (whose current link partners subscribed there), fetched
subscribers get a unicast copy, and everyone else discovers the notice when
they next act as the accepting side of a handshake with the revoked node.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from .broadcast import BroadcastTrace
from .dht import (
    DhtService,
    GET_REQ_BYTES,
    PUT_OVERHEAD_BYTES,
    REPLY_HEADER_BYTES,
)
from .kernel import NatClass
from .node import LinkKind, NodeConfig, Overlay, OverlayNode
from .ring import AddressSpace, clockwise_distance, next_greedy_hop
from .security import REVOCATION_NOTICE_BYTES, Certificate, GroupCA, RevocationNotice
from .util import derive_seed, stable_digest

logger = logging.getLogger(__name__)

SUBSCRIPTION_VALUE_BYTES = 20
NOTICE_HEADER_BYTES = 60
NOTICE_UNICAST_BYTES = REVOCATION_NOTICE_BYTES + NOTICE_HEADER_BYTES


class QueryMode(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


def discovery_key(group: str, space: AddressSpace) -> int:
    """Ring address in the public space where the group's member
    advertisements live."""
    return stable_digest(("discovery", group), space.bits)


def revocation_key(group: str, node_id: int, space: AddressSpace) -> int:
    """Notification key for one member node: subscriptions and revocation
    notices concerning that node are stored here."""
    return stable_digest(("revocation", group, node_id), space.bits)


def next_query_delay(
    mode: QueryMode,
    attempt: int,
    static_period_ms: int = 300_000,
    dynamic_initial_ms: int = 30_000,
    dynamic_max_ms: int = 3_600_000,
) -> int:
    """Delay until the next discovery query.

    Static polls at a fixed period; dynamic backs off exponentially from the
    initial delay up to the cap, with the attempt counter reset whenever a
    query changed the topology.
    """
    if attempt < 0:
        raise ValueError("attempt must be >= 0")
    if mode is QueryMode.STATIC:
        return static_period_ms
    if attempt > 60:
        return dynamic_max_ms
    return min(dynamic_initial_ms << attempt, dynamic_max_ms)


@dataclass
class GroupConfig:
    """Behavior knobs for one private group."""

    secured: bool = False
    query_mode: QueryMode = QueryMode.DYNAMIC
    ad_value_bytes: int = 800
    ad_ttl_ms: int = 300_000
    notice_ttl_ms: int = 3_600_000
    static_period_ms: int = 300_000
    dynamic_initial_ms: int = 30_000
    dynamic_max_ms: int = 3_600_000
    responder_revocation_check: bool = True
    auto_subscribe_partners: bool = True


def notice_to_value(notice: RevocationNotice) -> Tuple:
    return ("rnotice", notice.user, notice.group, notice.revoked_at, notice.signature)


def value_to_notice(value, group: str) -> Optional[RevocationNotice]:
    if not (isinstance(value, tuple) and len(value) == 5 and value[0] == "rnotice"):
        return None
    _, user, grp, revoked_at, signature = value
    if grp != group:
        return None
    return RevocationNotice(user=user, group=grp, revoked_at=revoked_at,
                            signature=signature)


class PairedNode:
    """One group member: a public node, a private node, and the glue.

    Implements the owner interface the private overlay node calls back into:
    relay candidates from the public side, a routed fallback path over the
    public overlay, and the revocation freshness check during handshakes.
    """

    def __init__(
        self,
        group: "PrivateGroup",
        user: str,
        machine: int,
        nat: NatClass,
        pub_id: int,
        priv_id: int,
        certificate: Optional[Certificate],
    ):
        self.group = group
        self.user = user
        self.machine = machine
        self.nat = nat
        self.pub_id = pub_id
        self.priv_id = priv_id
        self.certificate = certificate
        self.kernel = group.kernel
        self.cfg = group.cfg
        self.public_node: Optional[OverlayNode] = None
        self.private_node: Optional[OverlayNode] = None
        self.dht: Optional[DhtService] = None
        self.alive = False
        self.advertise = True
        self.query = True
        self.started_ms: Optional[int] = None
        self.public_connected_ms: Optional[int] = None
        self.private_connected_ms: Optional[int] = None
        self.query_attempt = 0
        self.query_times: List[int] = []
        self.watched: Set[int] = set()
        self._peer_checks: Dict[int, dict] = {}
        self._query_handle = None
        self._lease_handle = None

    # ------------------------------------------------------------- owner iface

    @property
    def public_id(self) -> int:
        return self.pub_id

    @property
    def now(self) -> int:
        return self.kernel.now

    def public_partner_candidates(self) -> List[Tuple[int, NatClass]]:
        if self.public_node is None:
            return []
        return self.public_node.partner_candidates()

    def routed_fallback_path(self, peer_pub_id: int) -> Optional[List[int]]:
        """Machine path of the greedy public-overlay route to the peer's
        public partner; the private link then rides the public overlay as a
        multi-leg point-to-point tunnel."""
        pub = self.group.public_overlay
        cur = self.public_node
        if cur is None or peer_pub_id == cur.id:
            return None
        machines = [cur.machine]
        seen = {cur.id}
        while cur.id != peer_pub_id:
            nh = next_greedy_hop(cur.id, cur.established_peer_ids(), peer_pub_id,
                                 pub.space)
            if nh is None or nh in seen:
                return None
            nxt = pub.nodes.get(nh)
            if nxt is None:
                return None
            seen.add(nh)
            machines.append(nxt.machine)
            cur = nxt
        return machines if len(machines) >= 2 else None

    def _checks_enabled(self) -> bool:
        return (self.group.secured and self.cfg.responder_revocation_check
                and self.dht is not None)

    def pre_verify_hint(self, node: OverlayNode, peer_id: int) -> None:
        """Start the revocation lookup for a handshaking peer as soon as its
        identity is known, so the verdict usually arrives before the
        handshake reaches the verification gate."""
        if not self._checks_enabled() or peer_id in self._peer_checks:
            return
        entry = {"done": False, "values": None, "waiters": []}
        self._peer_checks[peer_id] = entry

        def done(values) -> None:
            entry["done"] = True
            entry["values"] = values
            for cert, cb in entry["waiters"]:
                self._settle_peer_check(node, peer_id, cert, values, cb)
            entry["waiters"] = []

        key = revocation_key(self.group.name, peer_id, self.group.public_space)
        self.dht.get(key, done)

    def _settle_peer_check(self, node: OverlayNode, peer_id: int, cert,
                           values, cb: Callable[[bool, Optional[str]], None]) -> None:
        if values:
            for value, _inserter, _size in values:
                notice = value_to_notice(value, self.group.name)
                if notice is not None:
                    self.group.apply_notice(node, notice)
        ok, reason = self.group.private_overlay.base_verify(node, peer_id, cert)
        cb(ok, reason)

    def post_verify_check(self, node: OverlayNode, peer_id: int, cert,
                          cb: Callable[[bool, Optional[str]], None]) -> None:
        """Revocation freshness: the accepting side of a secured handshake
        consults the DHT at the initiator's notification key before letting
        the link establish.  Joins the lookup begun by pre_verify_hint when
        one is in flight."""
        if not (self._checks_enabled() and cert is not None):
            cb(True, None)
            return
        conn = node.links.get(peer_id)
        if conn is None or conn.initiator:
            cb(True, None)
            return
        entry = self._peer_checks.pop(peer_id, None)
        if entry is not None and entry["done"]:
            self._settle_peer_check(node, peer_id, cert, entry["values"], cb)
        elif entry is not None:
            entry["waiters"].append((cert, cb))
        else:
            key = revocation_key(self.group.name, peer_id, self.group.public_space)
            self.dht.get(key, lambda values: self._settle_peer_check(
                node, peer_id, cert, values, cb))

    # ------------------------------------------------------------------- join

    def start(self, public_bootstrap: Sequence[dict],
              advertise: bool = True, query: bool = True) -> None:
        """Step 1: join the public overlay; the remaining steps chain off the
        public-connected event."""
        self.alive = True
        self.advertise = advertise
        self.query = query
        self.started_ms = self.now
        node, svc = self.group.public_attach(self.pub_id, self.machine, self.nat,
                                             public_bootstrap)
        self.public_node = node
        self.dht = svc
        node.link_established_hooks.append(self._on_public_link)
        self._check_public_connected()

    def leave(self) -> None:
        self.alive = False
        self.kernel.cancel(self._query_handle)
        self.kernel.cancel(self._lease_handle)
        if self.private_node is not None:
            self.group.private_overlay.graceful_leave(self.priv_id)
        self.group.public_detach(self.pub_id)
        self.public_node = None
        self.private_node = None
        self.dht = None

    def crash(self) -> None:
        self.alive = False
        self.kernel.cancel(self._query_handle)
        self.kernel.cancel(self._lease_handle)
        if self.private_node is not None:
            self.group.private_overlay.remove_node(self.priv_id)
        self.group.public_detach(self.pub_id, crash=True)
        self.public_node = None
        self.private_node = None
        self.dht = None

    def _on_public_link(self, _peer: int) -> None:
        self._check_public_connected()

    def _check_public_connected(self) -> None:
        if not self.alive or self.public_connected_ms is not None:
            return
        if not self.group.public_overlay.is_connected(self.pub_id):
            return
        self.public_connected_ms = self.now
        if self.advertise:
            self._lease_event()          # step 2 and its renewals
        if self.query:
            self._begin_queries()        # step 3

    def begin_advertising(self) -> None:
        """Late enablement used by scripted scenarios."""
        if self.alive and self._lease_handle is None:
            self.advertise = True
            self._lease_event()

    def begin_queries(self, reset: bool = True, immediate: bool = True) -> None:
        """Resume periodic discovery; with ``immediate=False`` the next query
        waits one full period, as if the scheduler had never stopped."""
        if not self.alive:
            return
        self.query = True
        if reset:
            self.query_attempt = 0
        self.kernel.cancel(self._query_handle)
        delay = 0 if immediate else next_query_delay(
            self.cfg.query_mode, self.query_attempt,
            self.cfg.static_period_ms, self.cfg.dynamic_initial_ms,
            self.cfg.dynamic_max_ms,
        )
        self._query_handle = self.kernel.schedule(delay, self._query_event)

    def pause_queries(self) -> None:
        self.query = False
        self.kernel.cancel(self._query_handle)
        self._query_handle = None

    def force_start_private(self, cands) -> None:
        """Scripted bootstrap: start the private node from an explicit
        candidate list instead of a discovery query (partition scenarios)."""
        if self.private_node is None:
            self._start_private(sorted(cands, key=lambda c: c["id"]))

    def _advertisement(self) -> Tuple:
        return ("ad", self.pub_id, self.priv_id, self.machine, self.nat.value)

    def _lease_event(self) -> None:
        if not self.alive or self.dht is None:
            return
        self.dht.put(self.group.key, self._advertisement(),
                     self.cfg.ad_value_bytes, self.cfg.ad_ttl_ms)
        if self.cfg.auto_subscribe_partners and self.private_node is not None:
            # subscriptions follow current partners; lapsed ones just expire
            self.watched &= set(self.private_node.established_peer_ids())
        for watched in sorted(self.watched):
            key = revocation_key(self.group.name, watched, self.group.public_space)
            self.dht.put(key, ("rsub", self.priv_id), SUBSCRIPTION_VALUE_BYTES,
                         self.cfg.ad_ttl_ms)
        self._lease_handle = self.kernel.schedule(self.cfg.ad_ttl_ms // 2,
                                                  self._lease_event)

    def _begin_queries(self) -> None:
        self._query_handle = self.kernel.schedule(0, self._query_event)

    def _query_event(self) -> None:
        if not self.alive or self.dht is None:
            return
        self.query_times.append(self.now)
        delay = next_query_delay(
            self.cfg.query_mode, self.query_attempt,
            self.cfg.static_period_ms, self.cfg.dynamic_initial_ms,
            self.cfg.dynamic_max_ms,
        )
        self.query_attempt += 1
        # arm the follow-up before the lookup: a result that resets the
        # backoff must cancel this handle, not be overwritten by it
        self._query_handle = self.kernel.schedule(delay, self._query_event)
        self.dht.get(self.group.key, self._on_query_result)

    def _reset_query_backoff(self) -> None:
        self.query_attempt = 0
        self.kernel.cancel(self._query_handle)
        delay = next_query_delay(
            self.cfg.query_mode, 0,
            self.cfg.static_period_ms, self.cfg.dynamic_initial_ms,
            self.cfg.dynamic_max_ms,
        )
        self._query_handle = self.kernel.schedule(delay, self._query_event)

    def _on_query_result(self, values) -> None:
        if not self.alive or values is None:
            return
        cands = []
        for value, _inserter, _size in values:
            if not (isinstance(value, tuple) and value and value[0] == "ad"):
                continue
            _, pub_id, priv_id, machine, nat_value = value
            if priv_id == self.priv_id:
                continue
            cands.append({"id": priv_id, "machine": machine,
                          "nat": NatClass(nat_value), "pub": pub_id})
        cands.sort(key=lambda c: c["id"])
        if self.private_node is None:
            self._start_private(cands)   # step 4
            changed = bool(cands)
        else:
            changed = self._partition_check(cands)
        if changed and self.cfg.query_mode is QueryMode.DYNAMIC:
            self._reset_query_backoff()
        self._check_private_connected()

    def _start_private(self, cands: List[dict]) -> None:
        node = self.group.private_overlay.add_node(
            self.priv_id, self.machine, self.nat,
            bootstrap=cands,
            certificate=self.certificate,
            owner=self,
            start=True,
        )
        self.private_node = node
        node.link_established_hooks.append(self._on_private_link)
        node.handlers["notice"] = self._on_notice_msg
        self._check_private_connected()

    def _partition_check(self, cands: List[dict]) -> bool:
        """Connect to any discovered member closer than a current ring-side
        neighbor (the healing rule); returns whether topology-changing action
        was taken."""
        node = self.private_node
        space = node.space
        fresh = [c for c in cands if c["id"] not in node.links]
        established = node.established_peer_ids()
        if not established:
            before = len(node.bootstrap_candidates)
            node.add_bootstrap_candidates(fresh)
            return len(node.bootstrap_candidates) > before
        succ = min(established, key=lambda p: (clockwise_distance(node.id, p, space), p))
        pred = min(established, key=lambda p: (clockwise_distance(p, node.id, space), p))
        acted = False
        for c in fresh:
            closer_cw = (clockwise_distance(node.id, c["id"], space)
                         < clockwise_distance(node.id, succ, space))
            closer_ccw = (clockwise_distance(c["id"], node.id, space)
                          < clockwise_distance(pred, node.id, space))
            if closer_cw or closer_ccw:
                if node.open_link(c["id"], c["machine"], c["nat"], LinkKind.BOOTSTRAP,
                                  peer_pub_id=c["pub"]):
                    acted = True
        return acted

    def _on_private_link(self, peer: int) -> None:
        if self.group.secured and self.cfg.auto_subscribe_partners:
            self.subscribe_revocation(peer)
        self._check_private_connected()

    def _check_private_connected(self) -> None:
        if self.private_connected_ms is not None or self.private_node is None:
            return
        if self.group.private_overlay.is_connected(self.priv_id):
            self.private_connected_ms = self.now

    # -------------------------------------------------------------- revocation

    def subscribe_revocation(self, watched_id: int) -> None:
        """Register interest in a peer's revocation, then immediately check
        for a notice that may have landed before the subscription."""
        if watched_id in self.watched or self.dht is None:
            return
        self.watched.add(watched_id)
        key = revocation_key(self.group.name, watched_id, self.group.public_space)
        self.dht.put(key, ("rsub", self.priv_id), SUBSCRIPTION_VALUE_BYTES,
                     self.cfg.ad_ttl_ms)
        self.dht.get(key, self._on_subscription_check)

    def _on_subscription_check(self, values) -> None:
        if not values or self.private_node is None:
            return
        for value, _inserter, _size in values:
            notice = value_to_notice(value, self.group.name)
            if notice is not None:
                self.group.apply_notice(self.private_node, notice)

    def _on_notice_msg(self, msg) -> None:
        notice = value_to_notice(msg.payload.get("notice"), self.group.name)
        if notice is not None and self.private_node is not None:
            self.group.apply_notice(self.private_node, notice)


class PrivateGroup:
    """Registry and control surface for one private overlay group."""

    def __init__(
        self,
        kernel,
        name: str,
        public_overlay: Overlay,
        public_attach: Callable[[int, int, NatClass, Sequence[dict]],
                                Tuple[OverlayNode, DhtService]],
        public_detach: Callable[..., None],
        private_space: AddressSpace,
        node_config: NodeConfig,
        config: Optional[GroupConfig] = None,
        ca: Optional[GroupCA] = None,
        seed: int = 0,
    ):
        self.kernel = kernel
        self.name = name
        self.cfg = config or GroupConfig()
        self.public_overlay = public_overlay
        self.public_space = public_overlay.space
        self.public_attach = public_attach
        self.public_detach = public_detach
        self.ca = ca
        self.secured = self.cfg.secured
        if self.secured and ca is None:
            raise ValueError("secured group requires a CA")
        self.private_overlay = Overlay(
            kernel, f"priv:{name}", private_space, node_config,
            secured=self.secured,
            ca_verifier=ca.verifier() if ca else None,
            seed=derive_seed(seed, "priv", name),
            n_estimate=1,
        )
        self.key = discovery_key(name, self.public_space)
        self.members: Dict[int, PairedNode] = {}
        self.user_nodes: Dict[str, List[int]] = {}
        self.notice_log: List[Tuple[int, int, str]] = []
        self.rng = random.Random(derive_seed(seed, "group", name))
        self.private_overlay.on_broadcast.append(self._on_broadcast_payload)

    def set_expected_size(self, n: int) -> None:
        self.private_overlay.n_estimate = max(1, n)

    # -------------------------------------------------------------- membership

    def _fresh_id(self, space: AddressSpace, taken) -> int:
        while True:
            cand = space.random_id(self.rng)
            if cand not in taken:
                return cand

    def enroll_member(self, user: str, machine: int, nat: NatClass,
                      priv_id: Optional[int] = None,
                      pub_id: Optional[int] = None) -> PairedNode:
        if priv_id is None:
            priv_id = self._fresh_id(self.private_overlay.space, self.members)
        if pub_id is None:
            pub_id = self._fresh_id(self.public_space, self.public_overlay.nodes)
        cert = None
        if self.secured:
            secret = f"secret:{user}"
            self.ca.add_member(user, secret)
            result = self.ca.enroll(user, secret, priv_id, self.kernel.now)
            if result.certificate is None:
                raise RuntimeError(f"enrollment not auto-signed for {user}: {result.status}")
            cert = result.certificate
        member = PairedNode(self, user, machine, nat, pub_id, priv_id, cert)
        self.members[priv_id] = member
        self.user_nodes.setdefault(user, []).append(priv_id)
        return member

    def live_members(self) -> List[PairedNode]:
        return [self.members[i] for i in sorted(self.members) if self.members[i].alive]

    # -------------------------------------------------------------- revocation

    def _on_broadcast_payload(self, node: OverlayNode, payload: dict) -> None:
        if payload.get("kind") != "revocation":
            return
        notice = value_to_notice(payload.get("notice"), self.name)
        if notice is not None:
            self.apply_notice(node, notice)

    def apply_notice(self, node: OverlayNode, notice: RevocationNotice) -> None:
        """Install a notice in one node's view and cut links the view now
        forbids."""
        known = notice.user in node.revocation_view.users
        node.revocation_view.apply_notice(notice)
        if not known:
            self.notice_log.append((self.kernel.now, node.id, notice.user))
        for peer in list(node.links):
            conn = node.links.get(peer)
            if conn is not None and conn.peer_cert is not None \
                    and conn.peer_cert.user == notice.user:
                node.close_link(peer)

    def revoke_via_broadcast(self, agent: PairedNode, user: str) -> BroadcastTrace:
        """Revoke at the CA and push the notice to every member over the
        private ring, skipping the revoked member's node."""
        notice = self.ca.revoke_user(user, self.kernel.now)
        revoked_ids = set(self.user_nodes.get(user, ()))
        if agent.private_node is not None:
            self.apply_notice(agent.private_node, notice)
        payload = {"kind": "revocation", "notice": notice_to_value(notice)}
        return self.private_overlay.full_broadcast(
            agent.priv_id, REVOCATION_NOTICE_BYTES, payload, exclude=revoked_ids,
        )

    def revoke_via_dht(self, agent: PairedNode, user: str) -> dict:
        """Revoke at the CA, store the notice at the revoked node's
        notification key, fetch the subscriber list, and unicast the notice
        to each subscriber.  Returns a record updated asynchronously as the
        steps complete."""
        notice = self.ca.revoke_user(user, self.kernel.now)
        value = notice_to_value(notice)
        revoked_ids = set(self.user_nodes.get(user, ()))
        if agent.private_node is not None:
            self.apply_notice(agent.private_node, notice)
        record = {
            "user": user,
            "started_ms": self.kernel.now,
            "keys": 0,
            "subscribers": [],
            "notices_sent": 0,
            "bytes_logical": 0,
            "done_ms": None,
        }

        def revoke_one(revoked_id: int) -> None:
            key = revocation_key(self.name, revoked_id, self.public_space)
            record["keys"] += 1
            record["bytes_logical"] += PUT_OVERHEAD_BYTES + REVOCATION_NOTICE_BYTES
            agent.dht.put(key, value, REVOCATION_NOTICE_BYTES, self.cfg.notice_ttl_ms)

            def on_subscribers(values) -> None:
                reply_bytes = REPLY_HEADER_BYTES
                subs = []
                for v, _inserter, vsize in values or ():
                    reply_bytes += vsize
                    if isinstance(v, tuple) and len(v) == 2 and v[0] == "rsub":
                        subs.append(v[1])
                record["bytes_logical"] += GET_REQ_BYTES + reply_bytes
                for sub in sorted(set(subs)):
                    if sub in revoked_ids or sub == agent.priv_id:
                        continue
                    if agent.private_node is None:
                        break
                    record["subscribers"].append(sub)
                    record["notices_sent"] += 1
                    record["bytes_logical"] += NOTICE_UNICAST_BYTES
                    agent.private_node.send_routed(sub, "notice", {"notice": value},
                                                   NOTICE_UNICAST_BYTES)
                record["done_ms"] = self.kernel.now

            agent.dht.get(key, on_subscribers)

        for revoked_id in sorted(revoked_ids):
            revoke_one(revoked_id)
        return record

    # ------------------------------------------------------------------ relays

    def establish_relay(self, a_priv_id: int, b_priv_id: int) -> dict:
        """Resolve the transport path an a->b private link would use right
        now: direct, two-hop relay, or routed fallback over the public
        overlay."""
        a = self.members[a_priv_id]
        b = self.members[b_priv_id]
        if a.private_node is None:
            return {"kind": "none", "machines": None, "latency_ms": None}
        extra_priv = b.private_node.partner_candidates() if b.private_node else []
        path = a.private_node._resolve_path(
            b.machine, b.nat,
            extra_priv=extra_priv,
            extra_pub=b.public_partner_candidates(),
            peer_pub_id=b.pub_id,
        )
        if path is None:
            return {"kind": "none", "machines": None, "latency_ms": None}
        if len(path) == 2:
            kind = "direct"
        elif len(path) == 3:
            kind = "relay"
        else:
            kind = "routed"
        latency = sum(self.kernel.latency.one_way(path[i], path[i + 1])
                      for i in range(len(path) - 1))
        return {"kind": kind, "machines": path, "latency_ms": latency}
