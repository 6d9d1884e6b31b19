"""Soft-state DHT layered on an overlay.

Every value is stored under a ring address with a lease; the node whose
address is closest to the key holds the primary copy and pushes replicas to
its immediate ring-side neighbors.  Entries vanish when their lease runs
out, so persistence means periodic re-insertion, and responsibility follows
the ring: a holder that finds itself no longer among the closest nodes
hands its entries to the current closest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .kernel import OverlayMessage
from .ring import ring_distance

logger = logging.getLogger(__name__)

GET_REQ_BYTES = 80
PUT_OVERHEAD_BYTES = 80
ACK_BYTES = 60
REPLY_HEADER_BYTES = 60
PUSH_HEADER_BYTES = 60
ENTRY_OVERHEAD_BYTES = 20


@dataclass
class DhtConfig:
    period_ms: int = 30_000
    request_timeout_ms: int = 5_000
    max_attempts: int = 3
    replicas_per_side: int = 1


@dataclass
class DhtStore:
    """Leased key/value store; a key maps to a set of (value, inserter)
    entries, each with its own expiry."""

    entries: Dict[int, Dict[Tuple, Tuple[int, int]]] = field(default_factory=dict)

    def put(self, key: int, value, inserter: int, expiry: int, value_size: int) -> None:
        slot = self.entries.setdefault(key, {})
        ident = (inserter, value)
        old = slot.get(ident)
        if old is not None:
            expiry = max(expiry, old[0])
        slot[ident] = (expiry, value_size)

    def get(self, key: int, now: int) -> List[Tuple]:
        """Live entries under a key as (value, inserter, value_size),
        deterministically ordered."""
        slot = self.entries.get(key, {})
        out = []
        for (inserter, value), (expiry, vsize) in slot.items():
            if expiry > now:
                out.append((value, inserter, vsize))
        out.sort(key=lambda e: (e[1], repr(e[0])))
        return out

    def purge(self, now: int) -> None:
        for key in list(self.entries):
            slot = self.entries[key]
            for ident in [i for i, (exp, _) in slot.items() if exp <= now]:
                del slot[ident]
            if not slot:
                del self.entries[key]

    def keys(self) -> List[int]:
        return sorted(self.entries)

    def raw_entries(self, key: int) -> List[Tuple]:
        """All entries under a key as (value, inserter, expiry, value_size)."""
        slot = self.entries.get(key, {})
        out = [(value, inserter, exp, vsize)
               for (inserter, value), (exp, vsize) in slot.items()]
        out.sort(key=lambda e: (e[1], repr(e[0])))
        return out


class DhtService:
    """Attaches DHT behavior to one overlay node.

    Requests are greedy-routed toward the key address; whoever the route
    delivers to acts as the responsible holder.  Replies retrace the request
    path.  Lost requests are retried a bounded number of times, which also
    rides out a crashed primary: once the dead link is discarded the retry
    routes to a surviving replica.
    """

    def __init__(self, node, config: Optional[DhtConfig] = None):
        self.node = node
        self.cfg = config or DhtConfig()
        self.store = DhtStore()
        self._req_seq = 0
        self._pending: Dict[Tuple[int, int], dict] = {}
        # (peer, key, inserter, value) -> expiry already copied there; replicas
        # are re-sent only when a renewal advanced the lease
        self._pushed: Dict[Tuple, int] = {}
        node.handlers["dht_put"] = self._on_put
        node.handlers["dht_get"] = self._on_get
        node.handlers["dht_rep"] = self._on_reply
        node.handlers["dht_ack"] = self._on_ack
        node.handlers["dht_push"] = self._on_push
        self._maint_handle = node.kernel.schedule(
            node.rng.randrange(self.cfg.period_ms), self._maintenance
        )

    def stop(self) -> None:
        self.node.kernel.cancel(self._maint_handle)
        for rec in self._pending.values():
            self.node.kernel.cancel(rec["handle"])
        self._pending.clear()

    # ------------------------------------------------------------------ client

    def put(self, key: int, value, value_size: int, ttl_ms: int,
            on_done: Optional[Callable[[bool], None]] = None) -> None:
        payload = {
            "key": key, "value": value, "inserter": self.node.id,
            "ttl": ttl_ms, "vsize": value_size,
            "machine": self.node.machine, "nat": self.node.nat,
        }
        self.node.send_routed(key, "dht_put", payload,
                              PUT_OVERHEAD_BYTES + value_size)
        if on_done is not None:
            # acks are advisory; treat the insert as done unless it bounces
            self._watch_ack(key, on_done)

    def _watch_ack(self, key: int, on_done: Callable[[bool], None]) -> None:
        self._req_seq += 1
        ident = (self.node.id, self._req_seq)
        rec = {"kind": "put", "key": key, "cb": on_done, "attempts": 1, "handle": None}
        self._pending[ident] = rec

        def timeout() -> None:
            if self._pending.pop(ident, None) is not None:
                on_done(False)

        rec["handle"] = self.node.kernel.schedule(self.cfg.request_timeout_ms, timeout)
        rec["ident"] = ident

    def get(self, key: int, on_result: Callable[[Optional[List[Tuple]]], None]) -> None:
        """Fetch live entries under a key; the callback receives a list of
        (value, inserter, value_size), an empty list when the holder has
        nothing, or None when every attempt timed out."""
        self._req_seq += 1
        ident = (self.node.id, self._req_seq)
        rec = {"kind": "get", "key": key, "cb": on_result, "attempts": 0, "handle": None}
        self._pending[ident] = rec
        self._send_get(ident)

    def _send_get(self, ident: Tuple[int, int]) -> None:
        rec = self._pending.get(ident)
        if rec is None:
            return
        rec["attempts"] += 1
        payload = {"key": rec["key"], "req": ident,
                   "machine": self.node.machine, "nat": self.node.nat}
        self.node.send_routed(rec["key"], "dht_get", payload, GET_REQ_BYTES)

        def timeout() -> None:
            cur = self._pending.get(ident)
            if cur is not rec:
                return
            if rec["attempts"] >= self.cfg.max_attempts:
                del self._pending[ident]
                rec["cb"](None)
            else:
                self._send_get(ident)

        self.node.kernel.cancel(rec["handle"])
        rec["handle"] = self.node.kernel.schedule(self.cfg.request_timeout_ms, timeout)

    # ----------------------------------------------------------------- handlers

    def _on_put(self, msg: OverlayMessage) -> None:
        p = msg.payload
        now = self.node.now
        self.store.put(p["key"], p["value"], p["inserter"], now + p["ttl"], p["vsize"])
        self._push_replicas(p["key"])
        back = list(reversed(p["_route"]["path"]))
        if not back:
            return
        ack = {"key": p["key"], "holder": self.node.id}
        if p.get("machine") is not None and self.node.send_direct(
                p["inserter"], p["machine"], p.get("nat"), "dht_ack", ack, ACK_BYTES):
            return
        self.node.send_reverse(back, "dht_ack", ack, ACK_BYTES)

    def _on_ack(self, msg: OverlayMessage) -> None:
        key = msg.payload["key"]
        for ident in sorted(self._pending):
            rec = self._pending[ident]
            if rec["kind"] == "put" and rec["key"] == key:
                del self._pending[ident]
                self.node.kernel.cancel(rec["handle"])
                rec["cb"](True)
                break

    def _on_get(self, msg: OverlayMessage) -> None:
        p = msg.payload
        values = self.store.get(p["key"], self.node.now)
        size = REPLY_HEADER_BYTES + sum(v[2] for v in values)
        reply = {"key": p["key"], "req": p["req"], "values": values,
                 "holder": self.node.id}
        back = list(reversed(p["_route"]["path"]))
        if not back:
            if p["req"][0] == self.node.id:
                # local lookup: we are the responsible holder ourselves; the
                # callback still runs from a fresh event so callers never see
                # a get complete inside their own call stack
                req = tuple(p["req"])
                self.node.kernel.schedule(
                    0, lambda: self._complete_get(req, values))
            return
        # answer straight to the requester when NATs allow it; retrace the
        # request path only when a direct path is impossible
        requester = p["req"][0]
        if p.get("machine") is not None and self.node.send_direct(
                requester, p["machine"], p.get("nat"), "dht_rep", reply, size):
            return
        self.node.send_reverse(back, "dht_rep", reply, size)

    def _on_reply(self, msg: OverlayMessage) -> None:
        p = msg.payload
        self._complete_get(tuple(p["req"]), p["values"])

    def _complete_get(self, ident: Tuple[int, int], values: List[Tuple]) -> None:
        rec = self._pending.pop(ident, None)
        if rec is None:
            return
        self.node.kernel.cancel(rec["handle"])
        rec["cb"](list(values))

    def _on_push(self, msg: OverlayMessage) -> None:
        p = msg.payload
        for value, inserter, expiry, vsize in p["entries"]:
            self.store.put(p["key"], value, inserter, expiry, vsize)

    # -------------------------------------------------------------- maintenance

    def _ranked_holders(self, key: int) -> List[int]:
        """Self and established peers ordered by closeness to the key."""
        ids = [self.node.id] + self.node.established_peer_ids()
        return sorted(set(ids), key=lambda i: (ring_distance(i, key, self.node.space), i))

    def _push_entries(self, peer: int, key: int, entries: List[Tuple]) -> None:
        now = self.node.now
        send = []
        for value, inserter, expiry, vsize in entries:
            if expiry <= now:
                continue
            if self._pushed.get((peer, key, inserter, value), -1) >= expiry:
                continue
            send.append((value, inserter, expiry, vsize))
        if not send:
            return
        size = PUSH_HEADER_BYTES + sum(ENTRY_OVERHEAD_BYTES + e[3] for e in send)
        if self.node._send_link(peer, "dht_push", {"key": key, "entries": send}, size):
            for value, inserter, expiry, _vsize in send:
                self._pushed[(peer, key, inserter, value)] = expiry

    def _push_replicas(self, key: int) -> None:
        """Primary duty: copy the key's entries to the nearest established
        peer on each ring side."""
        entries = self.store.raw_entries(key)
        if not entries:
            return
        from .ring import clockwise_distance
        peers = self.node.established_peer_ids()
        if not peers:
            return
        space = self.node.space
        succ = min(peers, key=lambda p: (clockwise_distance(self.node.id, p, space), p))
        pred = min(peers, key=lambda p: (clockwise_distance(p, self.node.id, space), p))
        for peer in sorted({succ, pred}):
            self._push_entries(peer, key, entries)

    def _maintenance(self) -> None:
        if not self.node.alive:
            return
        now = self.node.now
        self.store.purge(now)
        for ck in [c for c, exp in self._pushed.items() if exp <= now]:
            del self._pushed[ck]
        for key in self.store.keys():
            ranked = self._ranked_holders(key)
            rank = ranked.index(self.node.id)
            if rank == 0:
                self._push_replicas(key)
            elif rank > 2 * self.cfg.replicas_per_side:
                # not a holder anymore: hand the entries to the closest node
                # and stop carrying them ourselves
                self._push_entries(ranked[0], key, self.store.raw_entries(key))
                self.store.entries.pop(key, None)
        self._maint_handle = self.node.kernel.schedule(self.cfg.period_ms, self._maintenance)
