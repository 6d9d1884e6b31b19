"""Deterministic discrete-event kernel and transport model.

The kernel owns the virtual clock (integer milliseconds), the event queue,
the pairwise latency model, NAT reachability classes, the link table and
per-machine bandwidth meters.  Event order is the total order
``(fire_time, sequence)`` so equal-time events run in scheduling order and
every run with the same seed replays byte for byte.

Machines are the transport endpoints (a simulated host).  Overlay node
instances attach to a machine under an ``(overlay_tag, node_id)`` address;
a link is registered per overlay between two node ids and carries the
machine path its traffic traverses (length 2 for a direct link, 3 for a
relayed one, longer for a routed fallback path).  Every leg of the path is
metered, so relay forwarding load lands on the relay's machine.
"""

from __future__ import annotations

import heapq
import random
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .util import pairwise

MS_PER_SECOND = 1000


# ---------------------------------------------------------------------------
# Latency model


class LatencyMatrix:
    """Pairwise RTTs between sites plus a machine-to-site assignment.

    ``rtt[i][j]`` is the round trip in milliseconds between sites i and j.
    One-way delay is ``rtt // 2`` (the clock is integral milliseconds).
    """

    def __init__(self, rtt: Sequence[Sequence[int]]):
        n = len(rtt)
        if n == 0:
            raise ValueError("latency matrix has no sites")
        for row in rtt:
            if len(row) != n:
                raise ValueError("latency matrix is ragged")
            for v in row:
                if not isinstance(v, int) or v < 0:
                    raise ValueError(f"latency values must be non-negative ints, got {v!r}")
        self.rtt: List[List[int]] = [list(row) for row in rtt]
        self.n_sites = n
        self.site_of: Dict[int, int] = {}

    def assign_sites(self, machines: Iterable[int], rng: random.Random) -> None:
        """Seeded uniform site assignment, reusing sites when machines
        outnumber them."""
        for m in machines:
            self.site_of[m] = rng.randrange(self.n_sites)

    def rtt_between(self, machine_a: int, machine_b: int) -> int:
        return self.rtt[self.site_of[machine_a]][self.site_of[machine_b]]

    def one_way(self, machine_a: int, machine_b: int) -> int:
        return self.rtt_between(machine_a, machine_b) // 2


def synthetic_latency(n_sites: int, min_ms: int, max_ms: int, seed: int) -> LatencyMatrix:
    """Uniform random symmetric RTT matrix with a zero diagonal."""
    if n_sites < 1:
        raise ValueError("n_sites must be >= 1")
    if min_ms < 0 or max_ms < min_ms:
        raise ValueError("need 0 <= min_ms <= max_ms")
    rng = random.Random(seed)
    rtt = [[0] * n_sites for _ in range(n_sites)]
    for i in range(n_sites):
        for j in range(i + 1, n_sites):
            v = rng.randint(min_ms, max_ms)
            rtt[i][j] = v
            rtt[j][i] = v
    return LatencyMatrix(rtt)


def load_latency_file(path) -> LatencyMatrix:
    """Parse a latency matrix file.

    Format: first non-empty line is the site count N, followed by N lines of
    N whitespace-separated integer RTTs in milliseconds.  Ragged rows and
    negative values are rejected.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty latency file")
    try:
        n = int(lines[0])
    except ValueError:
        raise ValueError(f"{path}: first line must be the site count") from None
    if n < 1:
        raise ValueError(f"{path}: site count must be >= 1")
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: expected {n} matrix rows, found {len(lines) - 1}")
    rtt = []
    for ln in lines[1:]:
        row = [int(tok) for tok in ln.split()]
        rtt.append(row)
    return LatencyMatrix(rtt)  # shape and sign checks live in the constructor


# ---------------------------------------------------------------------------
# NAT reachability


class NatClass(Enum):
    PUBLIC = "public"
    CONE = "cone"
    SYMMETRIC = "symmetric"


DEFAULT_NAT_FRACTIONS: Tuple[float, float, float] = (0.65, 0.29, 0.06)


def can_connect_directly(a: NatClass, b: NatClass) -> bool:
    """True iff two endpoints can form a direct transport link.

    At least one public endpoint always works; two cone NATs can traverse;
    any pairing involving a symmetric NAT without a public side cannot.
    Symmetric in its arguments.
    """
    if a is NatClass.PUBLIC or b is NatClass.PUBLIC:
        return True
    return a is NatClass.CONE and b is NatClass.CONE


def assign_nat_profiles(
    machines: Sequence[int],
    fractions: Tuple[float, float, float] = DEFAULT_NAT_FRACTIONS,
    seed: int = 0,
) -> Dict[int, NatClass]:
    """Seeded draw of NAT classes, (public, cone, symmetric) fractions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = random.Random(seed)
    cut_public = fractions[0]
    cut_cone = fractions[0] + fractions[1]
    out: Dict[int, NatClass] = {}
    for m in machines:
        u = rng.random()
        if u < cut_public:
            out[m] = NatClass.PUBLIC
        elif u < cut_cone:
            out[m] = NatClass.CONE
        else:
            out[m] = NatClass.SYMMETRIC
    return out


# ---------------------------------------------------------------------------
# Bandwidth accounting


class BandwidthMeter:
    """Per-machine byte counters, cumulative and per time window."""

    def __init__(self, window_ms: int = 60_000):
        self.window_ms = window_ms
        self.sent: Dict[int, int] = defaultdict(int)
        self.received: Dict[int, int] = defaultdict(int)
        # (machine, window index) -> [sent, received]
        self._windows: Dict[Tuple[int, int], List[int]] = {}

    def add_sent(self, machine: int, nbytes: int, at_ms: int) -> None:
        self.sent[machine] += nbytes
        w = self._windows.setdefault((machine, at_ms // self.window_ms), [0, 0])
        w[0] += nbytes

    def add_received(self, machine: int, nbytes: int, at_ms: int) -> None:
        self.received[machine] += nbytes
        w = self._windows.setdefault((machine, at_ms // self.window_ms), [0, 0])
        w[1] += nbytes

    def bytes_between(self, machine: int, t0_ms: int, t1_ms: int) -> Tuple[int, int]:
        """Summed (sent, received) for windows starting in ``[t0, t1)``.

        Callers align t0/t1 to window boundaries for exact accounting.
        """
        sent = recv = 0
        for w in range(t0_ms // self.window_ms, max(t0_ms // self.window_ms, t1_ms // self.window_ms)):
            rec = self._windows.get((machine, w))
            if rec:
                sent += rec[0]
                recv += rec[1]
        return sent, recv

    def total_sent(self) -> int:
        return sum(self.sent.values())

    def total_received(self) -> int:
        return sum(self.received.values())


# ---------------------------------------------------------------------------
# Messages, events, kernel


@dataclass(slots=True)
class OverlayMessage:
    """Unit of transmission and bandwidth accounting.

    ``source`` and ``destination`` are end-to-end overlay addresses (the
    destination may be a key rather than a live node id).  ``size_bytes`` is
    what the meters charge; ``payload`` is opaque bookkeeping and costs
    nothing beyond the declared size.
    """

    source: int
    destination: int
    kind: str
    size_bytes: int
    overlay: str
    payload: dict = field(default_factory=dict)


class EventHandle:
    __slots__ = ("fire_time", "seq", "action", "cancelled")

    def __init__(self, fire_time: int, seq: int, action: Callable[[], None]):
        self.fire_time = fire_time
        self.seq = seq
        self.action = action
        self.cancelled = False


class SimKernel:
    """Event queue, clock, transport and meters for one simulation."""

    def __init__(self, latency: LatencyMatrix, seed: int = 0, meter_window_ms: int = 60_000):
        self.latency = latency
        self.seed = seed
        self.now = 0
        self._heap: List[Tuple[int, int, EventHandle]] = []
        self._seq = 0
        self.meter = BandwidthMeter(meter_window_ms)
        self.drop_count = 0
        self.dropped_bytes = 0
        self.delivered_count = 0
        # (tag, node_id) -> (machine, callback(msg, prev_hop_node))
        self._endpoints: Dict[Tuple[str, int], Tuple[int, Callable]] = {}
        # (tag, lo, hi) -> machine path from lo-endpoint to hi-endpoint
        self._links: Dict[Tuple[str, int, int], Tuple[int, ...]] = {}

    # -- events -----------------------------------------------------------

    def schedule(self, delay_ms: int, action: Callable[[], None]) -> EventHandle:
        if delay_ms < 0:
            raise ValueError(f"cannot schedule into the past (delay {delay_ms})")
        self._seq += 1
        h = EventHandle(self.now + int(delay_ms), self._seq, action)
        heapq.heappush(self._heap, (h.fire_time, h.seq, h))
        return h

    def cancel(self, handle: Optional[EventHandle]) -> None:
        if handle is not None:
            handle.cancelled = True

    def run_until(self, t_end_ms: int) -> int:
        """Execute all events with fire time <= t_end, leave clock at t_end."""
        executed = 0
        heap = self._heap
        while heap:
            fire, _, h = heap[0]
            if fire > t_end_ms:
                break
            heapq.heappop(heap)
            if h.cancelled:
                continue
            self.now = fire
            h.action()
            executed += 1
        if t_end_ms > self.now:
            self.now = t_end_ms
        return executed

    def run_for(self, duration_ms: int) -> int:
        return self.run_until(self.now + duration_ms)

    def pending_events(self) -> int:
        return sum(1 for _, _, h in self._heap if not h.cancelled)

    # -- endpoints and links ----------------------------------------------

    def attach(self, tag: str, node_id: int, machine: int, on_message: Callable) -> None:
        self._endpoints[(tag, node_id)] = (machine, on_message)

    def detach(self, tag: str, node_id: int) -> None:
        self._endpoints.pop((tag, node_id), None)

    def machine_of(self, tag: str, node_id: int) -> Optional[int]:
        ep = self._endpoints.get((tag, node_id))
        return ep[0] if ep else None

    @staticmethod
    def _link_key(tag: str, a: int, b: int) -> Tuple[str, int, int]:
        return (tag, a, b) if a <= b else (tag, b, a)

    def add_link(self, tag: str, a: int, b: int, machine_path: Sequence[int]) -> None:
        """Register a link whose traffic follows ``machine_path`` (given from
        the lower node id's side).  Re-registering an existing link keeps the
        first path so racing initiators converge on one link."""
        if len(machine_path) < 2:
            raise ValueError("machine path needs at least two hops")
        key = self._link_key(tag, a, b)
        if key in self._links:
            return
        path = tuple(machine_path)
        if a > b:
            path = tuple(reversed(path))
        self._links[key] = path

    def remove_link(self, tag: str, a: int, b: int) -> None:
        self._links.pop(self._link_key(tag, a, b), None)

    def has_link(self, tag: str, a: int, b: int) -> bool:
        return self._link_key(tag, a, b) in self._links

    def link_latency(self, tag: str, a: int, b: int) -> Optional[int]:
        path = self._links.get(self._link_key(tag, a, b))
        if path is None:
            return None
        return sum(self.latency.one_way(m1, m2) for m1, m2 in pairwise(list(path)))

    def link_count(self, tag: Optional[str] = None) -> int:
        if tag is None:
            return len(self._links)
        return sum(1 for k in self._links if k[0] == tag)

    # -- transmission -------------------------------------------------------

    def transmit(self, src: int, dst: int, msg: OverlayMessage) -> bool:
        """Send one message over the registered (overlay, src, dst) link.

        Charges every machine leg of the link path at the moment the bytes
        traverse it.  Returns False (and counts a drop) when the link does
        not exist.  Delivery re-checks the destination endpoint: bytes in
        flight to a crashed node are dropped on arrival, and the sender gets
        a reset notice one path delay later (the host machine is still up,
        so the dead process is announced, like a transport-level reset).
        """
        tag = msg.overlay
        key = self._link_key(tag, src, dst)
        path = self._links.get(key)
        if path is None:
            self.drop_count += 1
            self.dropped_bytes += msg.size_bytes
            return False
        if src > dst:
            path = tuple(reversed(path))
        return self._transmit_over(tag, src, dst, path, msg)

    def transmit_path(self, src: int, dst: int, machine_path: Sequence[int],
                      msg: OverlayMessage) -> bool:
        """One-shot transmission over an explicit machine path, without a
        registered link (direct replies to transient requests)."""
        if len(machine_path) < 2:
            raise ValueError("machine path needs at least two hops")
        return self._transmit_over(msg.overlay, src, dst, tuple(machine_path), msg)

    def _transmit_over(self, tag: str, src: int, dst: int,
                       path: Tuple[int, ...], msg: OverlayMessage) -> bool:
        size = msg.size_bytes
        t = self.now
        legs = list(pairwise(list(path)))
        for m1, m2 in legs[:-1]:
            self.meter.add_sent(m1, size, t)
            t += self.latency.one_way(m1, m2)
            self.meter.add_received(m2, size, t)
        m1, m2 = legs[-1]
        self.meter.add_sent(m1, size, t)
        arrival = t + self.latency.one_way(m1, m2)

        def deliver() -> None:
            ep = self._endpoints.get((tag, dst))
            if ep is None:
                self.drop_count += 1
                self.dropped_bytes += size
                back = sum(self.latency.one_way(m1, m2) for m1, m2 in legs)
                bounce = OverlayMessage(dst, src, "_bounce", 0, tag,
                                        {"failed": dst, "orig": msg})

                def report() -> None:
                    src_ep = self._endpoints.get((tag, src))
                    if src_ep is not None:
                        src_ep[1](bounce, dst)

                self.schedule(back, report)
                return
            self.meter.add_received(ep[0], size, self.now)
            self.delivered_count += 1
            ep[1](msg, src)

        self.schedule(arrival - self.now, deliver)
        return True
