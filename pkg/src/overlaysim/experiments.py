"""Experiment drivers: world construction, crawls, and the four measured
scenarios (single join, mass join, steady-state bandwidth, revocation) plus
the analytical model sweep and a scripted partition-healing run.

Every run is deterministic for a given configuration: one seeded kernel per
world, derived seeds per component, and CSV rows formatted explicitly so a
re-run reproduces output files byte for byte.
"""

from __future__ import annotations

import csv
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .config import ExperimentConfig
from .dht import DhtConfig, DhtService
from .kernel import LatencyMatrix, NatClass, SimKernel, DEFAULT_NAT_FRACTIONS
from .modeler import build_model, estimate_join
from .node import LinkKind, NodeConfig, Overlay
from .private_overlay import (
    GroupConfig,
    PairedNode,
    PrivateGroup,
    QueryMode,
    next_query_delay,
)
from .ring import AddressSpace, clockwise_distance
from .security import GroupCA, Policy
from .util import derive_seed

MINUTE_MS = 60_000

CSV_HEADERS = {
    "single-join": ("repetition", "public_join_ms", "private_join_ms"),
    "mass-join": ("private_size", "completion_ms"),
    "bandwidth": ("node_class", "window_start", "bytes_per_s"),
    "revoke": ("method", "private_size", "delay_ms", "bytes_total", "reached_fraction"),
    "model": ("private_size", "repetition", "public_join_ms", "private_join_ms"),
}


# ---------------------------------------------------------------------------
# Crawls


@dataclass
class CrawlReport:
    """Successor-walk over an overlay's established links."""

    order: List[int]
    cycle: bool
    visited: int
    missing: List[int]


def crawl(overlay: Overlay) -> CrawlReport:
    """Walk clockwise from the lowest id following each node's closest
    established successor; a healthy overlay yields one cycle covering
    every live node."""
    ids = overlay.live_ids()
    if not ids:
        return CrawlReport([], True, 0, [])
    start = ids[0]
    order = [start]
    cur = start
    for _ in range(len(ids)):
        node = overlay.nodes.get(cur)
        if node is None:
            break   # stale link to a departed node; not a cycle
        est = node.established_peer_ids()
        if not est:
            break
        cur = min(est, key=lambda p: (clockwise_distance(node.id, p, overlay.space), p))
        order.append(cur)
        if cur == start:
            break
    visited = set(order)
    cycle = (cur == start and len(order) == len(ids) + 1 and visited == set(ids))
    if len(ids) == 1:
        cycle = True
    return CrawlReport(order, cycle, len(visited), sorted(set(ids) - visited))


def subring_connected(overlay: Overlay, subset: Sequence[int]) -> bool:
    """True when, within the given id subset, every member holds established
    links to its subset successor and predecessor (partition scripts)."""
    members = sorted(i for i in subset if i in overlay.nodes)
    if len(members) != len(subset) or not members:
        return False
    if len(members) == 1:
        return True
    n = len(members)
    for pos, nid in enumerate(members):
        node = overlay.nodes[nid]
        succ = members[(pos + 1) % n]
        pred = members[(pos - 1) % n]
        if not (node.link_established(succ) and node.link_established(pred)):
            return False
    return True


# ---------------------------------------------------------------------------
# World


class World:
    """One simulation universe: kernel, machines with NAT profiles, the
    public overlay with a DHT service per node, and private groups."""

    def __init__(
        self,
        latency: LatencyMatrix,
        seed: int,
        node_config: Optional[NodeConfig] = None,
        dht_config: Optional[DhtConfig] = None,
        nat_fractions: Tuple[float, float, float] = DEFAULT_NAT_FRACTIONS,
        bits: int = 160,
    ):
        self.kernel = SimKernel(latency, seed)
        self.latency = latency
        self.seed = seed
        self.node_config = node_config or NodeConfig()
        self.dht_config = dht_config or DhtConfig()
        self.nat_fractions = nat_fractions
        self.space = AddressSpace(bits)
        self.public = Overlay(
            self.kernel, "pub", self.space, self.node_config,
            secured=False, seed=derive_seed(seed, "pub"), n_estimate=1,
        )
        self.dht_services: Dict[int, DhtService] = {}
        self.groups: Dict[str, PrivateGroup] = {}
        self.machine_nat: Dict[int, NatClass] = {}
        self._next_machine = 0
        self._nat_rng = random.Random(derive_seed(seed, "nat"))
        self._site_rng = random.Random(derive_seed(seed, "sites"))
        self._id_rng = random.Random(derive_seed(seed, "ids"))
        self.seed_info: Optional[dict] = None

    # -- machines -----------------------------------------------------------

    def _draw_nat(self) -> NatClass:
        u = self._nat_rng.random()
        pub, cone, _ = self.nat_fractions
        if u < pub:
            return NatClass.PUBLIC
        if u < pub + cone:
            return NatClass.CONE
        return NatClass.SYMMETRIC

    def new_machine(self, nat: Optional[NatClass] = None) -> int:
        m = self._next_machine
        self._next_machine += 1
        self.latency.assign_sites([m], self._site_rng)
        self.machine_nat[m] = nat or self._draw_nat()
        return m

    def _fresh_public_id(self) -> int:
        while True:
            cand = self.space.random_id(self._id_rng)
            if cand not in self.public.nodes:
                return cand

    # -- public overlay -----------------------------------------------------

    def attach_public(self, pub_id: int, machine: int, nat: NatClass,
                      bootstrap: Sequence[dict]):
        node = self.public.add_node(pub_id, machine, nat, bootstrap=bootstrap)
        svc = DhtService(node, self.dht_config)
        self.dht_services[pub_id] = svc
        return node, svc

    def detach_public(self, pub_id: int, crash: bool = False) -> None:
        svc = self.dht_services.pop(pub_id, None)
        if svc is not None:
            svc.stop()
        if crash:
            self.public.remove_node(pub_id)
        else:
            self.public.graceful_leave(pub_id)

    def build_public(self, n: int, stagger_ms: int = 50,
                     deadline_ms: int = 900_000) -> int:
        """Stand up an n-node public overlay around one well-known entry
        node; returns the time when it is fully formed."""
        if self.seed_info is not None:
            raise RuntimeError("public overlay already built")
        self.public.n_estimate = n
        machine = self.new_machine(NatClass.PUBLIC)  # the entry host answers everyone
        pub_id = self._fresh_public_id()
        self.seed_info = {"id": pub_id, "machine": machine, "nat": NatClass.PUBLIC}
        self.attach_public(pub_id, machine, NatClass.PUBLIC, bootstrap=())
        plan = [(self._fresh_public_id(), self.new_machine()) for _ in range(n - 1)]
        for i, (pid, m) in enumerate(plan):
            def make(pid=pid, m=m):
                self.attach_public(pid, m, self.machine_nat[m],
                                   bootstrap=[dict(self.seed_info)])
            self.kernel.schedule((i + 1) * stagger_ms, make)
        formed = self.poll(
            lambda: (len(self.public.nodes) == n and self.public.all_connected()
                     and crawl(self.public).cycle),
            2_000, deadline_ms,
        )
        if formed is None:
            raise RuntimeError(f"public overlay of {n} failed to form")
        return formed

    # -- groups ---------------------------------------------------------------

    def make_group(self, name: str, secured: bool, timer: str = "dynamic",
                   group_config: Optional[GroupConfig] = None) -> PrivateGroup:
        cfg = group_config or GroupConfig()
        cfg.secured = secured
        cfg.query_mode = QueryMode(timer)
        ca = None
        if secured:
            ca = GroupCA(name, Policy.AUTO_SIGN, seed=derive_seed(self.seed, "ca", name))
        group = PrivateGroup(
            self.kernel, name, self.public,
            self.attach_public, self.detach_public,
            AddressSpace(self.space.bits), self.node_config,
            config=cfg, ca=ca, seed=derive_seed(self.seed, "grp", name),
        )
        self.groups[name] = group
        return group

    def add_group_member(self, group: PrivateGroup, start: bool = True,
                         advertise: bool = True, query: bool = True) -> PairedNode:
        if self.seed_info is None:
            raise RuntimeError("build the public overlay first")
        machine = self.new_machine()
        user = f"user{len(group.members) + 1:04d}"
        member = group.enroll_member(user, machine, self.machine_nat[machine])
        if start:
            member.start([dict(self.seed_info)], advertise=advertise, query=query)
        return member

    # -- time helpers ---------------------------------------------------------

    def poll(self, cond: Callable[[], bool], interval_ms: int,
             deadline_ms: int) -> Optional[int]:
        """Run the kernel until the condition holds, checking every interval;
        returns the time of the first successful check, or None."""
        deadline = self.kernel.now + deadline_ms
        if cond():
            return self.kernel.now
        while self.kernel.now < deadline:
            self.kernel.run_for(min(interval_ms, deadline - self.kernel.now))
            if cond():
                return self.kernel.now
        return None

    def group_formed(self, group: PrivateGroup, expected: int) -> bool:
        priv = group.private_overlay
        return (len(priv.nodes) == expected
                and self.public.all_connected()
                and priv.all_connected()
                and crawl(priv).cycle)


# ---------------------------------------------------------------------------
# Single join


@dataclass
class SingleJoinResult:
    rows: List[Tuple]
    flagged: List[int]
    median_public_ms: float
    median_private_ms: float
    group_size: int
    secured: bool


def run_single_join(cfg: ExperimentConfig) -> SingleJoinResult:
    """Repeatedly join one fresh member to a settled group and time the
    public and private phases; each joiner leaves before the next starts."""
    size = cfg.single_private_size()
    world = World(cfg.latency(), cfg.seed)
    world.build_public(cfg.public_size)
    group = world.make_group("g0", cfg.security, cfg.timer)
    group.set_expected_size(size + 1)
    for _ in range(size):
        world.add_group_member(group)
    formed = world.poll(lambda: world.group_formed(group, size), 2_000, 1_800_000)
    if formed is None:
        raise RuntimeError(f"group of {size} failed to form")
    world.kernel.run_for(MINUTE_MS)

    rows: List[Tuple] = []
    flagged: List[int] = []
    for rep in range(cfg.reps):
        joiner = world.add_group_member(group)
        t0 = world.kernel.now
        done = world.poll(lambda: joiner.private_connected_ms is not None,
                          1_000, 300_000)
        if done is None:
            flagged.append(rep)
            rows.append((rep, -1, -1))
        else:
            rows.append((
                rep,
                joiner.public_connected_ms - t0,
                joiner.private_connected_ms - t0,
            ))
        joiner.leave()
        world.kernel.run_for(20_000)

    ok_pub = [r[1] for r in rows if r[1] >= 0]
    ok_priv = [r[2] for r in rows if r[2] >= 0]
    return SingleJoinResult(
        rows=rows,
        flagged=flagged,
        median_public_ms=statistics.median(ok_pub) if ok_pub else float("nan"),
        median_private_ms=statistics.median(ok_priv) if ok_priv else float("nan"),
        group_size=size,
        secured=cfg.security,
    )


# ---------------------------------------------------------------------------
# Mass join


@dataclass
class MassJoinResult:
    rows: List[Tuple]
    flagged: List[Tuple[int, int]]
    completion_ms: Dict[Tuple[int, int], int]
    crawl_ok: Dict[Tuple[int, int], bool]


def run_mass_join(cfg: ExperimentConfig) -> MassJoinResult:
    """Start every pair of one group simultaneously on a formed public
    overlay and measure the time until both overlays are well-formed
    (checked every two seconds)."""
    rows: List[Tuple] = []
    flagged: List[Tuple[int, int]] = []
    completion: Dict[Tuple[int, int], int] = {}
    crawl_ok: Dict[Tuple[int, int], bool] = {}
    for size in cfg.private_sizes:
        for rep in range(cfg.reps):
            world = World(cfg.latency(), derive_seed(cfg.seed, "mass", size, rep))
            world.build_public(cfg.public_size)
            world.kernel.run_for(30_000)
            group = world.make_group("g0", cfg.security, cfg.timer)
            group.set_expected_size(size)
            t0 = world.kernel.now
            for _ in range(size):
                world.add_group_member(group)
            done = world.poll(lambda: world.group_formed(group, size),
                              2_000, 1_800_000)
            if done is None:
                flagged.append((size, rep))
                rows.append((size, -1))
                continue
            completion[(size, rep)] = done - t0
            both = crawl(world.public).cycle and crawl(group.private_overlay).cycle
            crawl_ok[(size, rep)] = both
            rows.append((size, done - t0))
    return MassJoinResult(rows, flagged, completion, crawl_ok)


# ---------------------------------------------------------------------------
# Bandwidth


@dataclass
class BandwidthResult:
    rows: List[Tuple]
    query_counts: Dict[int, int]
    mean_member_bps: float
    mean_public_bps: float
    window_start_ms: int
    window_end_ms: int
    timer: str
    group_size: int


def run_bandwidth(cfg: ExperimentConfig) -> BandwidthResult:
    """Form a group, settle, then meter one steady-state measurement window,
    reporting per-window bandwidth per machine class and the exact number of
    discovery queries each member issued inside the window."""
    size = cfg.single_private_size()
    world = World(cfg.latency(), cfg.seed)
    world.build_public(cfg.public_size)
    world.kernel.run_for(30_000)
    group = world.make_group("g0", cfg.security, cfg.timer)
    group.set_expected_size(size)
    for _ in range(size):
        world.add_group_member(group)
    formed = world.poll(lambda: world.group_formed(group, size), 2_000, 1_800_000)
    if formed is None:
        raise RuntimeError(f"group of {size} failed to form")
    world.kernel.run_for(cfg.settle_minutes * MINUTE_MS)

    meter = world.kernel.meter
    win = meter.window_ms
    t0 = ((world.kernel.now + win - 1) // win) * win
    world.kernel.run_until(t0)
    t1 = t0 + cfg.measure_minutes * MINUTE_MS
    world.kernel.run_until(t1)

    members = group.live_members()
    member_machines = sorted({m.machine for m in members})
    public_machines = sorted(set(world.machine_nat) - set(member_machines))
    seconds = win / 1000.0

    rows: List[Tuple] = []
    for w_start in range(t0, t1, win):
        for node_class, machines in (("member", member_machines),
                                     ("public", public_machines)):
            if not machines:
                continue
            total = 0
            for m in machines:
                sent, recv = meter.bytes_between(m, w_start, w_start + win)
                total += sent + recv
            bps = total / len(machines) / seconds
            rows.append((node_class, w_start, f"{bps:.3f}"))

    def machine_bps(machines: Sequence[int]) -> float:
        if not machines:
            return 0.0
        span = (t1 - t0) / 1000.0
        total = 0
        for m in machines:
            sent, recv = meter.bytes_between(m, t0, t1)
            total += sent + recv
        return total / len(machines) / span

    query_counts = {
        m.priv_id: sum(1 for t in m.query_times if t0 <= t < t1) for m in members
    }
    return BandwidthResult(
        rows=rows,
        query_counts=query_counts,
        mean_member_bps=machine_bps(member_machines),
        mean_public_bps=machine_bps(public_machines),
        window_start_ms=t0,
        window_end_ms=t1,
        timer=cfg.timer,
        group_size=size,
    )


# ---------------------------------------------------------------------------
# Revocation


@dataclass
class RevocationOutcome:
    method: str
    size: int
    delay_ms: int
    bytes_total: int
    reached: int
    reached_fraction: float
    sweep_attempts: int
    sweep_established: int
    sweep_rejections: int
    revocation_lines: List[str] = field(default_factory=list)


@dataclass
class RevocationResult:
    rows: List[Tuple]
    outcomes: List[RevocationOutcome]


def run_revocation(cfg: ExperimentConfig, methods: Optional[Sequence[str]] = None) -> RevocationResult:
    """Revoke one member of a settled secured group and measure notice
    dissemination, then verify the revoked user cannot reconnect anywhere.

    The group is always secured here: revocation is only meaningful with the
    group PKI active.  Traffic is counted at the protocol level (each
    message once), so the two methods compare on equal footing.
    """
    methods = list(methods) if methods else [cfg.method]
    rows: List[Tuple] = []
    outcomes: List[RevocationOutcome] = []
    for size in cfg.private_sizes:
        for method in methods:
            outcome = _revocation_run(cfg, size, method)
            outcomes.append(outcome)
            rows.append((
                method, size, outcome.delay_ms, outcome.bytes_total,
                f"{outcome.reached_fraction:.4f}",
            ))
    return RevocationResult(rows, outcomes)


def _revocation_run(cfg: ExperimentConfig, size: int, method: str) -> RevocationOutcome:
    world = World(cfg.latency(), derive_seed(cfg.seed, "rev", size, method))
    world.build_public(cfg.public_size)
    world.kernel.run_for(30_000)
    group = world.make_group("g0", secured=True, timer=cfg.timer)
    group.set_expected_size(size)
    for _ in range(size):
        world.add_group_member(group)
    formed = world.poll(lambda: world.group_formed(group, size), 2_000, 1_800_000)
    if formed is None:
        raise RuntimeError(f"secured group of {size} failed to form")
    world.kernel.run_for(2 * MINUTE_MS)
    world.kernel.run_for(30_000)  # quiet window before the revocation

    members = group.live_members()
    agent, revoked = members[0], members[-1]
    t_rev = world.kernel.now

    if method == "broadcast":
        trace = group.revoke_via_broadcast(agent, revoked.user)
        world.kernel.run_for(30_000)
        times = [t for t, _ in trace.deliveries.values()]
        delay = (max(times) - trace.started_at) if times else 0
        reached = len(trace.deliveries)
        bytes_total = trace.bytes_sent
    elif method == "dht":
        record = group.revoke_via_dht(agent, revoked.user)
        world.kernel.run_for(30_000)
        applied = [(t, node) for t, node, user in group.notice_log
                   if user == revoked.user]
        if applied:
            delay = max(t for t, _ in applied) - t_rev
        elif record["done_ms"] is not None:
            delay = record["done_ms"] - t_rev
        else:
            delay = -1
        reached = len({node for _, node in applied})
        bytes_total = record["bytes_logical"]
    else:
        raise ValueError(f"unknown revocation method {method!r}")

    denom = max(1, size - 1)
    fraction = reached / denom

    # the revoked member now tries every other member; nobody may accept
    reject_before = group.private_overlay.counters.get("reject:revoked_user", 0)
    attempts = 0
    rev_node = revoked.private_node
    for m in members:
        if m is revoked or rev_node is None:
            continue
        rev_node.open_link(m.priv_id, m.machine, m.nat, LinkKind.NEIGHBOR,
                           peer_pub_id=m.pub_id)
        attempts += 1
    world.kernel.run_for(30_000)
    established = len(rev_node.established_peer_ids()) if rev_node else 0
    rejections = group.private_overlay.counters.get("reject:revoked_user", 0) - reject_before

    return RevocationOutcome(
        method=method, size=size, delay_ms=delay, bytes_total=bytes_total,
        reached=reached, reached_fraction=fraction,
        sweep_attempts=attempts, sweep_established=established,
        sweep_rejections=rejections,
        revocation_lines=group.ca.revocation_list_lines() if group.ca else [],
    )


# ---------------------------------------------------------------------------
# Partition healing


def run_partition_heal(seed: int = 1, public_size: int = 100,
                       half_size: int = 16,
                       latency: Optional[LatencyMatrix] = None) -> dict:
    """Scripted split-brain: two halves of one group form separate rings
    (the second half bootstraps from an injected candidate list with
    discovery disabled), then discovery is enabled everywhere at once.
    Healing must finish within the first two dynamic query periods."""
    from .kernel import synthetic_latency

    if latency is None:
        latency = synthetic_latency(64, 100, 100, derive_seed(seed, "latency"))
    world = World(latency, seed)
    world.build_public(public_size)
    group = world.make_group("g0", secured=False, timer="dynamic")
    group.set_expected_size(2 * half_size)

    half_a = [world.add_group_member(group) for _ in range(half_size)]
    ids_a = [m.priv_id for m in half_a]
    formed_a = world.poll(
        lambda: (len(group.private_overlay.nodes) == half_size
                 and subring_connected(group.private_overlay, ids_a)),
        2_000, 900_000,
    )
    if formed_a is None:
        raise RuntimeError("first half failed to form")
    for m in half_a:
        m.pause_queries()

    half_b = [world.add_group_member(group, advertise=False, query=False)
              for _ in range(half_size)]
    ids_b = [m.priv_id for m in half_b]
    ready_b = world.poll(
        lambda: all(m.public_connected_ms is not None for m in half_b),
        1_000, 300_000,
    )
    if ready_b is None:
        raise RuntimeError("second half failed to reach the public overlay")
    cands = [{"id": m.priv_id, "machine": m.machine, "nat": m.nat, "pub": m.pub_id}
             for m in half_b]
    for m in half_b:
        m.force_start_private([c for c in cands if c["id"] != m.priv_id])
    formed_b = world.poll(
        lambda: subring_connected(group.private_overlay, ids_b),
        2_000, 900_000,
    )
    if formed_b is None:
        raise RuntimeError("second half failed to form its ring")
    world.kernel.run_for(30_000)

    # merge: everyone advertises again and discovery resumes on its normal
    # period, so healing must come from the scheduled queries alone
    t_merge = world.kernel.now
    for m in half_b:
        m.begin_advertising()
    for m in half_a + half_b:
        m.begin_queries(reset=True, immediate=False)
    deadline = next_query_delay(QueryMode.DYNAMIC, 0) + next_query_delay(QueryMode.DYNAMIC, 1)
    healed = world.poll(
        lambda: (group.private_overlay.all_connected()
                 and crawl(group.private_overlay).cycle),
        1_000, deadline,
    )
    report = crawl(group.private_overlay)
    return {
        "healed_ms": (healed - t_merge) if healed is not None else None,
        "deadline_ms": deadline,
        "ok": healed is not None and report.cycle,
        "members": 2 * half_size,
        "crawl_visited": report.visited,
    }


# ---------------------------------------------------------------------------
# Model sweep


@dataclass
class ModelResult:
    rows: List[Tuple]
    median_total_ms: Dict[int, float]


def run_model(cfg: ExperimentConfig) -> ModelResult:
    """Analytical join estimates over the configured sizes, one sampled
    joiner per repetition."""
    latency = cfg.latency()
    public_model = build_model(cfg.public_size, latency=latency,
                               seed=derive_seed(cfg.seed, "model-pub"))
    rows: List[Tuple] = []
    medians: Dict[int, float] = {}
    for size in cfg.private_sizes:
        priv_model = build_model(size, latency=latency,
                                 seed=derive_seed(cfg.seed, "model-priv", size))
        # every size sees the same joiner draws (site, addresses, entry
        # quantile, key), so size-to-size differences come from the
        # topology, not from sampling luck
        rng = random.Random(derive_seed(cfg.seed, "model-reps"))
        totals = []
        for rep in range(cfg.reps):
            site = rng.randrange(latency.n_sites)
            pub_addr = public_model.space.random_id(rng)
            priv_addr = priv_model.space.random_id(rng)
            entry = public_model.ids[int(rng.random() * len(public_model.ids))]
            boot = priv_model.ids[int(rng.random() * len(priv_model.ids))]
            key_addr = public_model.space.random_id(rng)
            est = estimate_join(public_model, priv_model, site, cfg.security,
                                pub_addr, priv_addr, entry=entry,
                                private_entry=boot, key_addr=key_addr)
            rows.append((size, rep, est.public_ms, est.total_ms))
            totals.append(est.total_ms)
        medians[size] = statistics.median(totals)
    return ModelResult(rows, medians)


# ---------------------------------------------------------------------------
# CSV output


def write_csv(path: Path, experiment: str, rows: Iterable[Sequence],
              digest: Optional[str] = None) -> Path:
    """Write experiment rows under the fixed schema; when a config digest is
    given every row carries it as the trailing provenance column."""
    header = CSV_HEADERS[experiment]
    if digest is not None:
        header = header + ("config",)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(tuple(row) + (digest,) if digest is not None else row)
    return path


def write_config_echo(path: Path, cfg: ExperimentConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in cfg.canonical_items()]
    lines.append(f"digest={cfg.digest()}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_query_counts(path: Path, counts: Dict[int, int],
                       digest: Optional[str] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ("node_id", "queries")
    if digest is not None:
        header = header + ("config",)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for node_id in sorted(counts):
            row = (node_id, counts[node_id])
            w.writerow(row + (digest,) if digest is not None else row)
    return path
