"""Bounded broadcast over the ring: recursive responsibility-range splitting.

A node responsible for a ring arc delivers the payload to itself, then
splits the rest of the arc among its in-arc connections, ordered clockwise:
each child takes the sub-arc from itself up to the next child, the last
child inherits the arc's end.  Every reachable node receives the payload
exactly once, costing one message per node reached beyond the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple

from .ring import AddressSpace, RingRange, clockwise_distance


@dataclass
class BroadcastTrace:
    """Accumulated record of one broadcast run inside the simulator."""

    trace_id: int
    origin: int
    started_at: int
    deliveries: Dict[int, Tuple[int, int]] = field(default_factory=dict)  # node -> (ms, depth)
    messages: int = 0
    bytes_sent: int = 0
    violations: List[str] = field(default_factory=list)

    def record_delivery(self, node: int, time_ms: int, depth: int) -> None:
        if node in self.deliveries:
            self.violations.append(f"duplicate delivery at {node}")
            return
        self.deliveries[node] = (time_ms, depth)

    def record_message(self, size_bytes: int) -> None:
        self.messages += 1
        self.bytes_sent += size_bytes

    def reached(self) -> Set[int]:
        return set(self.deliveries)

    def completion_ms(self) -> int:
        if not self.deliveries:
            return 0
        return max(t for t, _ in self.deliveries.values()) - self.started_at

    def max_depth(self) -> int:
        if not self.deliveries:
            return 0
        return max(d for _, d in self.deliveries.values())


def split_range(
    self_id: int,
    task_range: RingRange,
    connections: Iterable[int],
    exclude: FrozenSet[int],
    space: AddressSpace,
) -> List[Tuple[int, RingRange]]:
    """Partition a responsibility arc among in-arc connections.

    Children are the connections inside the arc (minus self and excluded
    recipients), in clockwise order from the arc start; child i takes
    [child_i, child_{i+1}) and the last child inherits the arc end and its
    inclusiveness.  The sub-arcs are disjoint by construction.
    """
    members = sorted(
        (
            c for c in connections
            if c != self_id and c not in exclude and task_range.contains(c, space)
        ),
        key=lambda c: clockwise_distance(task_range.start, c, space),
    )
    out: List[Tuple[int, RingRange]] = []
    for i, child in enumerate(members):
        if i + 1 < len(members):
            sub = RingRange(child, members[i + 1], end_inclusive=False)
        else:
            sub = RingRange(child, task_range.end, task_range.end_inclusive)
        out.append((child, sub))
    return out


@dataclass
class WalkResult:
    """Outcome of running the split algorithm on a static adjacency map."""

    origin: int
    deliveries: Dict[int, Tuple[int, int]]  # node -> (arrival ms, depth)
    messages: int
    edges: List[Tuple[int, int]]
    violations: List[str]

    def reached(self) -> Set[int]:
        return set(self.deliveries)

    def completion_ms(self) -> int:
        if not self.deliveries:
            return 0
        return max(t for t, _ in self.deliveries.values())

    def max_depth(self) -> int:
        if not self.deliveries:
            return 0
        return max(d for _, d in self.deliveries.values())


def run_on_adjacency(
    origin: int,
    adjacency: Mapping[int, Iterable[int]],
    space: AddressSpace,
    latency_of: Optional[Callable[[int, int], int]] = None,
    exclude: FrozenSet[int] = frozenset(),
) -> WalkResult:
    """Execute the broadcast split on a fixed connection graph.

    Used as an independent oracle for the simulated protocol and as the
    distribution engine of the analytic model; ``latency_of`` gives the
    one-way delay for an edge (defaults to zero).
    """
    full = RingRange(origin, (origin - 1) % space.size, end_inclusive=True)
    deliveries: Dict[int, Tuple[int, int]] = {}
    edges: List[Tuple[int, int]] = []
    violations: List[str] = []
    stack: List[Tuple[int, RingRange, int, int]] = [(origin, full, 0, 0)]
    while stack:
        node, arc, t, depth = stack.pop()
        if node in deliveries:
            violations.append(f"duplicate delivery at {node}")
            continue
        deliveries[node] = (t, depth)
        children = split_range(node, arc, sorted(adjacency.get(node, ())), exclude, space)
        for child, sub in children:
            lat = latency_of(node, child) if latency_of else 0
            edges.append((node, child))
            stack.append((child, sub, t + lat, depth + 1))
    return WalkResult(origin=origin, deliveries=deliveries, messages=len(edges),
                      edges=edges, violations=violations)
