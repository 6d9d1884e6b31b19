"""Deterministic simulator and protocol library for virtual private
overlay networks: ring overlay with harmonic shortcuts, soft-state DHT,
bounded broadcast, NAT-aware transport, group PKI with revocation, and the
private-over-public bootstrapping that ties them together."""

from .broadcast import BroadcastTrace, WalkResult, run_on_adjacency, split_range
from .config import ConfigError, ExperimentConfig
from .dht import DhtConfig, DhtService, DhtStore
from .kernel import (
    LatencyMatrix,
    NatClass,
    OverlayMessage,
    SimKernel,
    can_connect_directly,
    load_latency_file,
    synthetic_latency,
)
from .modeler import TopologyModel, build_model, estimate_join, estimate_revocation
from .node import LinkKind, NodeConfig, Overlay, OverlayNode
from .private_overlay import (
    GroupConfig,
    PairedNode,
    PrivateGroup,
    QueryMode,
    discovery_key,
    next_query_delay,
    revocation_key,
)
from .ring import AddressSpace, RingRange, closest_to, next_greedy_hop, ring_distance
from .security import (
    Certificate,
    GroupCA,
    Policy,
    RevocationNotice,
    RevocationView,
    verify_peer,
)

__version__ = "0.1.0"

__all__ = [
    "AddressSpace",
    "BroadcastTrace",
    "Certificate",
    "ConfigError",
    "DhtConfig",
    "DhtService",
    "DhtStore",
    "ExperimentConfig",
    "GroupCA",
    "GroupConfig",
    "LatencyMatrix",
    "LinkKind",
    "NatClass",
    "NodeConfig",
    "Overlay",
    "OverlayMessage",
    "OverlayNode",
    "PairedNode",
    "Policy",
    "PrivateGroup",
    "QueryMode",
    "RevocationNotice",
    "RevocationView",
    "RingRange",
    "SimKernel",
    "TopologyModel",
    "WalkResult",
    "build_model",
    "can_connect_directly",
    "closest_to",
    "discovery_key",
    "estimate_join",
    "estimate_revocation",
    "load_latency_file",
    "next_greedy_hop",
    "next_query_delay",
    "revocation_key",
    "ring_distance",
    "run_on_adjacency",
    "split_range",
    "synthetic_latency",
    "verify_peer",
]
