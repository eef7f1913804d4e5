"""Bottleneck-link latency model of flat vs hierarchical all-to-all on a Dragonfly.

Nodes sit in switch groups of ``N_h`` nodes, groups in racks. Every rank pair is
classified as same-node, same-group, same-rack or inter-rack. For each physical
link a transfer phase costs ``alpha_tier + bytes / bandwidth_tier`` and the
phase takes as long as its slowest link.

Links per node: each GPU's intra-node egress; each NIC (ranks are pinned to NIC
``local_rank % nics``); the switch-group port; the inter-group (global) and
inter-rack uplinks. The flat algorithm's uncoordinated flows contend once they
leave the switch group: their inter-group bytes are inflated by
``gpus_per_node / nics_per_node`` on every node-egress link. The hierarchical
algorithm batches that traffic per NIC and pays no such factor, but adds the
intra-node forwarding phase.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

from .core import PlatformSpec
from .halo import phase_byte_counts

OVERLAP_MODES = ("ii", "iii", "none")
PLACEMENTS = ("packed", "scattered")
SWEEP_HEADER = ("nodes", "message_bytes", "t_flat", "t_halo", "speedup", "overlap_mode", "placement")


@dataclass(frozen=True)
class Topology:
    num_nodes: int
    gpus_per_node: int
    nics_per_node: int
    nodes_per_switch_group: int
    groups_per_rack: int
    intra_node_bandwidth: float
    nic_bandwidth: float
    intra_group_bandwidth: float
    inter_group_bandwidth: float
    inter_rack_bandwidth: float
    latency: Tuple[float, float, float]   # intra-node, intra-group, inter-group/rack
    placement: Tuple[Tuple[int, int], ...]  # node -> (switch group, rack)
    placement_name: str = "packed"

    def __post_init__(self):
        if len(self.placement) != self.num_nodes:
            raise ValueError("placement must cover every node")
        for group, rack in self.placement:
            if group // self.groups_per_rack != rack:
                raise ValueError(f"group {group} is not in rack {rack}")
        sizes: Dict[int, int] = {}
        for group, _ in self.placement:
            sizes[group] = sizes.get(group, 0) + 1
        if max(sizes.values()) > self.nodes_per_switch_group:
            raise ValueError("a switch group holds more than nodes_per_switch_group nodes")

    @classmethod
    def from_platform(cls, platform: PlatformSpec, num_nodes: int, placement: str = "packed") -> "Topology":
        nh, gpr = platform.nodes_per_switch_group, platform.groups_per_rack
        if placement == "packed":
            groups = [i // nh for i in range(num_nodes)]
        elif placement == "scattered":
            # one node per switch group, round-robin across racks
            racks = max(1, math.ceil(num_nodes / gpr))
            groups = [(i % racks) * gpr + (i // racks) % gpr for i in range(num_nodes)]
        else:
            raise ValueError(f"unknown placement {placement!r}")
        return cls(
            num_nodes=num_nodes, gpus_per_node=platform.gpus_per_node, nics_per_node=platform.nics_per_node,
            nodes_per_switch_group=nh, groups_per_rack=gpr,
            intra_node_bandwidth=platform.intra_node_bandwidth, nic_bandwidth=platform.nic_bandwidth,
            intra_group_bandwidth=platform.intra_group_bandwidth,
            inter_group_bandwidth=platform.inter_group_bandwidth,
            inter_rack_bandwidth=platform.inter_rack_bandwidth,
            latency=tuple(platform.per_message_latency),
            placement=tuple((g, g // gpr) for g in groups), placement_name=placement)

    @property
    def num_ranks(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_tier(self, a: int, b: int) -> str:
        if a == b:
            return "node"
        (ga, ra), (gb, rb) = self.placement[a], self.placement[b]
        if ga == gb:
            return "group"
        return "rack" if ra == rb else "global"

    def rank_tier(self, p: int, q: int) -> str:
        g = self.gpus_per_node
        return self.node_tier(p // g, q // g)

    def remote_node_counts(self, node: int) -> Dict[str, int]:
        counts = {"group": 0, "rack": 0, "global": 0}
        for other in range(self.num_nodes):
            if other != node:
                counts[self.node_tier(node, other)] += 1
        return counts

    @property
    def contention(self) -> float:
        return self.gpus_per_node / self.nics_per_node

    def max_ranks_per_nic(self) -> int:
        return math.ceil(self.gpus_per_node / self.nics_per_node)


# tier names: "rack" = other group, same rack; "global" = other rack
def _uplinks(topo: Topology) -> Dict[str, Tuple[float, float]]:
    a_node, a_group, a_far = topo.latency
    return {
        "group": (a_group, topo.intra_group_bandwidth),
        "rack": (a_far, topo.inter_group_bandwidth),
        "global": (a_far, topo.inter_rack_bandwidth),
    }


def _link(alpha: float, nbytes: float, bandwidth: float) -> float:
    return alpha + nbytes / bandwidth if nbytes > 0 else 0.0


def _inter_node_links(topo: Topology, per_remote_node_rank_bytes: float, inflate: float) -> Dict[str, float]:
    """Link times when every rank on a node sends ``per_remote_node_rank_bytes`` to
    each remote node; bytes leaving the switch group are multiplied by ``inflate``."""
    g = topo.gpus_per_node
    up = _uplinks(topo)
    a_group, a_far = topo.latency[1], topo.latency[2]
    links: Dict[str, float] = {}
    for node in range(topo.num_nodes):
        counts = topo.remote_node_counts(node)
        if not any(counts.values()):
            continue
        far = counts["rack"] + counts["global"]
        nic_bytes = topo.max_ranks_per_nic() * per_remote_node_rank_bytes * (counts["group"] + inflate * far)
        links[f"node{node}/nic"] = _link(a_far if far else a_group, nic_bytes, topo.nic_bandwidth)
        for tier, (alpha, bw) in up.items():
            factor = 1.0 if tier == "group" else inflate
            nbytes = g * per_remote_node_rank_bytes * counts[tier] * factor
            if nbytes:
                links[f"node{node}/{tier}"] = _link(alpha, nbytes, bw)
    return links


def flat_link_times(topo: Topology, message_bytes_per_pair: float) -> Dict[str, float]:
    g = topo.gpus_per_node
    links = {}
    if g > 1:
        links["gpu/intra_node"] = _link(topo.latency[0], (g - 1) * message_bytes_per_pair,
                                        topo.intra_node_bandwidth)
    links.update(_inter_node_links(topo, g * message_bytes_per_pair, topo.contention))
    return links


def simulate_flat(topo: Topology, message_bytes_per_pair: float) -> float:
    """Time of a direct all-to-all where every rank sends ``message_bytes_per_pair`` to every peer."""
    if message_bytes_per_pair <= 0:
        raise ValueError("message size must be positive")
    return max(flat_link_times(topo, message_bytes_per_pair).values(), default=0.0)


def flat_bottleneck(topo: Topology, message_bytes_per_pair: float) -> str:
    links = flat_link_times(topo, message_bytes_per_pair)
    return max(sorted(links), key=lambda k: links[k])


@dataclass(frozen=True)
class SimResult:
    t_flat: float
    t_halo_overlap_ii: float
    t_halo_overlap_iii: float
    t_halo_none: float
    t_phase1: float
    t_phase2: float
    t_phase3: float
    max_link_utilization: float
    overlap_mode: str = "ii"

    @property
    def t_halo(self) -> float:
        return {"ii": self.t_halo_overlap_ii, "iii": self.t_halo_overlap_iii,
                "none": self.t_halo_none}[self.overlap_mode]

    @property
    def speedup(self) -> float:
        if self.t_halo == 0:
            return 1.0  # single GPU: nothing moves
        return self.t_flat / self.t_halo

    def to_dict(self) -> dict:
        out = asdict(self)
        out["t_halo"] = self.t_halo
        out["speedup"] = self.speedup
        return out


def halo_phase_times(topo: Topology, message_bytes_per_pair: float) -> Tuple[float, float, float]:
    g = topo.gpus_per_node
    trace = phase_byte_counts(topo.num_nodes, g, message_bytes_per_pair, topo.nics_per_node)
    t1 = _link(topo.latency[0], trace.per_rank["phase1"][0], topo.intra_node_bandwidth)
    t3 = _link(topo.latency[0], trace.per_rank["phase3"][0], topo.intra_node_bandwidth)
    links = _inter_node_links(topo, g * message_bytes_per_pair, 1.0)
    t2 = max(links.values(), default=0.0)
    return t1, t2, t3


def simulate_halo(topo: Topology, message_bytes_per_pair: float, overlap_mode: str = "ii") -> SimResult:
    """Phase times plus totals for every overlap mode; ``overlap_mode`` selects ``t_halo``.

    ``ii`` runs phase 1 beside phase 2: ``max(T1, T2) + T3``; ``iii`` beside
    phase 3: ``T2 + max(T1, T3)``; ``none`` serialises all three.
    """
    if overlap_mode not in OVERLAP_MODES:
        raise ValueError(f"overlap_mode must be one of {OVERLAP_MODES}")
    if message_bytes_per_pair <= 0:
        raise ValueError("message size must be positive")
    t1, t2, t3 = halo_phase_times(topo, message_bytes_per_pair)
    flat_links = flat_link_times(topo, message_bytes_per_pair)
    t_flat = max(flat_links.values(), default=0.0)
    util = 0.0
    if t_flat > 0:
        for name, t in flat_links.items():
            alpha = topo.latency[0] if name.startswith("gpu") else 0.0
            util = max(util, max(t - alpha, 0.0) / t_flat)
    return SimResult(
        t_flat=t_flat,
        t_halo_overlap_ii=max(t1, t2) + t3,
        t_halo_overlap_iii=t2 + max(t1, t3),
        t_halo_none=t1 + t2 + t3,
        t_phase1=t1, t_phase2=t2, t_phase3=t3,
        max_link_utilization=min(util, 1.0),
        overlap_mode=overlap_mode,
    )


def moe_layer_a2a_time(topo: Topology, message_bytes_per_pair: float) -> float:
    """Dispatch plus combine with the flat algorithm (two all-to-alls)."""
    return 2 * simulate_flat(topo, message_bytes_per_pair)


@dataclass(frozen=True)
class SweepRow:
    nodes: int
    message_bytes: int
    t_flat: float
    t_halo: float
    speedup: float
    overlap_mode: str
    placement: str

    def as_tuple(self):
        return (self.nodes, self.message_bytes, self.t_flat, self.t_halo, self.speedup,
                self.overlap_mode, self.placement)


def sweep(platform: PlatformSpec, sizes: Iterable[int], node_counts: Iterable[int], *,
          overlap_mode: str = "ii", placement: str = "packed") -> List[SweepRow]:
    sizes, node_counts = list(sizes), list(node_counts)
    if not sizes or not node_counts:
        raise ValueError("sweep grids must be non-empty")
    rows = []
    for n in node_counts:
        topo = Topology.from_platform(platform, n, placement)
        for m in sizes:
            r = simulate_halo(topo, m, overlap_mode)
            rows.append(SweepRow(n, m, r.t_flat, r.t_halo, r.speedup, overlap_mode, placement))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row.as_tuple()])
    return buf.getvalue()


def sweep_json(rows: Sequence[SweepRow]) -> str:
    return json.dumps([dict(zip(SWEEP_HEADER, r.as_tuple())) for r in rows], indent=2)
