"""Single-process reference of the three-phase hierarchical all-to-all.

Ranks are numbered ``node * R + local_rank``. Every rank owns an ``N x D`` send
buffer whose row ``r`` is destined for global rank ``r``; afterwards row ``r`` of
rank ``q``'s receive buffer holds row ``q`` of rank ``r``'s send buffer.

The three phases, per rank ``(n, l)`` with ``M = num_nodes - 1`` remote nodes:

1. intra-node all-to-all of the R rows addressed to this node;
2. pack the ``M*R`` remote-destined rows and exchange slice ``i`` with the
   same-local-rank peer on the i-th remote node (one message per remote node);
3. regroup what arrived so row ``j`` carries everything for local rank ``j``,
   then a second intra-node all-to-all delivers it.

Phase 1 is independent of phases 2 and 3; phase 3 needs phase 2. Messages are
exchanged through an in-memory mailbox with a barrier standing in for WaitAll.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class HaloShapeError(ValueError):
    pass


@dataclass
class RankBuffer:
    rank_id: int
    node_id: int
    local_rank: int
    send_matrix: np.ndarray
    recv_matrix: Optional[np.ndarray] = None


@dataclass(frozen=True)
class CommGroups:
    num_nodes: int
    ranks_per_node: int
    nics_per_node: int = 4

    def __post_init__(self):
        if self.num_nodes < 1 or self.ranks_per_node < 1 or self.nics_per_node < 1:
            raise HaloShapeError("num_nodes, ranks_per_node and nics_per_node must be >= 1")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.ranks_per_node

    def rank(self, node: int, local_rank: int) -> int:
        return node * self.ranks_per_node + local_rank

    def internal_group(self, node: int) -> List[int]:
        return [self.rank(node, l) for l in range(self.ranks_per_node)]

    def inter_node_group(self, local_rank: int) -> List[int]:
        """Ranks sharing ``local_rank`` (hence the same NIC index) across nodes."""
        return [self.rank(n, local_rank) for n in range(self.num_nodes)]

    def nic(self, local_rank: int) -> int:
        return local_rank % self.nics_per_node

    def remote_nodes(self, node: int) -> List[int]:
        return [n for n in range(self.num_nodes) if n != node]

    def peer(self, remote_node: int, local_rank: int) -> int:
        return remote_node * self.ranks_per_node + local_rank


def setup_comms(num_nodes: int, ranks_per_node: int, nics_per_node: int = 4) -> CommGroups:
    return CommGroups(num_nodes, ranks_per_node, nics_per_node)


def make_buffers(groups: CommGroups, send_matrices: Sequence[np.ndarray]) -> List[RankBuffer]:
    R = groups.ranks_per_node
    return [RankBuffer(rank_id=r, node_id=r // R, local_rank=r % R, send_matrix=np.asarray(s))
            for r, s in enumerate(send_matrices)]


def origin_encoded_buffers(groups: CommGroups, width: int, dtype=np.int64) -> List[RankBuffer]:
    """Send buffers whose every element encodes (source rank, row, column) uniquely."""
    N = groups.world_size
    sends = [(src * N * width + np.arange(N * width)).reshape(N, width).astype(dtype) for src in range(N)]
    return make_buffers(groups, sends)


def _validate(buffers: Sequence[RankBuffer], groups: Optional[CommGroups] = None) -> Tuple[int, int]:
    if not buffers:
        raise HaloShapeError("no ranks")
    N = len(buffers)
    shape = buffers[0].send_matrix.shape
    if len(shape) != 2 or shape[0] != N:
        raise HaloShapeError(f"send buffers must be N x D with N = {N} ranks, got {shape}")
    dtype = buffers[0].send_matrix.dtype
    for i, b in enumerate(buffers):
        if b.rank_id != i:
            raise HaloShapeError(f"buffer {i} has rank_id {b.rank_id}")
        if b.send_matrix.shape != shape:
            raise HaloShapeError(f"rank {i} send shape {b.send_matrix.shape} != {shape}")
        if b.send_matrix.dtype != dtype:
            raise HaloShapeError(f"rank {i} dtype {b.send_matrix.dtype} != {dtype}")
    if groups is not None:
        if groups.world_size != N:
            raise HaloShapeError(f"{N} buffers for a {groups.num_nodes}x{groups.ranks_per_node} layout")
        for b in buffers:
            if (b.node_id, b.local_rank) != divmod(b.rank_id, groups.ranks_per_node):
                raise HaloShapeError(f"rank {b.rank_id} placed at node {b.node_id}/local {b.local_rank}; "
                                     "uniform ranks per node required")
    return N, shape[1]


def flat_all_to_all(buffers: Sequence[RankBuffer]) -> List[RankBuffer]:
    """Direct pairwise exchange; the correctness oracle for the hierarchical version."""
    N, _ = _validate(buffers)
    out = []
    for q, b in enumerate(buffers):
        recv = np.stack([buffers[r].send_matrix[q] for r in range(N)])
        out.append(RankBuffer(b.rank_id, b.node_id, b.local_rank, b.send_matrix, recv))
    return out


def _all_to_all_single(inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray]) -> None:
    # equal one-row splits: output[l][j] = input[j][l]
    for l, out in enumerate(outputs):
        for j, inp in enumerate(inputs):
            out[j] = inp[l]


@dataclass
class _RankState:
    p1: np.ndarray
    f2s: np.ndarray
    f2r: np.ndarray
    f3s: np.ndarray
    f3r: np.ndarray
    out: np.ndarray
    idx: np.ndarray


class HaloAllToAll:
    """Hierarchical all-to-all with per-rank persistent buffers.

    Buffers are allocated on the first call and reused while the layout, width
    and dtype stay the same.
    """

    def __init__(self, groups: CommGroups):
        self.groups = groups
        self._state: Optional[List[_RankState]] = None
        self._key = None

    def _allocate(self, D: int, dtype) -> List[_RankState]:
        g = self.groups
        R, M = g.ranks_per_node, g.num_nodes - 1
        states = []
        for rank in range(g.world_size):
            node = rank // R
            idx = np.array([n * R + j for n in g.remote_nodes(node) for j in range(R)], dtype=np.intp)
            states.append(_RankState(
                p1=np.empty((R, D), dtype), f2s=np.empty((M * R, D), dtype), f2r=np.empty((M * R, D), dtype),
                f3s=np.empty((R, M * D), dtype), f3r=np.empty((R, M * D), dtype),
                out=np.empty((g.world_size, D), dtype), idx=idx))
        return states

    def __call__(self, buffers: Sequence[RankBuffer]) -> List[RankBuffer]:
        g = self.groups
        N, D = _validate(buffers, g)
        dtype = buffers[0].send_matrix.dtype
        key = (D, dtype)
        if self._state is None or self._key != key:
            self._state, self._key = self._allocate(D, dtype), key
        st = self._state
        R, M = g.ranks_per_node, g.num_nodes - 1

        # phase 1: rows addressed to this node, exchanged inside the node
        for node in range(g.num_nodes):
            ranks = g.internal_group(node)
            lo = node * R
            _all_to_all_single([buffers[r].send_matrix[lo:lo + R] for r in ranks], [st[r].p1 for r in ranks])

        if M:
            # phase 2: one packed gather, then one message per remote node to the same-local-rank peer
            mailbox: Dict[Tuple[int, int], np.ndarray] = {}
            for rank in range(N):
                np.take(buffers[rank].send_matrix, st[rank].idx, axis=0, out=st[rank].f2s)
                node, l = divmod(rank, R)
                for i, n in enumerate(g.remote_nodes(node)):
                    mailbox[(rank, g.peer(n, l))] = st[rank].f2s[i * R:(i + 1) * R]
            for rank in range(N):  # WaitAll
                node, l = divmod(rank, R)
                for i, n in enumerate(g.remote_nodes(node)):
                    st[rank].f2r[i * R:(i + 1) * R] = mailbox[(g.peer(n, l), rank)]

            # phase 3: row j of f3s = everything that arrived for local rank j
            for rank in range(N):
                np.copyto(st[rank].f3s.reshape(R, M, D), st[rank].f2r.reshape(M, R, D).transpose(1, 0, 2))
            for node in range(g.num_nodes):
                ranks = g.internal_group(node)
                _all_to_all_single([st[r].f3s for r in ranks], [st[r].f3r for r in ranks])

        results = []
        for rank in range(N):
            node, _ = divmod(rank, R)
            s = st[rank]
            s.out[node * R:(node + 1) * R] = s.p1
            if M:
                t = s.f3r.reshape(R, M, D).transpose(1, 0, 2)
                for i, n in enumerate(g.remote_nodes(node)):
                    s.out[n * R:(n + 1) * R] = t[i]
            b = buffers[rank]
            results.append(RankBuffer(b.rank_id, b.node_id, b.local_rank, b.send_matrix, s.out.copy()))
        return results


def halo_all_to_all(buffers: Sequence[RankBuffer], groups: CommGroups) -> List[RankBuffer]:
    return HaloAllToAll(groups)(buffers)


# ---------------------------------------------------------------------------
# tracing

PHASE_DEPENDENCIES = {"phase1": [], "phase2": [], "phase3": ["phase2"]}


@dataclass(frozen=True)
class PhaseTrace:
    """Bytes each rank sends off-rank per phase, and phase-2 bytes per (node, NIC)."""

    num_nodes: int
    ranks_per_node: int
    row_bytes: int
    per_rank: Dict[str, Tuple[int, ...]]
    per_nic: Dict[Tuple[int, int], int]
    messages_per_rank: Dict[str, int]
    dependencies: Dict[str, List[str]] = field(default_factory=lambda: dict(PHASE_DEPENDENCIES))

    def phase_total(self, phase: str) -> int:
        return sum(self.per_rank[phase])

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "ranks_per_node": self.ranks_per_node,
            "row_bytes": self.row_bytes,
            "per_rank": {k: list(v) for k, v in sorted(self.per_rank.items())},
            "per_nic": [{"node": n, "nic": c, "bytes": b} for (n, c), b in sorted(self.per_nic.items())],
            "messages_per_rank": dict(sorted(self.messages_per_rank.items())),
            "dependencies": {k: list(v) for k, v in sorted(self.dependencies.items())},
            "concurrency": "phase1 || (phase2 -> phase3)",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def phase_byte_counts(num_nodes: int, ranks_per_node: int, row_bytes: int, nics_per_node: int) -> PhaseTrace:
    R, M = ranks_per_node, num_nodes - 1
    N = num_nodes * R
    p1 = (R - 1) * row_bytes
    p2 = M * R * row_bytes
    p3 = (R - 1) * M * row_bytes
    per_nic: Dict[Tuple[int, int], int] = {}
    for node in range(num_nodes):
        for c in range(nics_per_node):
            per_nic[(node, c)] = 0
        for l in range(R):
            per_nic[(node, l % nics_per_node)] += p2
    return PhaseTrace(
        num_nodes=num_nodes, ranks_per_node=R, row_bytes=row_bytes,
        per_rank={"phase1": (p1,) * N, "phase2": (p2,) * N, "phase3": (p3,) * N},
        per_nic=per_nic,
        messages_per_rank={"phase1": R - 1, "phase2": M, "phase3": (R - 1) if M else 0},
    )


def trace_phases(buffers: Sequence[RankBuffer], groups: CommGroups) -> PhaseTrace:
    _, D = _validate(buffers, groups)
    row_bytes = D * buffers[0].send_matrix.dtype.itemsize
    return phase_byte_counts(groups.num_nodes, groups.ranks_per_node, row_bytes, groups.nics_per_node)
