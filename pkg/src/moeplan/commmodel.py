"""Closed-form communication volumes, the all-to-all latency bound, expert
migration cost and the FLOPs-per-step model."""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .core import ModelArch, PlatformSpec, TrainingRun

# intra-node all-to-all bandwidth assumed by the published migration table
DEFAULT_MIGRATION_BANDWIDTH = 50e9
GIB = 2**30


@dataclass(frozen=True)
class CommVolume:
    per_pair_bytes: int
    per_gpu_send_bytes: int
    total_bytes: int
    participants: int
    local_only: bool = False
    per_pair_tokens: Fraction = Fraction(0)

    def to_dict(self) -> dict:
        return {
            "per_pair_bytes": self.per_pair_bytes,
            "per_gpu_send_bytes": self.per_gpu_send_bytes,
            "total_bytes": self.total_bytes,
            "participants": self.participants,
            "local_only": self.local_only,
        }


@dataclass(frozen=True)
class MigrationPlanCost:
    bytes_per_gpu: int
    latency_seconds: Fraction
    experts_moved: int

    def to_dict(self) -> dict:
        return {
            "bytes_per_gpu": self.bytes_per_gpu,
            "latency_seconds": float(self.latency_seconds),
            "experts_moved": self.experts_moved,
        }


def dispatch_volume(arch: ModelArch, run: TrainingRun, ep: int,
                    batch: Optional[Fraction] = None) -> CommVolume:
    """Token traffic of one dispatch all-to-all across ``ep`` GPUs under balanced routing.

    Each GPU routes ``b*s*k`` token copies, ``b*s*k/EP`` to every member of the
    group (itself included). Only the EP-1 remote shares hit the wire. Combine
    moves the same bytes in reverse; see :func:`combine_volume`.
    ``batch`` overrides ``run.global_batch`` (e.g. with a microbatch size).
    """
    b = Fraction(run.global_batch if batch is None else batch)
    if ep < 2:
        return CommVolume(0, 0, 0, max(ep, 1), local_only=True)
    tokens = b * run.seq_len * arch.top_k / ep
    per_pair = math.ceil(tokens * arch.d_model * run.activation_bytes)
    per_gpu = per_pair * (ep - 1)
    return CommVolume(per_pair_bytes=per_pair, per_gpu_send_bytes=per_gpu,
                      total_bytes=per_gpu * ep, participants=ep, per_pair_tokens=tokens)


def combine_volume(arch: ModelArch, run: TrainingRun, ep: int,
                   batch: Optional[Fraction] = None) -> CommVolume:
    return dispatch_volume(arch, run, ep, batch)


def a2a_latency_lower_bound(arch: ModelArch, run: TrainingRun, ep: int,
                            platform: PlatformSpec, batch: Optional[Fraction] = None) -> float:
    """Dispatch + combine time per MoE layer (forward) with every NIC saturated:
    ``4 b s k d / (EP * B_NIC)``."""
    if ep < 2:
        raise ValueError("the all-to-all bound needs ep >= 2")
    b = Fraction(run.global_batch if batch is None else batch)
    return float(4 * b * run.seq_len * arch.top_k * arch.d_model / ep) / platform.nic_bandwidth


def p2p_stage_volume(arch: ModelArch, run: TrainingRun, ep: int, pp: int = 1) -> CommVolume:
    """Activation hand-off between adjacent pipeline stages for one microbatch.

    Each of the EP GPUs holding a stage boundary sends ``2 b_mu s d`` bytes to
    its counterpart in the next stage.
    """
    micro = run.microbatch_size(pp)
    per_gpu = math.ceil(micro * run.activation_bytes * run.seq_len * arch.d_model)
    return CommVolume(per_pair_bytes=per_gpu, per_gpu_send_bytes=per_gpu,
                      total_bytes=per_gpu * ep, participants=ep)


def expert_state_bytes(arch: ModelArch, bytes_per_param: int = 16) -> int:
    """Parameters plus optimizer state of one routed expert."""
    return bytes_per_param * arch.mats_per_expert * arch.d_model * arch.ffn_dim_moe


def migration_cost(arch: ModelArch, experts_to_move_per_gpu: int,
                   platform: Optional[PlatformSpec] = None, *,
                   bandwidth: Optional[float] = None,
                   bytes_per_param: int = 16) -> MigrationPlanCost:
    """Per-GPU bytes and latency of moving experts (full training state) between GPUs.

    Latency follows the migration table's convention: the byte count expressed in
    GiB is read as decimal GB and divided by a decimal bandwidth (50e9 B/s by
    default, or ``platform.migration_bandwidth``).
    """
    if experts_to_move_per_gpu < 0:
        raise ValueError("experts_to_move_per_gpu must be >= 0")
    if bandwidth is None:
        bandwidth = platform.migration_bandwidth if platform is not None else DEFAULT_MIGRATION_BANDWIDTH
    nbytes = experts_to_move_per_gpu * expert_state_bytes(arch, bytes_per_param)
    latency = Fraction(nbytes, GIB) * Fraction(10**9) / Fraction(bandwidth)
    return MigrationPlanCost(bytes_per_gpu=nbytes, latency_seconds=latency,
                             experts_moved=experts_to_move_per_gpu)


def worst_case_migration(arch: ModelArch, gpus: int = 8, **kwargs) -> MigrationPlanCost:
    """Complete re-assignment: every GPU ships all E/G of its experts."""
    return migration_cost(arch, arch.num_experts // gpus, **kwargs)


def migration_table_row(num_experts: int, d_model: int, d_ffn: int, gpus: int = 8,
                        bandwidth: float = DEFAULT_MIGRATION_BANDWIDTH,
                        unit: str = "GiB") -> tuple:
    """``(send size, latency ms)`` rounded as in the published table.

    The size is ``48 E d d_ffn / G`` bytes in ``unit`` ("GiB" or "GB"), rounded to
    two decimals; the latency is that rounded size in decimal GB over the
    bandwidth, rounded to 0.1 ms.
    """
    nbytes = Fraction(48 * num_experts * d_model * d_ffn, gpus)
    scale = {"GiB": GIB, "GB": 10**9}[unit]
    size = _round_half_up(nbytes / scale, "0.01")
    latency_ms = _round_half_up(size * Fraction(10**12) / Fraction(bandwidth), "0.1")
    return float(size), float(latency_ms)


def _round_half_up(x: Fraction, quantum: str) -> Fraction:
    q = Decimal(x.numerator) / Decimal(x.denominator)
    return Fraction(q.quantize(Decimal(quantum), rounding=ROUND_HALF_UP))


def active_params(arch: ModelArch) -> int:
    """Parameters touched per token: attention plus the k routed and all shared experts."""
    d = arch.d_model
    moe = 4 * d * d + (arch.top_k + arch.num_shared_experts) * arch.mats_per_expert * d * arch.ffn_dim_moe
    dense = 4 * d * d + arch.mats_per_expert * d * arch.ffn_dim_dense
    return arch.num_moe_layers * moe + arch.num_dense_layers * dense


def flops_per_step(arch: ModelArch, run: TrainingRun, *, attention_scores: bool = False) -> int:
    """Useful training FLOPs for one rank's batch: 6 per active parameter per token.

    ``attention_scores`` adds the ``12 b s^2 d L`` score/value term.
    """
    tokens = run.global_batch * run.seq_len
    flops = 6 * active_params(arch) * tokens
    if attention_scores:
        flops += 12 * run.global_batch * run.seq_len ** 2 * arch.d_model * arch.num_layers
    return flops
