"""Per-step time and MFU of a pipelined expert-parallel plan.

Per GPU and per microbatch, a stage runs ``l`` layers of::

    attn -> dispatch a2a -> expert -> combine a2a

Backward costs twice the forward compute and repeats both all-to-alls, so one
microbatch costs ``l * (3 (t_attn + t_expert) + 2 (t_dispatch + t_combine))``
plus a forward activation and a backward gradient hand-off to the neighbouring
stage when PP > 1. Under 1F1B the step takes ``M + PP - 1`` such slots; the
``PP - 1`` idle slots are the bubble. MFU is the product of hardware efficiency
``F_model / (peak * G * t_compute)`` and compute fraction ``t_compute / t_step``,
where ``t_compute`` and ``t_comm`` are summed over the M useful slots.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

from . import benchdata
from .benchdata import BenchProfile, MissingSeriesError
from .commmodel import a2a_latency_lower_bound, dispatch_volume, flops_per_step, p2p_stage_volume
from .core import ConfigError, ModelArch, ParallelPlan, PlatformSpec, TrainingRun

CHECKPOINT_RECOMPUTE = Fraction(4, 3)


@dataclass(frozen=True)
class StepTimeBreakdown:
    t_attention: float
    t_expert: float
    t_dispatch: float
    t_combine: float
    t_p2p: float
    t_compute: float
    t_comm: float
    t_step: float
    bubble_fraction: float
    hardware_efficiency: float
    compute_fraction: float
    mfu: float
    model_flops: float
    num_gpus: int

    def to_dict(self) -> dict:
        return asdict(self)

    def identity_residual(self) -> float:
        """|t_compute/t_step - (1 - bubble - t_comm/t_step)|; zero up to rounding."""
        if self.t_step == 0:
            return 0.0
        return abs(self.t_compute / self.t_step - (1 - self.bubble_fraction - self.t_comm / self.t_step))


def bubble_fraction(pp: int, m: int) -> Fraction:
    """Idle share of a 1F1B step: ``(PP - 1) / (M + PP - 1)``."""
    if pp < 1 or m < 1:
        raise ValueError("pp and m must be >= 1")
    return Fraction(pp - 1, m + pp - 1)


def mfu_from_factors(hardware_efficiency: float, compute_fraction: float) -> float:
    return hardware_efficiency * compute_fraction


def _resolve_series(available, explicit: Optional[str], preferred: str, family: str) -> str:
    if explicit is not None:
        if explicit not in available:
            raise MissingSeriesError(f"no {family} series {explicit!r} in profile")
        return explicit
    if preferred in available:
        return preferred
    if len(available) == 1:
        return available[0]
    raise MissingSeriesError(
        f"cannot choose a {family} series (wanted {preferred!r}; profile has {available or 'none'})")


def estimate_step(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, platform: PlatformSpec,
                  profile: BenchProfile, *, attention_series: Optional[str] = None,
                  gemm_series: Optional[str] = None, activation_checkpointing: bool = False,
                  attention_scores: bool = False) -> StepTimeBreakdown:
    """Compose a step-time estimate from benchmark lookups and the analytical model.

    Attention curves are looked up by ``attention_series`` (default: the series
    named after the head dimension, e.g. ``"128"``, or the only series present);
    GEMM curves by ``gemm_series`` (default ``"<d_model>x<ffn_dim_moe>"`` or the
    only series). Each all-to-all takes the larger of its share of the NIC
    lower bound and the measured-bandwidth time.
    """
    if plan.pp > arch.num_layers:
        raise ConfigError(f"PP={plan.pp} exceeds L={arch.num_layers}")
    if arch.num_experts % plan.ep:
        raise ConfigError(f"EP={plan.ep} does not divide E={arch.num_experts}")

    m = run.microbatches(plan.pp)
    micro = Fraction(run.global_batch, m)
    s = run.seq_len
    d = arch.d_model
    l = plan.layers_per_stage
    peak = profile.effective_peak

    a_series = _resolve_series(profile.attention_series(), attention_series, str(arch.head_dim), "attention")
    g_series = _resolve_series(profile.gemm_series(), gemm_series, f"{d}x{arch.ffn_dim_moe}", "gemm")

    # forward compute of one layer for one microbatch on one GPU
    tokens = micro * s
    attn_flops = 2 * 4 * d * d * tokens
    if attention_scores:
        attn_flops += 4 * micro * s * s * d
    expert_tokens = tokens * (arch.top_k + arch.num_shared_experts)
    expert_flops = 2 * arch.mats_per_expert * d * arch.ffn_dim_moe * expert_tokens
    # times are composed exactly so the MFU identities hold without rounding drift
    attn_rate = Fraction(benchdata.attention_tflops(profile, a_series, float(micro), s)) * 10**12
    tokens_per_expert = tokens * arch.top_k * plan.ep / arch.num_experts
    gemm_rate = Fraction(benchdata.gemm_tflops(profile, g_series, float(micro), float(tokens_per_expert))) * 10**12
    t_attn = attn_flops / attn_rate
    t_exp = expert_flops / gemm_rate
    if activation_checkpointing:
        t_attn *= CHECKPOINT_RECOMPUTE
        t_exp *= CHECKPOINT_RECOMPUTE

    # one all-to-all (dispatch or combine) for one microbatch
    t_a2a = Fraction(0)
    if plan.ep >= 2:
        vol = dispatch_volume(arch, run, plan.ep, batch=micro)
        bound = Fraction(a2a_latency_lower_bound(arch, run, plan.ep, platform, batch=micro)) / 2
        bw = Fraction(benchdata.a2a_bandwidth(profile, plan.ep, vol.per_gpu_send_bytes))
        t_a2a = max(bound, vol.per_gpu_send_bytes / bw)

    slot_p2p = Fraction(0)
    if plan.pp >= 2:
        p2p = p2p_stage_volume(arch, run, plan.ep, plan.pp)
        same_node = plan.ep < platform.gpus_per_node
        bw = platform.intra_node_bandwidth if same_node else platform.nic_bandwidth
        alpha = platform.per_message_latency[0 if same_node else 1]
        slot_p2p = 2 * (Fraction(alpha) + p2p.per_gpu_send_bytes / Fraction(bw))

    t_attention = m * l * 3 * t_attn
    t_expert = m * l * 3 * t_exp
    t_dispatch = m * l * 2 * t_a2a
    t_combine = m * l * 2 * t_a2a
    t_p2p = m * slot_p2p
    t_compute = t_attention + t_expert
    t_comm = t_dispatch + t_combine + t_p2p
    t_step = (m + plan.pp - 1) * (t_compute + t_comm) / m
    bubble = bubble_fraction(plan.pp, m)

    gpus = plan.world_size
    # every EP rank processes its own b sequences; outer data parallelism replicates
    # the whole pipeline and is not costed
    model_flops = plan.ep * flops_per_step(arch, run, attention_scores=attention_scores)
    hw_eff = model_flops / (Fraction(peak) * gpus * t_compute) if t_compute > 0 else Fraction(0)
    compute_fraction = t_compute / t_step if t_step > 0 else Fraction(0)
    return StepTimeBreakdown(
        t_attention=float(t_attention), t_expert=float(t_expert), t_dispatch=float(t_dispatch),
        t_combine=float(t_combine), t_p2p=float(t_p2p), t_compute=float(t_compute), t_comm=float(t_comm),
        t_step=float(t_step), bubble_fraction=float(bubble), hardware_efficiency=float(hw_eff),
        compute_fraction=float(compute_fraction), mfu=float(mfu_from_factors(hw_eff, compute_fraction)),
        model_flops=float(model_flops), num_gpus=gpus)
