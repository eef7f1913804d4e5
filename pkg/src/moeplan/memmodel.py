"""Per-GPU training memory under undivided, expert-data-parallel and pipelined layouts.

Every term is carried as an exact ``Fraction`` (expected token counts such as
``b*s*k/EP`` need not be integral); whole bytes are obtained by ceiling the
total, the conservative direction for feasibility checks.

Per layer, with ``b`` sequences of ``s`` tokens in flight::

    attention params   16 * 4 d^2
    expert params      16 * 3 (E/EP) d d_ffn
    attention acts     2 * 6 b s d  +  2 * 2 H b s^2      (flash: 2 * H b s)
    expert acts        2 * b s k / EP * (3 d_ffn + d)

Dense layers (``num_layers - num_moe_layers`` of them, placed first) use the
expert formulas with one unsharded expert of width ``ffn_dim_dense``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from .core import ConfigError, ModelArch, ParallelPlan, PlatformSpec, TrainingRun, stage_layer_counts


@dataclass(frozen=True)
class MemoryBreakdown:
    attn_params_bytes: Fraction
    expert_params_bytes: Fraction
    attn_activation_bytes: Fraction
    expert_activation_bytes: Fraction
    framework_overhead_bytes: int = 0
    per_stage: Optional[Tuple[int, ...]] = None

    @property
    def exact_total(self) -> Fraction:
        return (self.attn_params_bytes + self.expert_params_bytes + self.attn_activation_bytes
                + self.expert_activation_bytes + self.framework_overhead_bytes)

    @property
    def total_bytes(self) -> int:
        return math.ceil(self.exact_total)

    @property
    def static_bytes(self) -> Fraction:
        return self.attn_params_bytes + self.expert_params_bytes

    @property
    def activation_bytes(self) -> Fraction:
        return self.attn_activation_bytes + self.expert_activation_bytes

    def to_dict(self) -> dict:
        def num(x):
            x = Fraction(x)
            return x.numerator if x.denominator == 1 else float(x)

        out = {
            "attn_params_bytes": num(self.attn_params_bytes),
            "expert_params_bytes": num(self.expert_params_bytes),
            "attn_activation_bytes": num(self.attn_activation_bytes),
            "expert_activation_bytes": num(self.expert_activation_bytes),
            "framework_overhead_bytes": self.framework_overhead_bytes,
            "total_bytes": self.total_bytes,
        }
        if self.per_stage is not None:
            out["per_stage"] = list(self.per_stage)
        return out


# ---------------------------------------------------------------------------
# per-layer terms

def _layer_static(arch: ModelArch, run: TrainingRun, kind: str, ep: int,
                  include_shared: bool) -> Tuple[Fraction, Fraction]:
    beta = run.bytes_per_param
    d = arch.d_model
    attn = Fraction(beta * 4 * d * d)
    if kind == "dense":
        expert = Fraction(beta * arch.mats_per_expert * d * arch.ffn_dim_dense)
    else:
        expert = Fraction(beta * arch.mats_per_expert * arch.num_experts * d * arch.ffn_dim_moe, ep)
        if include_shared:
            expert += beta * arch.mats_per_expert * arch.num_shared_experts * d * arch.ffn_dim_moe
    return attn, expert


def _layer_activation(arch: ModelArch, run: TrainingRun, kind: str, batch: Fraction, ep: int,
                      flash_attention: bool, include_shared: bool) -> Tuple[Fraction, Fraction]:
    a = run.activation_bytes
    s = run.seq_len
    d = arch.d_model
    H = arch.num_heads
    attn = a * 6 * batch * s * d
    attn += a * batch * H * s if flash_attention else a * 2 * batch * H * s * s
    if kind == "dense":
        expert = a * batch * s * (3 * arch.ffn_dim_dense + d)
    else:
        expert = a * batch * s * arch.top_k * (3 * arch.ffn_dim_moe + d) / ep
        if include_shared:
            expert += a * batch * s * arch.num_shared_experts * (3 * arch.ffn_dim_moe + d)
    return Fraction(attn), Fraction(expert)


def _sum_layers(arch, run, kinds: Sequence[str], ep: int, batch: Fraction, *,
                flash_attention: bool, include_shared: bool, checkpointing: bool = False):
    ap = ep_ = aa = ea = Fraction(0)
    for kind in kinds:
        sa, se = _layer_static(arch, run, kind, ep, include_shared)
        xa, xe = _layer_activation(arch, run, kind, batch, ep, flash_attention, include_shared)
        ap += sa
        ep_ += se
        aa += xa
        ea += xe
    if checkpointing:
        aa = Fraction(0)
    return ap, ep_, aa, ea


def _overhead(platform: Optional[PlatformSpec]) -> int:
    return platform.framework_overhead_bytes if platform is not None else 0


def _check_ep(arch: ModelArch, ep: int) -> None:
    if ep < 1 or arch.num_experts % ep:
        raise ConfigError(f"EP={ep} does not divide E={arch.num_experts}")


def _check_pp(arch: ModelArch, pp: int) -> None:
    if pp < 1 or arch.num_layers % pp:
        raise ConfigError(f"PP={pp} does not divide L={arch.num_layers}")


def _stage_kinds(arch: ModelArch, pp: int, stage: int) -> Tuple[str, ...]:
    counts = stage_layer_counts(arch.num_layers, pp)
    start = sum(counts[:stage])
    return arch.layer_kinds()[start:start + counts[stage]]


# ---------------------------------------------------------------------------
# public API

def undivided_memory(arch: ModelArch, run: TrainingRun, *, flash_attention: bool = False,
                     include_shared: bool = False,
                     platform: Optional[PlatformSpec] = None) -> MemoryBreakdown:
    """Memory of the whole model on one hypothetical GPU of unbounded capacity."""
    terms = _sum_layers(arch, run, arch.layer_kinds(), 1, Fraction(run.global_batch),
                        flash_attention=flash_attention, include_shared=include_shared)
    return MemoryBreakdown(*terms, framework_overhead_bytes=_overhead(platform))


def edp_memory(arch: ModelArch, run: TrainingRun, ep: int, *, flash_attention: bool = False,
               include_shared: bool = False,
               platform: Optional[PlatformSpec] = None) -> MemoryBreakdown:
    """Per-GPU memory when ``ep`` GPUs each hold E/EP experts and a replica of attention."""
    _check_ep(arch, ep)
    terms = _sum_layers(arch, run, arch.layer_kinds(), ep, Fraction(run.global_batch),
                        flash_attention=flash_attention, include_shared=include_shared)
    return MemoryBreakdown(*terms, framework_overhead_bytes=_overhead(platform))


def gpipe_memory(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, stage: int = 0, *,
                 flash_attention: bool = False, include_shared: bool = False,
                 platform: Optional[PlatformSpec] = None) -> MemoryBreakdown:
    """Per-GPU memory of a GPipe stage: every microbatch is alive at the peak, so
    activations cover the full batch."""
    _check_pp(arch, plan.pp)
    _check_ep(arch, plan.ep)
    if not 0 <= stage < plan.pp:
        raise ConfigError(f"stage {stage} out of range for PP={plan.pp}")
    opts = dict(flash_attention=flash_attention, include_shared=include_shared)
    batch = Fraction(run.global_batch)
    overhead = _overhead(platform)
    per_stage = tuple(
        MemoryBreakdown(*_sum_layers(arch, run, _stage_kinds(arch, plan.pp, i), plan.ep, batch, **opts),
                        framework_overhead_bytes=overhead).total_bytes
        for i in range(plan.pp))
    terms = _sum_layers(arch, run, _stage_kinds(arch, plan.pp, stage), plan.ep, batch, **opts)
    return MemoryBreakdown(*terms, framework_overhead_bytes=overhead, per_stage=per_stage)


def _ofob_terms(arch, run, plan, stage, opts):
    m = run.microbatches(plan.pp)
    micro = Fraction(run.global_batch, m)
    ap, ep_, aa, ea = _sum_layers(arch, run, _stage_kinds(arch, plan.pp, stage), plan.ep, micro, **opts)
    inflight = plan.pp - stage
    return ap, ep_, aa * inflight, ea * inflight


def ofob_stage_memory(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, stage: int, *,
                      flash_attention: bool = False, include_shared: bool = False,
                      activation_checkpointing: bool = False,
                      platform: Optional[PlatformSpec] = None,
                      allow_uneven: bool = False) -> MemoryBreakdown:
    """Per-GPU memory of 1F1B stage ``stage``, which holds PP - stage microbatches at peak.

    ``allow_uneven`` accepts PP not dividing L; the leading stages then carry
    ``ceil(L/PP)`` layers.
    """
    if not allow_uneven:
        _check_pp(arch, plan.pp)
    elif plan.pp > arch.num_layers:
        raise ConfigError(f"PP={plan.pp} exceeds L={arch.num_layers}")
    _check_ep(arch, plan.ep)
    if not 0 <= stage < plan.pp:
        raise ConfigError(f"stage {stage} out of range for PP={plan.pp}")
    if run.microbatches(plan.pp) < plan.pp:
        warnings.warn(f"M={run.microbatches(plan.pp)} < PP={plan.pp}: pipeline cannot fill",
                      stacklevel=2)
    opts = dict(flash_attention=flash_attention, include_shared=include_shared,
                checkpointing=activation_checkpointing)
    overhead = _overhead(platform)
    per_stage = tuple(
        MemoryBreakdown(*_ofob_terms(arch, run, plan, i, opts), framework_overhead_bytes=overhead).total_bytes
        for i in range(plan.pp))
    return MemoryBreakdown(*_ofob_terms(arch, run, plan, stage, opts),
                           framework_overhead_bytes=overhead, per_stage=per_stage)


def ofob_all_stages(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, **kwargs) -> List[MemoryBreakdown]:
    return [ofob_stage_memory(arch, run, plan, i, **kwargs) for i in range(plan.pp)]


def peak_stage_memory(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, **kwargs) -> MemoryBreakdown:
    """Stage 0 under 1F1B: the binding memory constraint across all stages."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ofob_stage_memory(arch, run, plan, 0, allow_uneven=True, **kwargs)


def stage_memory_skew(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, *,
                      flash_attention: bool = False, include_shared: bool = False,
                      exact: bool = False):
    """First-stage minus last-stage 1F1B memory.

    For all-MoE models this is ``L(PP-1)/PP`` times one microbatch's per-layer
    activations. Returns whole bytes (ceiled) unless ``exact`` is set.
    """
    _check_pp(arch, plan.pp)
    _check_ep(arch, plan.ep)
    m = run.microbatches(plan.pp)
    micro = Fraction(run.global_batch, m)
    opts = dict(flash_attention=flash_attention, include_shared=include_shared)
    if arch.num_dense_layers == 0:
        xa, xe = _layer_activation(arch, run, "moe", micro, plan.ep, flash_attention, include_shared)
        skew = Fraction(arch.num_layers * (plan.pp - 1), plan.pp) * (xa + xe)
    else:
        first = _sum_layers(arch, run, _stage_kinds(arch, plan.pp, 0), plan.ep, micro, **opts)
        last = _sum_layers(arch, run, _stage_kinds(arch, plan.pp, plan.pp - 1), plan.ep, micro, **opts)
        skew = (first[0] + first[1] - last[0] - last[1]
                + plan.pp * (first[2] + first[3]) - (last[2] + last[3]))
    return skew if exact else math.ceil(skew)
