"""Enumerate (PP, EP) plans, check the five feasibility constraints, rank by MFU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from .benchdata import BenchProfile
from .core import ModelArch, ParallelPlan, PlatformSpec, TrainingRun
from .estimator import estimate_step
from .memmodel import peak_stage_memory

CONSTRAINTS = ("gpu_count", "ep_divides_e", "pp_leq_l", "ep_locality", "memory_fit")


@dataclass(frozen=True)
class PlanVerdict:
    plan: ParallelPlan
    constraint_results: Dict[str, bool]
    peak_stage0_bytes: Optional[int]
    estimated_mfu: Optional[float] = None
    # outer data parallelism is replicated but its gradient traffic is not costed
    outer_dp_uncosted: bool = False

    @property
    def feasible(self) -> bool:
        return all(self.constraint_results[c] for c in CONSTRAINTS)

    @property
    def failed(self) -> List[str]:
        return [c for c in CONSTRAINTS if not self.constraint_results[c]]

    def to_dict(self) -> dict:
        return {
            "pp": self.plan.pp,
            "ep": self.plan.ep,
            "num_nodes": self.plan.num_nodes,
            "outer_dp": self.plan.outer_dp,
            "layers_per_stage": self.plan.layers_per_stage,
            "constraints": {c: self.constraint_results[c] for c in CONSTRAINTS},
            "feasible": self.feasible,
            "peak_stage0_bytes": self.peak_stage0_bytes,
            "estimated_mfu": self.estimated_mfu,
            "outer_dp_uncosted": self.outer_dp_uncosted,
        }


def check_plan(arch: ModelArch, run: TrainingRun, plan: ParallelPlan, platform: PlatformSpec, *,
               strict_node_locality: bool = False, activation_checkpointing: bool = False,
               flash_attention: bool = False, profile: Optional[BenchProfile] = None,
               estimator_kwargs: Optional[dict] = None) -> PlanVerdict:
    """Evaluate a plan against every constraint; infeasibility is a result, not an error.

    Memory fit uses the 1F1B stage-0 peak (shared experts included) plus framework
    overhead. ``strict_node_locality`` tightens EP locality from one switch group
    to one node.
    """
    g = platform.gpus_per_node
    results = {
        "gpu_count": plan.pp * plan.ep * plan.outer_dp == plan.num_nodes * g,
        "ep_divides_e": arch.num_experts % plan.ep == 0,
        "pp_leq_l": plan.pp <= arch.num_layers,
        "ep_locality": plan.ep <= (g if strict_node_locality else g * platform.nodes_per_switch_group),
    }
    peak = None
    if results["ep_divides_e"] and results["pp_leq_l"]:
        peak = peak_stage_memory(arch, run, plan, flash_attention=flash_attention, include_shared=True,
                                 activation_checkpointing=activation_checkpointing,
                                 platform=platform).total_bytes
    results["memory_fit"] = peak is not None and peak <= platform.hbm_bytes
    mfu = None
    if profile is not None and all(results.values()):
        mfu = estimate_step(arch, run, plan, platform, profile,
                            activation_checkpointing=activation_checkpointing,
                            **(estimator_kwargs or {})).mfu
    return PlanVerdict(plan=plan, constraint_results=results, peak_stage0_bytes=peak,
                       estimated_mfu=mfu, outer_dp_uncosted=plan.outer_dp > 1)


def divisor_pairs(n: int) -> List[tuple]:
    return [(p, n // p) for p in range(1, n + 1) if n % p == 0]


def _rank_key(v: PlanVerdict):
    primary = -v.estimated_mfu if v.estimated_mfu is not None else v.peak_stage0_bytes
    return (primary, v.plan.ep, v.plan.pp, v.plan.num_nodes)


def enumerate_plans(arch: ModelArch, run: TrainingRun, platform: PlatformSpec,
                    node_range: Iterable[int], *, outer_dp: int = 1,
                    profile: Optional[BenchProfile] = None, **check_kwargs) -> List[PlanVerdict]:
    """Every factorisation PP * EP = n * g / outer_dp for each n in ``node_range``.

    Feasible plans come first, best first (MFU descending with a profile, else
    stage-0 peak ascending; ties to smaller EP then smaller PP), followed by the
    infeasible ones in (n, PP) order.
    """
    nodes = list(node_range)
    if not nodes:
        raise ValueError("node_range is empty")
    verdicts = []
    for n in nodes:
        world, rem = divmod(n * platform.gpus_per_node, outer_dp)
        if rem:
            continue
        for pp, ep in divisor_pairs(world):
            plan = ParallelPlan.build(arch, pp, ep, n, outer_dp)
            verdicts.append(check_plan(arch, run, plan, platform, profile=profile, **check_kwargs))
    feasible = sorted((v for v in verdicts if v.feasible), key=_rank_key)
    rest = [v for v in verdicts if not v.feasible]
    return feasible + rest


def min_nodes(arch: ModelArch, run: TrainingRun, platform: PlatformSpec, max_nodes: int,
              **kwargs) -> Optional[int]:
    """Smallest node count in ``[1, max_nodes]`` admitting a feasible plan, else None."""
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    for n in range(1, max_nodes + 1):
        if any(v.feasible for v in enumerate_plans(arch, run, platform, [n], **kwargs)):
            return n
    return None
