"""Expert load tracking and hill-climbing swap rebalancing across an EP group."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .commmodel import MigrationPlanCost, migration_cost
from .core import ConfigError, ModelArch, PlatformSpec

TRACE_HEADER = ("step", "layer", "expert", "tokens")
SIDECAR_HEADER = ("expert", "group")


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class LoadState:
    """Per-expert token counts grouped by owning GPU.

    ``experts[k][i]`` is the id of the expert whose load is ``groups[k][i]``;
    when omitted, ids are assigned 0, 1, 2, ... in reading order.
    """

    groups: Tuple[Tuple[int, ...], ...]
    experts: Optional[Tuple[Tuple[int, ...], ...]] = None
    step: int = 0
    layer: int = 0

    def __post_init__(self):
        groups = tuple(tuple(int(x) for x in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if self.experts is None:
            ids, nxt = [], 0
            for g in groups:
                ids.append(tuple(range(nxt, nxt + len(g))))
                nxt += len(g)
            object.__setattr__(self, "experts", tuple(ids))
        else:
            object.__setattr__(self, "experts", tuple(tuple(int(e) for e in g) for g in self.experts))
        if [len(g) for g in groups] != [len(g) for g in self.experts]:
            raise ConfigError("expert ids must mirror the load groups")
        flat = [e for g in self.experts for e in g]
        if len(set(flat)) != len(flat):
            raise ConfigError("an expert appears in more than one slot")
        if any(x < 0 for g in groups for x in g):
            raise ConfigError("token counts must be non-negative")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def sums(self) -> List[int]:
        return [sum(g) for g in self.groups]

    @property
    def imbalance(self) -> int:
        s = self.sums
        return max(s) - min(s) if s else 0

    @property
    def mean(self) -> Fraction:
        return Fraction(sum(self.sums), max(self.num_groups, 1))

    def loads_by_expert(self) -> Dict[int, int]:
        return {e: x for eg, lg in zip(self.experts, self.groups) for e, x in zip(eg, lg)}

    def with_assignment(self, experts: Sequence[Sequence[int]]) -> "LoadState":
        """Same per-expert loads laid out under another expert-to-GPU assignment."""
        loads = self.loads_by_expert()
        return LoadState(tuple(tuple(loads.get(e, 0) for e in g) for g in experts),
                         tuple(tuple(g) for g in experts), self.step, self.layer)


@dataclass(frozen=True)
class Swap:
    iteration: int
    heavy_group: int
    light_group: int
    heavy_index: int
    light_index: int
    heavy_expert: int
    light_expert: int
    delta_before: int
    delta_after: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RebalanceResult:
    new_groups: Tuple[Tuple[int, ...], ...]
    new_experts: Tuple[Tuple[int, ...], ...]
    swap_count: int
    swap_list: Tuple[Swap, ...]
    initial_imbalance: int
    final_imbalance: int
    iterations: int
    delta_history: Tuple[int, ...] = field(default=())
    migration: Optional[MigrationPlanCost] = None

    @property
    def state(self) -> LoadState:
        return LoadState(self.new_groups, self.new_experts)

    def experts_sent_per_gpu(self, num_groups: int) -> List[int]:
        counts = [0] * num_groups
        for s in self.swap_list:
            counts[s.heavy_group] += 1
            counts[s.light_group] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "new_groups": [list(g) for g in self.new_groups],
            "new_experts": [list(g) for g in self.new_experts],
            "swap_count": self.swap_count,
            "swaps": [s.to_dict() for s in self.swap_list],
            "initial_imbalance": self.initial_imbalance,
            "final_imbalance": self.final_imbalance,
            "iterations": self.iterations,
            "delta_history": list(self.delta_history),
            "migration": self.migration.to_dict() if self.migration else None,
        }


def _argmax(xs):
    return max(range(len(xs)), key=lambda k: (xs[k], -k))


def _argmin(xs):
    return min(range(len(xs)), key=lambda k: (xs[k], k))


def rebalance(state: LoadState, max_iters: int = 100, *, arch: Optional[ModelArch] = None,
              platform: Optional[PlatformSpec] = None) -> RebalanceResult:
    """Greedy swaps between the heaviest and lightest GPU until no swap lowers the gap.

    Each iteration takes the single swap with the largest reduction of
    ``max - min`` group load; ties go to the first pair in scan order, and
    group ties to the lowest index. Local search, so not globally optimal.
    With ``arch`` the result carries the cost of moving both experts of every swap.
    """
    if state.num_groups < 2:
        raise ConfigError("rebalancing needs at least two groups")
    if any(not g for g in state.groups):
        raise ConfigError("every group must hold at least one expert")
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")

    loads = [list(g) for g in state.groups]
    ids = [list(g) for g in state.experts]
    sums = [sum(g) for g in loads]
    initial = max(sums) - min(sums)
    swaps: List[Swap] = []
    history = [initial]
    it = 0
    for it in range(1, max_iters + 1):
        hi, lo = _argmax(sums), _argmin(sums)
        delta = sums[hi] - sums[lo]
        best, best_gain = None, 0
        for i, n1 in enumerate(loads[hi]):
            for j, n2 in enumerate(loads[lo]):
                d2 = abs((sums[hi] - n1 + n2) - (sums[lo] - n2 + n1))
                if d2 < delta and delta - d2 > best_gain:
                    best_gain, best = delta - d2, (i, j)
        if best is None:
            break
        i, j = best
        n1, n2 = loads[hi][i], loads[lo][j]
        loads[hi][i], loads[lo][j] = n2, n1
        ids[hi][i], ids[lo][j] = ids[lo][j], ids[hi][i]
        sums[hi] += n2 - n1
        sums[lo] += n1 - n2
        after = max(sums) - min(sums)
        swaps.append(Swap(it, hi, lo, i, j, ids[lo][j], ids[hi][i], delta, after))
        history.append(after)
    else:
        it = max_iters

    result = RebalanceResult(
        new_groups=tuple(map(tuple, loads)), new_experts=tuple(map(tuple, ids)),
        swap_count=len(swaps), swap_list=tuple(swaps), initial_imbalance=initial,
        final_imbalance=max(sums) - min(sums), iterations=it, delta_history=tuple(history))
    if arch is not None:
        result = replace(result, migration=swap_migration_cost(result, state.num_groups, arch, platform))
    return result


def swap_migration_cost(result: RebalanceResult, num_groups: int, arch: ModelArch,
                        platform: Optional[PlatformSpec] = None) -> MigrationPlanCost:
    """Both experts of a swap move; the busiest GPU sets the latency."""
    per_gpu = max(result.experts_sent_per_gpu(num_groups), default=0)
    cost = migration_cost(arch, per_gpu, platform)
    return replace(cost, experts_moved=2 * result.swap_count)


def should_migrate(state: LoadState, threshold: float) -> bool:
    if not threshold > 0:
        raise ValueError("threshold must be > 0")
    mean = state.mean
    if mean == 0:
        return False
    return state.imbalance / mean > threshold


# ---------------------------------------------------------------------------
# traces

def _read_sidecar(path) -> Dict[int, int]:
    mapping: Dict[int, int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty group sidecar")
        if tuple(h.strip() for h in header) != SIDECAR_HEADER:
            raise TraceError(f"{path}:1: expected header {','.join(SIDECAR_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                e, g = (int(x) for x in row)
            except ValueError:
                raise TraceError(f"{path}:{lineno}: expected two integers, got {row}") from None
            if e in mapping:
                raise TraceError(f"{path}:{lineno}: expert {e} assigned twice")
            mapping[e] = g
    return mapping


def ingest_load_trace(path, *, layer: Optional[int] = None, sidecar=None, ep: Optional[int] = None,
                      num_experts: Optional[int] = None) -> List[LoadState]:
    """Read a ``step,layer,expert,tokens`` CSV into one LoadState per step.

    Experts map to GPUs through a ``expert,group`` sidecar, or round-robin
    (``expert % ep``) without one. Steps must not decrease. Experts absent from
    a step count as zero load.
    """
    if sidecar is None and ep is None:
        raise ConfigError("either a group sidecar or ep is required")
    assignment = _read_sidecar(sidecar) if sidecar is not None else None
    if os.path.getsize(path) == 0:
        return []

    rows: List[Tuple[int, int, int, int, int]] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
        last_step = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                step, lyr, expert, tokens = (int(x) for x in row)
            except ValueError:
                raise TraceError(f"{path}:{lineno}: expected four integers, got {row}") from None
            if tokens < 0:
                raise TraceError(f"{path}:{lineno}: negative token count")
            if last_step is not None and step < last_step:
                raise TraceError(f"{path}:{lineno}: step {step} after step {last_step}")
            last_step = step
            if assignment is not None and expert not in assignment:
                raise TraceError(f"{path}:{lineno}: unknown expert {expert}")
            if num_experts is not None and not 0 <= expert < num_experts:
                raise TraceError(f"{path}:{lineno}: unknown expert {expert}")
            rows.append((lineno, step, lyr, expert, tokens))

    layers = sorted({r[2] for r in rows})
    if not rows:
        return []
    if layer is None:
        if len(layers) > 1:
            raise TraceError(f"{path}: trace holds layers {layers}; choose one")
        layer = layers[0]
    rows = [r for r in rows if r[2] == layer]

    if assignment is None:
        top = num_experts if num_experts is not None else max(r[3] for r in rows) + 1
        assignment = {e: e % ep for e in range(top)}
    k = max(assignment.values()) + 1
    experts = tuple(tuple(sorted(e for e, g in assignment.items() if g == grp)) for grp in range(k))

    states: List[LoadState] = []
    current, loads = None, {}
    for _, step, _, expert, tokens in rows + [(None, None, None, None, None)]:
        if step != current and current is not None:
            states.append(LoadState(tuple(tuple(loads.get(e, 0) for e in g) for g in experts),
                                    experts, current, layer))
            loads = {}
        if step is None:
            break
        current = step
        loads[expert] = loads.get(expert, 0) + tokens
    return states


def write_load_trace(states: Sequence[LoadState]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for st in states:
        for e, x in sorted(st.loads_by_expert().items()):
            w.writerow((st.step, st.layer, e, x))
    return buf.getvalue()


def synthetic_skewed_trace(num_experts: int, ep: int, steps: int, *,
                           hot_experts: Optional[Sequence[int]] = None, base_tokens: int = 1000,
                           growth: int = 50, noise: int = 0, seed: int = 0) -> List[LoadState]:
    """Round-robin placed experts where the hot experts gain ``growth`` tokens per step in total.

    The default hot set is the first two experts of GPU 0, so swapping one away
    helps; a lone hot expert cannot be fixed by any swap. With ``noise=0`` the
    gap grows by exactly ``growth`` each step.
    """
    if num_experts % ep:
        raise ConfigError("ep must divide num_experts")
    if hot_experts is None:
        hot_experts = (0, ep) if num_experts > ep else (0,)
    hot = list(hot_experts)
    if any(not 0 <= e < num_experts for e in hot):
        raise ConfigError("hot expert out of range")
    rng = np.random.default_rng(seed)
    experts = tuple(tuple(range(g, num_experts, ep)) for g in range(ep))
    out = []
    for step in range(steps):
        jitter = rng.integers(0, noise + 1, size=num_experts) if noise else np.zeros(num_experts, int)
        loads = {e: base_tokens + int(jitter[e]) for e in range(num_experts)}
        extra = growth * step
        for n, e in enumerate(hot):
            loads[e] += extra // len(hot) + (1 if n < extra % len(hot) else 0)
        out.append(LoadState(tuple(tuple(loads[e] for e in g) for g in experts), experts, step, 0))
    return out


@dataclass(frozen=True)
class OverheadReport:
    fraction: float
    triggers: Tuple[int, ...]
    total_migration_seconds: float
    results: Tuple[RebalanceResult, ...] = ()

    def to_dict(self) -> dict:
        return {
            "overhead_fraction": self.fraction,
            "trigger_steps": list(self.triggers),
            "total_migration_seconds": self.total_migration_seconds,
            "rebalances": [r.to_dict() for r in self.results],
        }


def replay_trace(trace: Sequence[LoadState], threshold: float, arch: ModelArch,
                 platform: Optional[PlatformSpec] = None, step_time: float = 1.0,
                 max_iters: int = 100) -> OverheadReport:
    """Scheduler loop: after every triggered rebalance the new placement carries forward."""
    if not step_time > 0:
        raise ValueError("step_time must be > 0")
    if not trace:
        return OverheadReport(0.0, (), 0.0)
    layout = trace[0].experts
    total = Fraction(0)
    triggers, results = [], []
    for st in trace:
        st = st.with_assignment(layout)
        if should_migrate(st, threshold):
            res = rebalance(st, max_iters, arch=arch, platform=platform)
            if res.swap_count:
                total += res.migration.latency_seconds
                triggers.append(st.step)
                results.append(res)
                layout = res.new_experts
    frac = float(total / (Fraction(len(trace)) * Fraction(step_time)))
    return OverheadReport(frac, tuple(triggers), float(total), tuple(results))


def amortized_overhead(trace: Sequence[LoadState], threshold: float, arch: ModelArch,
                       platform: Optional[PlatformSpec] = None, step_time: float = 1.0) -> float:
    """Migration time spent over the trace as a fraction of its training time."""
    return replay_trace(trace, threshold, arch, platform, step_time).fraction
