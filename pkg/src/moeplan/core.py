"""Domain types shared by every other module, plus the model zoo fixtures.

All records are frozen dataclasses; equality is field-wise. Each one round-trips
through a flat JSON object whose keys are exactly the dataclass field names.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

T = TypeVar("T")


class ConfigError(ValueError):
    """Raised when a record violates one of its invariants."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _positive_int(name: str, value: Any) -> None:
    _require(isinstance(value, int) and not isinstance(value, bool) and value > 0,
             f"{name} must be a positive integer, got {value!r}")


def _nonneg_int(name: str, value: Any) -> None:
    _require(isinstance(value, int) and not isinstance(value, bool) and value >= 0,
             f"{name} must be a non-negative integer, got {value!r}")


@dataclass(frozen=True)
class ModelArch:
    d_model: int
    num_layers: int
    num_heads: int
    head_dim: int
    num_experts: int
    top_k: int
    ffn_dim_moe: int
    num_moe_layers: Optional[int] = None
    num_shared_experts: int = 0
    ffn_dim_dense: Optional[int] = None
    mats_per_expert: int = 3

    def __post_init__(self):
        for name in ("d_model", "num_layers", "num_heads", "head_dim", "num_experts",
                     "top_k", "ffn_dim_moe", "mats_per_expert"):
            _positive_int(name, getattr(self, name))
        _nonneg_int("num_shared_experts", self.num_shared_experts)
        if self.num_moe_layers is None:
            object.__setattr__(self, "num_moe_layers", self.num_layers)
        if self.ffn_dim_dense is None:
            object.__setattr__(self, "ffn_dim_dense", self.ffn_dim_moe)
        _nonneg_int("num_moe_layers", self.num_moe_layers)
        _positive_int("ffn_dim_dense", self.ffn_dim_dense)
        _require(self.num_heads * self.head_dim == self.d_model,
                 f"num_heads * head_dim = {self.num_heads * self.head_dim} != d_model = {self.d_model}")
        _require(self.top_k <= self.num_experts, "top_k must not exceed num_experts")
        _require(self.num_moe_layers <= self.num_layers, "num_moe_layers must not exceed num_layers")

    @property
    def num_dense_layers(self) -> int:
        return self.num_layers - self.num_moe_layers

    def layer_kinds(self) -> Tuple[str, ...]:
        """Layer kinds in model order; dense layers come first."""
        return ("dense",) * self.num_dense_layers + ("moe",) * self.num_moe_layers


@dataclass(frozen=True)
class TrainingRun:
    """Batch geometry of one optimizer step.

    ``global_batch`` is the number of sequences each expert-data-parallel rank
    sees per step (the ``b`` of the memory equations). ``global_batch`` need not
    be divisible by ``num_microbatches``: the memory model carries fractional
    microbatch sizes exactly.
    """

    seq_len: int
    global_batch: int
    num_microbatches: int = 1
    microbatch_mult: Optional[Fraction] = None
    bytes_per_param: int = 16
    activation_bytes: int = 2

    def __post_init__(self):
        _nonneg_int("seq_len", self.seq_len)
        _nonneg_int("global_batch", self.global_batch)
        _positive_int("num_microbatches", self.num_microbatches)
        _positive_int("bytes_per_param", self.bytes_per_param)
        _positive_int("activation_bytes", self.activation_bytes)
        if self.microbatch_mult is not None:
            mult = Fraction(self.microbatch_mult)
            _require(mult > 0, "microbatch_mult must be positive")
            object.__setattr__(self, "microbatch_mult", mult)

    def microbatches(self, pp: int) -> int:
        """Microbatch count M for a pipeline of depth ``pp`` (M = alpha * PP when alpha is set)."""
        if self.microbatch_mult is None:
            return self.num_microbatches
        m = self.microbatch_mult * pp
        _require(m.denominator == 1 and m >= 1,
                 f"microbatch_mult {self.microbatch_mult} * PP {pp} is not a positive integer")
        return int(m)

    def microbatch_size(self, pp: int = 1) -> Fraction:
        return Fraction(self.global_batch, self.microbatches(pp))


@dataclass(frozen=True)
class PlatformSpec:
    gpus_per_node: int
    hbm_bytes: int
    nics_per_node: int
    nic_bandwidth: float
    intra_node_bandwidth: float
    intra_group_bandwidth: float
    inter_group_bandwidth: float
    peak_gpu_flops: float
    # seconds per message: (intra-node, intra-switch-group, inter-group)
    per_message_latency: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    framework_overhead_bytes: int = 0
    nodes_per_switch_group: int = 4
    groups_per_rack: int = 4
    inter_rack_bandwidth: Optional[float] = None
    migration_bandwidth: float = 50e9

    def __post_init__(self):
        for name in ("gpus_per_node", "hbm_bytes", "nics_per_node", "nodes_per_switch_group",
                     "groups_per_rack"):
            _positive_int(name, getattr(self, name))
        _nonneg_int("framework_overhead_bytes", self.framework_overhead_bytes)
        for name in ("nic_bandwidth", "intra_node_bandwidth", "intra_group_bandwidth",
                     "inter_group_bandwidth", "peak_gpu_flops", "migration_bandwidth"):
            _require(getattr(self, name) > 0, f"{name} must be > 0")
        lat = tuple(float(x) for x in self.per_message_latency)
        _require(len(lat) == 3 and all(x >= 0 for x in lat),
                 "per_message_latency needs three non-negative values")
        object.__setattr__(self, "per_message_latency", lat)
        if self.inter_rack_bandwidth is None:
            object.__setattr__(self, "inter_rack_bandwidth", self.inter_group_bandwidth)
        _require(self.inter_rack_bandwidth > 0, "inter_rack_bandwidth must be > 0")

    @property
    def fast_domain_gpus(self) -> int:
        return self.gpus_per_node * self.nodes_per_switch_group


@dataclass(frozen=True)
class ParallelPlan:
    pp: int
    ep: int
    num_nodes: int
    layers_per_stage: int
    outer_dp: int = 1

    def __post_init__(self):
        for name in ("pp", "ep", "num_nodes", "layers_per_stage", "outer_dp"):
            _positive_int(name, getattr(self, name))

    @classmethod
    def build(cls, arch: ModelArch, pp: int, ep: int, num_nodes: int, outer_dp: int = 1) -> "ParallelPlan":
        # uneven splits give the extra layers to the leading stages
        return cls(pp=pp, ep=ep, num_nodes=num_nodes,
                   layers_per_stage=max(1, math.ceil(arch.num_layers / pp)), outer_dp=outer_dp)

    @property
    def world_size(self) -> int:
        return self.pp * self.ep

    def label(self) -> str:
        return f"{self.pp}x{self.ep}"


def stage_layer_counts(num_layers: int, pp: int) -> Tuple[int, ...]:
    """Contiguous stage sizes; the first ``num_layers % pp`` stages carry one extra layer."""
    base, extra = divmod(num_layers, pp)
    return tuple(base + (1 if i < extra else 0) for i in range(pp))


# ---------------------------------------------------------------------------
# JSON round-trip

def _encode(value: Any) -> Any:
    if isinstance(value, Fraction):
        return str(value) if value.denominator != 1 else value.numerator
    if isinstance(value, tuple):
        return [_encode(v) for v in value]
    return value


def to_dict(record: Any) -> Dict[str, Any]:
    return {f.name: _encode(getattr(record, f.name)) for f in dataclasses.fields(record)}


def from_dict(cls: Type[T], data: Mapping[str, Any]) -> T:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = dict(data)
    if cls is TrainingRun and kwargs.get("microbatch_mult") is not None:
        kwargs["microbatch_mult"] = Fraction(kwargs["microbatch_mult"])
    if cls is PlatformSpec and "per_message_latency" in kwargs:
        kwargs["per_message_latency"] = tuple(kwargs["per_message_latency"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def dumps(record: Any) -> str:
    return json.dumps(to_dict(record), indent=2, sort_keys=True)


def load_json(cls: Type[T], path: Union[str, Path]) -> T:
    with open(path) as fh:
        return from_dict(cls, json.load(fh))


# ---------------------------------------------------------------------------
# fixtures

def tiny_fixture() -> Tuple[ModelArch, TrainingRun]:
    """The small hand-checkable instance used throughout the test suite."""
    arch = ModelArch(d_model=4, num_layers=2, num_heads=2, head_dim=2, num_experts=4,
                     top_k=1, ffn_dim_moe=8, num_shared_experts=0, mats_per_expert=3)
    run = TrainingRun(seq_len=2, global_batch=1, num_microbatches=2, bytes_per_param=16)
    return arch, run


def frontier_like_platform(**overrides: Any) -> PlatformSpec:
    """A Frontier-shaped preset (8 GCDs, 4 NICs per node, 4-node switch groups).

    Bandwidths and latencies are plausible round numbers, not measurements.
    """
    params: Dict[str, Any] = dict(
        gpus_per_node=8,
        hbm_bytes=64 * 2**30,
        nics_per_node=4,
        nic_bandwidth=25e9,
        intra_node_bandwidth=200e9,
        intra_group_bandwidth=100e9,
        inter_group_bandwidth=50e9,
        inter_rack_bandwidth=25e9,
        peak_gpu_flops=191.5e12,
        per_message_latency=(2e-6, 4e-6, 8e-6),
        framework_overhead_bytes=0,
        nodes_per_switch_group=4,
        groups_per_rack=4,
    )
    params.update(overrides)
    return PlatformSpec(**params)


@dataclass(frozen=True)
class ZooEntry:
    """One row of the published MoE configuration table.

    ``arch`` is None when the table leaves layer count or hidden size undisclosed.
    ``approximate`` names fields the table marks with ``~``; ``assumed`` names arch
    fields the table does not give at all (attention heads, dense FFN width),
    filled from public model cards so the record is usable.
    """

    name: str
    total_params: str
    active_params: str
    total_experts: int
    routing: str
    context: str
    train_tokens: Optional[str]
    arch: Optional[ModelArch]
    approximate: frozenset = field(default_factory=frozenset)
    absent: frozenset = field(default_factory=frozenset)
    assumed: frozenset = field(default_factory=frozenset)

    @property
    def exact(self) -> bool:
        return self.arch is not None and not self.approximate

    def __getattr__(self, name: str) -> Any:
        # zoo["deepseek-v3"].d_model reads through to the architecture
        arch = self.__dict__.get("arch")
        if arch is not None and name in ModelArch.__dataclass_fields__:
            return getattr(arch, name)
        raise AttributeError(name)


_ASSUMED = frozenset({"num_heads", "head_dim", "ffn_dim_dense"})


def _arch(d, L, H, E, k, dffn, shared=0):
    return ModelArch(d_model=d, num_layers=L, num_heads=H, head_dim=d // H, num_experts=E,
                     top_k=k, ffn_dim_moe=dffn, num_shared_experts=shared)


def load_model_zoo() -> Dict[str, ZooEntry]:
    rows = [
        ZooEntry("deepseek-v2", "236B", "21B", 162, "6R+2S", "128K", "8.1T",
                 _arch(5120, 60, 128, 160, 6, 1536, shared=2), assumed=_ASSUMED),
        ZooEntry("deepseek-v3", "671B", "37B", 257, "8R+1S", "128K", "14.8T",
                 _arch(7168, 61, 128, 256, 8, 2048, shared=1), assumed=_ASSUMED),
        ZooEntry("deepseek-v3.2", "671B", "37B", 257, "8R+1S", "128K", None,
                 _arch(7168, 61, 128, 256, 8, 2048, shared=1), assumed=_ASSUMED,
                 absent=frozenset({"train_tokens"})),
        ZooEntry("mixtral-8x7b", "~47B", "~13B", 8, "top-2", "32K", None,
                 _arch(4096, 32, 32, 8, 2, 14336), assumed=_ASSUMED,
                 absent=frozenset({"train_tokens"})),
        ZooEntry("mixtral-8x22b", "141B", "39B", 8, "top-2", "64K", None,
                 _arch(6144, 56, 48, 8, 2, 16384), assumed=_ASSUMED,
                 absent=frozenset({"train_tokens"})),
        ZooEntry("qwen3-30b-a3b", "30B", "3B", 128, "top-8", "128K", "~36T",
                 _arch(2048, 48, 32, 128, 8, 768), assumed=_ASSUMED),
        ZooEntry("qwen3-235b-a22b", "235B", "22B", 128, "top-8", "128K", "~36T",
                 _arch(7168, 94, 64, 128, 8, 2048), assumed=_ASSUMED),
        ZooEntry("llama-4-scout", "109B", "17B", 17, "1R+1S", "10M", "40T",
                 _arch(5120, 48, 40, 16, 1, 8192, shared=1), assumed=_ASSUMED,
                 approximate=frozenset({"num_layers", "d_model", "ffn_dim_moe"})),
        ZooEntry("llama-4-maverick", "400B", "17B", 129, "1R+1S", "1M", "40T",
                 _arch(5120, 48, 40, 128, 1, 8192, shared=1), assumed=_ASSUMED,
                 approximate=frozenset({"num_layers", "d_model", "ffn_dim_moe"})),
        ZooEntry("arctic", "480B", "17B", 128, "top-2", "128K", "3.5T", None,
                 approximate=frozenset({"ffn_dim_moe"}),
                 absent=frozenset({"num_layers", "d_model"})),
        ZooEntry("kimi-k2", "~1T", "32B", 384, "top-8", "128K", "15.5T",
                 _arch(7168, 61, 64, 384, 8, 2048), assumed=_ASSUMED),
    ]
    return {row.name: row for row in rows}
