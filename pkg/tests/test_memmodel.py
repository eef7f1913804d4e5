import warnings
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import memory_oracle as oracle
from moeplan import memmodel
from moeplan.core import ConfigError, ModelArch, ParallelPlan, TrainingRun, frontier_like_platform, tiny_fixture


@pytest.fixture
def tiny():
    return tiny_fixture()


def test_tiny_values(tiny):
    arch, run = tiny
    und = memmodel.undivided_memory(arch, run)
    assert und.total_bytes == 14816
    assert (und.attn_params_bytes, und.expert_params_bytes) == (2048, 12288)
    assert memmodel.edp_memory(arch, run, 2).total_bytes == 8560
    plan = ParallelPlan.build(arch, 2, 2, 1)
    assert memmodel.gpipe_memory(arch, run, plan).total_bytes == 4280
    stages = memmodel.ofob_all_stages(arch, run, plan)
    assert [s.total_bytes for s in stages] == [4280, 4188]
    assert memmodel.stage_memory_skew(arch, run, plan) == 92


def test_flash_attention_drops_quadratic_term(tiny):
    arch, _ = tiny
    run = TrainingRun(seq_len=64, global_batch=2)
    plain = memmodel.undivided_memory(arch, run)
    flash = memmodel.undivided_memory(arch, run, flash_attention=True)
    H, b, s, L = arch.num_heads, 2, 64, arch.num_layers
    assert plain.attn_activation_bytes - flash.attn_activation_bytes == L * (4 * H * b * s * s - 2 * H * b * s)


def test_activation_checkpointing_removes_attention_activations(tiny):
    arch, run = tiny
    plan = ParallelPlan.build(arch, 2, 2, 1)
    ck = memmodel.ofob_stage_memory(arch, run, plan, 0, activation_checkpointing=True)
    assert ck.attn_activation_bytes == 0
    assert ck.total_bytes < memmodel.ofob_stage_memory(arch, run, plan, 0).total_bytes


def test_framework_overhead_added_once(tiny):
    arch, run = tiny
    p = frontier_like_platform(framework_overhead_bytes=1000)
    assert memmodel.undivided_memory(arch, run, platform=p).total_bytes == 15816


def test_shared_experts_only_when_requested():
    arch = ModelArch(d_model=4, num_layers=2, num_heads=2, head_dim=2, num_experts=4, top_k=1, ffn_dim_moe=8,
                     num_shared_experts=1)
    run = TrainingRun(seq_len=2, global_batch=1)
    base = memmodel.edp_memory(arch, run, 2)
    shared = memmodel.edp_memory(arch, run, 2, include_shared=True)
    # one replicated expert per layer: 16 * 3 d dffn params plus its activations
    assert shared.expert_params_bytes - base.expert_params_bytes == 2 * 16 * 3 * 4 * 8
    assert shared.expert_activation_bytes > base.expert_activation_bytes


def test_validation(tiny):
    arch, run = tiny
    with pytest.raises(ConfigError):
        memmodel.edp_memory(arch, run, 3)
    with pytest.raises(ConfigError):
        memmodel.gpipe_memory(arch, run, ParallelPlan(pp=3, ep=1, num_nodes=1, layers_per_stage=1))
    with pytest.raises(ConfigError):
        memmodel.ofob_stage_memory(arch, run, ParallelPlan.build(arch, 2, 2, 1), 2)


def test_underfilled_pipeline_warns(tiny):
    arch, _ = tiny
    run = TrainingRun(seq_len=2, global_batch=1, num_microbatches=1)
    with pytest.warns(UserWarning, match="cannot fill"):
        memmodel.ofob_stage_memory(arch, run, ParallelPlan.build(arch, 2, 2, 1), 0)


def test_uneven_split_peak_is_stage_zero():
    arch = ModelArch(d_model=8, num_layers=7, num_heads=2, head_dim=4, num_experts=4, top_k=2, ffn_dim_moe=16)
    run = TrainingRun(seq_len=4, global_batch=4, num_microbatches=4)
    plan = ParallelPlan.build(arch, 3, 2, 1)
    peak = memmodel.peak_stage_memory(arch, run, plan)
    stages = memmodel.ofob_all_stages(arch, run, plan, allow_uneven=True)
    assert peak.total_bytes == max(s.total_bytes for s in stages) == stages[0].total_bytes
    with pytest.raises(ConfigError):
        memmodel.ofob_stage_memory(arch, run, plan, 0)


def test_breakdown_dict(tiny):
    d = memmodel.undivided_memory(*tiny).to_dict()
    assert d["total_bytes"] == 14816
    assert sum(d[k] for k in ("attn_params_bytes", "expert_params_bytes", "attn_activation_bytes",
                              "expert_activation_bytes")) == 14816


configs = st.builds(
    dict,
    h=st.integers(1, 4), hd=st.integers(1, 8), L=st.integers(1, 12), E=st.sampled_from([1, 2, 4, 8, 16]),
    k=st.integers(1, 4), dffn=st.integers(1, 64), b=st.integers(1, 8), s=st.integers(1, 64),
    M=st.integers(1, 8), pp=st.integers(1, 12), ep=st.sampled_from([1, 2, 4, 8, 16]),
)


def _build(c):
    assume(c["k"] <= c["E"] and c["L"] % c["pp"] == 0 and c["E"] % c["ep"] == 0)
    arch = ModelArch(d_model=c["h"] * c["hd"], num_layers=c["L"], num_heads=c["h"], head_dim=c["hd"],
                     num_experts=c["E"], top_k=c["k"], ffn_dim_moe=c["dffn"])
    run = TrainingRun(seq_len=c["s"], global_batch=c["b"], num_microbatches=c["M"])
    return arch, run, ParallelPlan.build(arch, c["pp"], c["ep"], 1)


@settings(max_examples=200, deadline=None)
@given(configs)
def test_matches_oracle(c):
    arch, run, plan = _build(c)
    dims = dict(d=arch.d_model, L=arch.num_layers, H=arch.num_heads, E=arch.num_experts, k=arch.top_k,
                dffn=arch.ffn_dim_moe, b=run.global_batch, s=run.seq_len)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(plan.pp):
            got = memmodel.ofob_stage_memory(arch, run, plan, i).exact_total
            assert got == oracle.ofob(**dims, PP=plan.pp, EP=plan.ep, M=c["M"], i=i)


@settings(max_examples=200, deadline=None)
@given(configs)
def test_monotonicity(c):
    arch, run, plan = _build(c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stages = [s.exact_total for s in memmodel.ofob_all_stages(arch, run, plan)]
        # later stages hold fewer in-flight microbatches
        assert all(a >= b for a, b in zip(stages, stages[1:]))
        # more expert parallelism never costs memory
        if plan.ep > 1:
            assert (memmodel.edp_memory(arch, run, plan.ep).exact_total
                    <= memmodel.edp_memory(arch, run, 1).exact_total)
        # every microbatch alive at once is the worst case
        assert memmodel.gpipe_memory(arch, run, plan).exact_total >= stages[0] or c["M"] < plan.pp


def test_fractional_microbatch_is_exact():
    arch, _ = tiny_fixture()
    run = TrainingRun(seq_len=3, global_batch=1, num_microbatches=3)
    mem = memmodel.ofob_stage_memory(arch, run, ParallelPlan.build(arch, 2, 4, 1), 1)
    assert isinstance(mem.exact_total, Fraction)
    assert mem.total_bytes >= mem.exact_total
