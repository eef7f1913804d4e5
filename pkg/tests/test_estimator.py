from fractions import Fraction

import pytest

from moeplan import benchdata
from moeplan.benchdata import BenchProfile, MissingSeriesError
from moeplan.core import ConfigError, ModelArch, ParallelPlan, TrainingRun, frontier_like_platform
from moeplan.estimator import bubble_fraction, estimate_step, mfu_from_factors

ARCH = ModelArch(d_model=256, num_layers=8, num_heads=4, head_dim=64, num_experts=16, top_k=2, ffn_dim_moe=512)
PROFILE = benchdata.synthetic_profile(attention_series=("64",), gemm_series=("256x512",))


def est(pp, ep, **kw):
    run = kw.pop("run", TrainingRun(seq_len=1024, global_batch=8, microbatch_mult=2))
    plan = ParallelPlan.build(ARCH, pp, ep, max(1, pp * ep // 8))
    return estimate_step(ARCH, run, plan, frontier_like_platform(), kw.pop("profile", PROFILE), **kw)


def test_bubble_fraction():
    assert bubble_fraction(4, 4) == Fraction(3, 7)
    assert bubble_fraction(1, 9) == 0
    with pytest.raises(ValueError):
        bubble_fraction(0, 1)


def test_identity_and_factors():
    e = est(2, 8)
    assert e.identity_residual() <= 1e-12
    assert e.mfu == pytest.approx(mfu_from_factors(e.hardware_efficiency, e.compute_fraction))
    assert e.t_compute == pytest.approx(e.t_attention + e.t_expert)
    assert e.t_comm == pytest.approx(e.t_dispatch + e.t_combine + e.t_p2p)
    assert e.num_gpus == 16
    assert 0 < e.mfu < 1


def test_no_comm_without_parallelism():
    e = est(1, 1)
    assert e.t_comm == 0 and e.bubble_fraction == 0 and e.compute_fraction == 1.0


def test_checkpointing_costs_a_third_more_compute():
    base, ck = est(2, 4), est(2, 4, activation_checkpointing=True)
    assert ck.t_compute == pytest.approx(base.t_compute * 4 / 3)
    assert ck.mfu < base.mfu


def test_more_microbatches_shrink_the_bubble():
    few = est(4, 2, run=TrainingRun(seq_len=1024, global_batch=8, microbatch_mult=1))
    many = est(4, 2, run=TrainingRun(seq_len=1024, global_batch=8, microbatch_mult=2))
    assert many.bubble_fraction < few.bubble_fraction


def test_series_resolution():
    two = benchdata.synthetic_profile(attention_series=("64", "128"), gemm_series=("a", "b"))
    with pytest.raises(MissingSeriesError, match="gemm"):
        est(1, 1, profile=two)
    assert est(1, 1, profile=two, gemm_series="a").mfu > 0
    with pytest.raises(MissingSeriesError):
        est(1, 1, profile=two, gemm_series="zzz")


def test_degenerate_mfu_is_one():
    flat = ((1, 100.0), (10**6, 100.0))
    ideal = BenchProfile(attention_curves={("64", 1): flat}, gemm_curves={("256x512", 1): flat})
    e = est(1, 1, profile=ideal, run=TrainingRun(seq_len=512, global_batch=1))
    assert e.mfu == 1.0


def test_invalid_plans():
    with pytest.raises(ConfigError):
        est(1, 3)
    with pytest.raises(ConfigError):
        estimate_step(ARCH, TrainingRun(seq_len=8, global_batch=1), ParallelPlan(16, 1, 2, 1),
                      frontier_like_platform(), PROFILE)
