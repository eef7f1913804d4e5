from fractions import Fraction

import pytest

from moeplan import rebalancer
from moeplan.core import ConfigError, frontier_like_platform, load_model_zoo
from moeplan.rebalancer import LoadState, TraceError

MIXTRAL = load_model_zoo()["mixtral-8x7b"].arch


def test_documented_examples():
    r = rebalancer.rebalance(LoadState([[4, 3], [2, 1]]))
    assert r.new_groups == ((2, 3), (4, 1))
    assert (r.swap_count, r.initial_imbalance, r.final_imbalance) == (1, 4, 0)
    assert r.swap_list[0].heavy_expert == 0 and r.swap_list[0].light_expert == 2
    assert r.new_experts == ((2, 1), (0, 3))
    assert rebalancer.rebalance(LoadState([[2, 2], [2, 2]])).swap_count == 0
    stuck = rebalancer.rebalance(LoadState([[5, 1], [2, 2]]))
    assert stuck.swap_count == 0 and stuck.new_groups == ((5, 1), (2, 2))


def test_tie_breaks_prefer_first_pair_and_lowest_group():
    # swapping either 3 with 1 gives the same gain; the first in scan order wins
    r = rebalancer.rebalance(LoadState([[3, 3], [1, 1]]))
    assert (r.swap_list[0].heavy_index, r.swap_list[0].light_index) == (0, 0)
    # one expert per group: a swap only exchanges sums, never a strict gain
    assert rebalancer.rebalance(LoadState([[5], [5], [1], [1]])).swap_count == 0


def test_greedy_is_not_globally_optimal():
    groups = [[11, 2, 1], [16, 17, 15, 14]]
    r = rebalancer.rebalance(LoadState(groups))
    assert r.final_imbalance == 6
    assert r.swap_count == 2
    # two different swaps reach a gap of 4
    alt = LoadState([[11, 15, 14], [16, 17, 2, 1]])
    assert alt.imbalance == 4


def test_max_iters_respected():
    r = rebalancer.rebalance(LoadState([[100, 90, 80], [1, 2, 3], [5, 5, 5]]), max_iters=1)
    assert r.swap_count <= 1 and r.iterations == 1


def test_errors():
    with pytest.raises(ConfigError):
        rebalancer.rebalance(LoadState([[1, 2]]))
    with pytest.raises(ConfigError):
        rebalancer.rebalance(LoadState([[1], []]))
    with pytest.raises(ConfigError):
        LoadState([[1]], experts=[[0, 1]])
    with pytest.raises(ConfigError):
        LoadState([[-1], [2]])


def test_should_migrate():
    assert rebalancer.should_migrate(LoadState([[10], [0]]), 0.5)
    assert not rebalancer.should_migrate(LoadState([[3], [3]]), 0.01)
    assert not rebalancer.should_migrate(LoadState([[0], [0]]), 0.5)
    assert not rebalancer.should_migrate(LoadState([[10], [0]]), 1e12)
    with pytest.raises(ValueError):
        rebalancer.should_migrate(LoadState([[1], [0]]), 0)


def test_migration_counts_both_endpoints():
    r = rebalancer.rebalance(LoadState([[4, 3], [2, 1]]), arch=MIXTRAL)
    assert r.migration.experts_moved == 2
    assert r.migration.bytes_per_gpu == 48 * 4096 * 14336
    assert r.experts_sent_per_gpu(2) == [1, 1]


def test_ingest_round_robin(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("step,layer,expert,tokens\n0,0,0,10\n0,0,1,11\n0,0,2,12\n0,0,3,13\n")
    (state,) = rebalancer.ingest_load_trace(path, ep=2)
    assert state.groups == ((10, 12), (11, 13))
    assert state.experts == ((0, 2), (1, 3))


def test_ingest_sidecar_and_layers(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("step,layer,expert,tokens\n0,0,0,1\n0,1,0,7\n1,0,1,2\n")
    side = tmp_path / "g.csv"
    side.write_text("expert,group\n0,1\n1,0\n")
    with pytest.raises(TraceError, match="choose"):
        rebalancer.ingest_load_trace(path, sidecar=side)
    states = rebalancer.ingest_load_trace(path, sidecar=side, layer=0)
    assert [s.step for s in states] == [0, 1]
    assert states[0].groups == ((0,), (1,)) and states[1].groups == ((2,), (0,))


def test_ingest_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert rebalancer.ingest_load_trace(empty, ep=2) == []
    back = tmp_path / "b.csv"
    back.write_text("step,layer,expert,tokens\n2,0,0,1\n1,0,0,1\n")
    with pytest.raises(TraceError, match=":3:"):
        rebalancer.ingest_load_trace(back, ep=1)
    side = tmp_path / "g.csv"
    side.write_text("expert,group\n0,0\n")
    unknown = tmp_path / "u.csv"
    unknown.write_text("step,layer,expert,tokens\n0,0,5,1\n")
    with pytest.raises(TraceError, match="unknown expert"):
        rebalancer.ingest_load_trace(unknown, sidecar=side)
    with pytest.raises(TraceError, match="unknown expert"):
        rebalancer.ingest_load_trace(unknown, ep=2, num_experts=4)
    with pytest.raises(ConfigError):
        rebalancer.ingest_load_trace(unknown)


def test_trace_round_trip(tmp_path):
    trace = rebalancer.synthetic_skewed_trace(8, 2, 5)
    path = tmp_path / "t.csv"
    path.write_text(rebalancer.write_load_trace(trace))
    assert rebalancer.ingest_load_trace(path, ep=2) == trace


def test_skewed_trace_gap_grows_until_migration():
    trace = rebalancer.synthetic_skewed_trace(8, 2, 30, growth=40)
    gaps = [s.imbalance for s in trace]
    assert gaps == sorted(gaps) and gaps[-1] == 29 * 40
    report = rebalancer.replay_trace(trace, 0.2, MIXTRAL)
    assert report.triggers
    first = report.triggers[0]
    assert rebalancer.should_migrate(trace[first], 0.2)
    assert not any(rebalancer.should_migrate(s, 0.2) for s in trace[:first])


def test_amortized_overhead():
    trace = rebalancer.synthetic_skewed_trace(8, 2, 100)
    assert rebalancer.amortized_overhead(trace, 1e9, MIXTRAL) == 0
    one = rebalancer.replay_trace(trace, 0.1, MIXTRAL, step_time=1.0)
    assert len(one.triggers) == 1
    # one swap moves one Mixtral expert per GPU: 52.5 ms over 100 one-second steps
    assert one.fraction == pytest.approx(float(Fraction(21, 400) / 100))
    fractions = [rebalancer.amortized_overhead(trace, t, MIXTRAL) for t in (0.05, 0.1, 0.3, 1.0, 3.0)]
    assert fractions == sorted(fractions, reverse=True)
    with pytest.raises(ValueError):
        rebalancer.amortized_overhead(trace, 0.1, MIXTRAL, step_time=0)
    slow = frontier_like_platform(migration_bandwidth=25e9)
    assert rebalancer.amortized_overhead(trace, 0.1, MIXTRAL, slow) == pytest.approx(2 * one.fraction)
