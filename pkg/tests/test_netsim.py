import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeplan import netsim
from moeplan.core import frontier_like_platform

P = frontier_like_platform()


def test_placement_is_consistent():
    packed = netsim.Topology.from_platform(P, 20)
    assert packed.placement[:5] == ((0, 0), (0, 0), (0, 0), (0, 0), (1, 0))
    assert packed.placement[16] == (4, 1)
    scattered = netsim.Topology.from_platform(P, 8, "scattered")
    assert len({g for g, _ in scattered.placement}) == 8
    assert {r for _, r in scattered.placement} == {0, 1}
    with pytest.raises(ValueError):
        netsim.Topology.from_platform(P, 4, "random")


def test_tier_classification():
    t = netsim.Topology.from_platform(P, 20)
    assert t.rank_tier(0, 7) == "node"
    assert t.node_tier(0, 3) == "group"
    assert t.node_tier(0, 4) == "rack"
    assert t.node_tier(0, 16) == "global"
    assert t.remote_node_counts(0) == {"group": 3, "rack": 12, "global": 4}


def test_single_node_closed_form():
    t = netsim.Topology.from_platform(P, 1)
    m = 4096
    expected = 2e-6 + 7 * m / 200e9
    assert netsim.simulate_flat(t, m) == pytest.approx(expected, rel=1e-15)
    r = netsim.simulate_halo(t, m)
    assert r.t_halo == r.t_phase1 == r.t_flat
    assert r.speedup == 1.0
    assert r.t_phase2 == r.t_phase3 == 0


def test_beta_term_scales_linearly():
    t = netsim.Topology.from_platform(P, 16)
    alpha = 8e-6
    a, b = netsim.simulate_flat(t, 2**20), netsim.simulate_flat(t, 2**21)
    assert b - alpha == pytest.approx(2 * (a - alpha))


def test_overlap_identities():
    t = netsim.Topology.from_platform(P, 8)
    r = netsim.simulate_halo(t, 2**16, "iii")
    assert r.t_halo == r.t_halo_overlap_iii
    if r.t_phase1 <= r.t_phase2:
        assert r.t_halo_overlap_ii == pytest.approx(r.t_phase2 + r.t_phase3)
    assert r.t_halo_none == pytest.approx(r.t_phase1 + r.t_phase2 + r.t_phase3)
    with pytest.raises(ValueError):
        netsim.simulate_halo(t, 2**16, "iv")
    with pytest.raises(ValueError):
        netsim.simulate_flat(t, 0)


@settings(max_examples=100, deadline=None)
@given(nodes=st.integers(1, 40), msg=st.integers(1, 2**24), mode=st.sampled_from(netsim.OVERLAP_MODES),
       placement=st.sampled_from(netsim.PLACEMENTS))
def test_invariants(nodes, msg, mode, placement):
    t = netsim.Topology.from_platform(P, nodes, placement)
    r = netsim.simulate_halo(t, msg, mode)
    assert r.t_flat > 0 and r.t_halo > 0
    assert r.t_halo_none >= max(r.t_halo_overlap_ii, r.t_halo_overlap_iii)
    assert 0 <= r.max_link_utilization <= 1
    again = netsim.simulate_halo(t, msg, mode)
    assert again == r


@settings(max_examples=60, deadline=None)
@given(nodes=st.integers(1, 32), msg=st.integers(1, 2**22), bw=st.floats(1e9, 1e12), g=st.sampled_from([2, 4, 8]))
def test_uniform_single_tier_flat_never_slower(nodes, msg, bw, g):
    flat_net = frontier_like_platform(
        gpus_per_node=g, nics_per_node=g, nic_bandwidth=bw, intra_node_bandwidth=bw, intra_group_bandwidth=bw,
        inter_group_bandwidth=bw, inter_rack_bandwidth=bw, per_message_latency=(0, 0, 0))
    t = netsim.Topology.from_platform(flat_net, nodes)
    r = netsim.simulate_halo(t, msg)
    assert r.t_flat <= min(r.t_halo_overlap_ii, r.t_halo_overlap_iii) * (1 + 1e-12)


def test_scattered_placement_is_slower_for_flat():
    packed = netsim.Topology.from_platform(P, 4)
    scattered = netsim.Topology.from_platform(P, 4, "scattered")
    assert netsim.simulate_flat(scattered, 2**20) > netsim.simulate_flat(packed, 2**20)


def test_sweep_and_emitters():
    rows = netsim.sweep(P, [2**16], [1, 16])
    assert len(rows) == 2
    direct = netsim.simulate_halo(netsim.Topology.from_platform(P, 16), 2**16)
    assert rows[1].t_halo == direct.t_halo and rows[1].speedup == direct.t_flat / direct.t_halo
    csv_text = netsim.sweep_csv(rows)
    assert csv_text.splitlines()[0] == ",".join(netsim.SWEEP_HEADER)
    assert len(csv_text.splitlines()) == 3
    assert '"speedup"' in netsim.sweep_json(rows)
    with pytest.raises(ValueError):
        netsim.sweep(P, [], [1])


def test_crossover_shape():
    rows = {r.nodes: r.speedup for r in netsim.sweep(P, [2**20], [2, 4, 16, 32, 64])}
    assert all(0.8 < rows[n] <= 1.0 for n in (2, 4))
    assert all(rows[n] > 1 for n in (16, 32, 64))
