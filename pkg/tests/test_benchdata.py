import warnings

import pytest

from moeplan import benchdata
from moeplan.benchdata import BenchProfile, MissingSeriesError, ProfileError


def profile():
    return BenchProfile(
        attention_curves={("128", 1): ((1024, 50.0), (4096, 100.0)), ("128", 4): ((1024, 80.0), (4096, 120.0))},
        gemm_curves={("4096x14336", 1): ((64, 10.0), (1024, 140.0))},
        a2a_curves={(8, 1): ((1024, 1e9), (2**20, 1e11)), (16, 2): ((1024, 1e8), (2**20, 1e10))},
    )


def test_effective_peak_spans_both_families():
    assert profile().effective_peak == 140e12
    assert BenchProfile(gemm_curves={("x", 1): ((1, 1.0), (2, 2.0))}, effective_peak_override=5.0).effective_peak == 5.0
    with pytest.raises(ProfileError):
        BenchProfile().effective_peak


def test_linear_lookup_and_clamping():
    p = profile()
    assert benchdata.attention_tflops(p, "128", 1, 2560) == pytest.approx(75.0)
    assert benchdata.attention_tflops(p, "128", 1, 10) == 50.0
    assert benchdata.attention_tflops(p, "128", 1, 10**6) == 100.0
    # nearest batch-size curve
    assert benchdata.attention_tflops(p, "128", 3, 1024) == 80.0


def test_loglog_a2a_lookup():
    p = profile()
    assert benchdata.a2a_bandwidth(p, 8, 32768) == pytest.approx(1e10)
    with pytest.warns(UserWarning, match="nearest|using"):
        assert benchdata.a2a_bandwidth(p, 12, 1024) == 1e9


def test_missing_series():
    with pytest.raises(MissingSeriesError):
        benchdata.gemm_tflops(profile(), "nope", 1, 64)
    with pytest.raises(MissingSeriesError):
        benchdata.a2a_bandwidth(BenchProfile(), 8, 1)


@pytest.mark.parametrize("curve", [((1, 1.0),), ((2, 1.0), (1, 2.0)), ((1, 1.0), (2, 0.0))])
def test_invalid_curves(curve):
    with pytest.raises(ProfileError):
        BenchProfile(gemm_curves={("x", 1): curve})


def test_select_best_shapes():
    shapes = benchdata.select_best_shapes(profile())
    assert [s.batch_size for s in shapes] == [1]
    assert shapes[0].attention == ("128", 4096, 100.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert benchdata.select_best_shapes(BenchProfile(gemm_curves={("x", 2): ((1, 1.0), (2, 2.0))})) == []
    assert caught


def test_round_trip(tmp_path):
    p = benchdata.synthetic_profile()
    benchdata.save_profile(p, tmp_path)
    q = benchdata.load_profile(tmp_path)
    assert q == p
    benchdata.save_profile(q, tmp_path / "again")
    for name in ("attention.csv", "gemm.csv", "a2a.csv"):
        assert (tmp_path / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    single = benchdata.load_profile(tmp_path / "gemm.csv")
    assert single.gemm_curves == p.gemm_curves and not single.attention_curves


def test_errors_carry_line_numbers(tmp_path):
    bad = tmp_path / "gemm.csv"
    bad.write_text("series,num_tokens,batch_size,tflops\nx,64,1,5.0\nx,abc,1,6.0\n")
    with pytest.raises(ProfileError, match=":3:"):
        benchdata.load_profile(bad)
    bad.write_text("series,num_tokens,batch_size,tflops\nx,64,1,5.0\nx,64,1,6.0\n")
    with pytest.raises(ProfileError, match="duplicate"):
        benchdata.load_profile(bad)
    (tmp_path / "weird.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ProfileError, match="header"):
        benchdata.load_profile(tmp_path / "weird.csv")
    with pytest.raises(FileNotFoundError):
        benchdata.load_profile(tmp_path / "missing")


def test_synthetic_curves_stay_below_peak():
    p = benchdata.synthetic_profile(peak_tflops=200.0)
    assert p.effective_peak < 200e12
