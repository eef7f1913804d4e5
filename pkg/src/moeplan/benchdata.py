"""Micro-benchmark measurements: CSV ingestion, interpolated lookups and shape selection.

A profile directory holds up to three CSV files (header row mandatory)::

    attention.csv   series,seq_len,batch_size,tflops
    gemm.csv        series,num_tokens,batch_size,tflops
    a2a.csv         num_gpus,num_nodes,message_bytes,bandwidth_bytes_per_sec

and optionally ``profile.json`` carrying an ``effective_peak`` override (flop/s).
Compute curves are keyed by ``(series, batch_size)`` and interpolated linearly
in the token dimension; all-to-all curves are keyed by ``(num_gpus, num_nodes)``
and interpolated log-log in message size. Lookups clamp outside the measured range.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union


ATTENTION_HEADER = ("series", "seq_len", "batch_size", "tflops")
GEMM_HEADER = ("series", "num_tokens", "batch_size", "tflops")
A2A_HEADER = ("num_gpus", "num_nodes", "message_bytes", "bandwidth_bytes_per_sec")

Point = Tuple[float, float]
Curve = Tuple[Point, ...]


class ProfileError(ValueError):
    pass


class MissingSeriesError(ProfileError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing benchmark series"


def _check_curve(name: str, curve: Sequence[Point]) -> Curve:
    if len(curve) < 2:
        raise ProfileError(f"curve {name} needs at least 2 points, has {len(curve)}")
    xs = [x for x, _ in curve]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ProfileError(f"curve {name} keys are not strictly increasing")
    if any(y <= 0 for _, y in curve):
        raise ProfileError(f"curve {name} has a non-positive value")
    return tuple((x, y) for x, y in curve)


@dataclass(frozen=True)
class BenchProfile:
    # (series, batch_size) -> ((seq_len, tflops), ...)
    attention_curves: Dict[Tuple[str, int], Curve] = field(default_factory=dict)
    # (series, batch_size) -> ((num_tokens, tflops), ...)
    gemm_curves: Dict[Tuple[str, int], Curve] = field(default_factory=dict)
    # (num_gpus, num_nodes) -> ((message_bytes, bytes/s), ...)
    a2a_curves: Dict[Tuple[int, int], Curve] = field(default_factory=dict)
    effective_peak_override: Optional[float] = None

    def __post_init__(self):
        for family in ("attention_curves", "gemm_curves", "a2a_curves"):
            checked = {key: _check_curve(f"{family}[{key}]", curve)
                       for key, curve in sorted(getattr(self, family).items())}
            object.__setattr__(self, family, checked)
        if self.effective_peak_override is not None and self.effective_peak_override <= 0:
            raise ProfileError("effective_peak must be positive")

    @property
    def effective_peak(self) -> float:
        """Peak flop/s used to normalise MFU: the override, else the best measured
        compute throughput across attention and GEMM curves."""
        if self.effective_peak_override is not None:
            return self.effective_peak_override
        best = [y for fam in (self.attention_curves, self.gemm_curves)
                for curve in fam.values() for _, y in curve]
        if not best:
            raise ProfileError("profile has no compute curves to derive effective_peak from")
        return max(best) * 1e12

    def attention_series(self) -> List[str]:
        return sorted({s for s, _ in self.attention_curves})

    def gemm_series(self) -> List[str]:
        return sorted({s for s, _ in self.gemm_curves})


# ---------------------------------------------------------------------------
# interpolation

def interp_linear(curve: Curve, x: float) -> float:
    xs = [p[0] for p in curve]
    if x <= xs[0]:
        return curve[0][1]
    if x >= xs[-1]:
        return curve[-1][1]
    i = bisect.bisect_right(xs, x)
    (x0, y0), (x1, y1) = curve[i - 1], curve[i]
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def interp_loglog(curve: Curve, x: float) -> float:
    xs = [p[0] for p in curve]
    if x <= xs[0]:
        return curve[0][1]
    if x >= xs[-1]:
        return curve[-1][1]
    i = bisect.bisect_right(xs, x)
    (x0, y0), (x1, y1) = curve[i - 1], curve[i]
    if x == x0:
        return y0
    t = (math.log(x) - math.log(x0)) / (math.log(x1) - math.log(x0))
    return math.exp(math.log(y0) + t * (math.log(y1) - math.log(y0)))


def a2a_bandwidth(profile: BenchProfile, num_gpus: int, message_bytes: float,
                  num_nodes: Optional[int] = None) -> float:
    """Measured all-to-all bandwidth for ``num_gpus`` participants at ``message_bytes``.

    If no series has exactly ``num_gpus`` the nearest participant count is used
    (with a warning). Among series with the same GPU count, ``num_nodes`` picks
    one; otherwise the fewest-nodes series wins.
    """
    if not profile.a2a_curves:
        raise MissingSeriesError("profile has no all-to-all series")
    keys = list(profile.a2a_curves)
    exact = [k for k in keys if k[0] == num_gpus]
    if not exact:
        nearest = min({k[0] for k in keys}, key=lambda g: (abs(g - num_gpus), g))
        warnings.warn(f"no all-to-all series for {num_gpus} GPUs; using {nearest}", stacklevel=2)
        exact = [k for k in keys if k[0] == nearest]
    if num_nodes is not None and any(k[1] == num_nodes for k in exact):
        key = (exact[0][0], num_nodes)
    else:
        key = min(exact, key=lambda k: k[1])
    return interp_loglog(profile.a2a_curves[key], message_bytes)


def _compute_lookup(curves, family: str, series: str, batch_size: float, x: float) -> float:
    batches = sorted(b for s, b in curves if s == series)
    if not batches:
        raise MissingSeriesError(f"no {family} series {series!r} in profile")
    best = min(batches, key=lambda b: (abs(b - batch_size), b))
    return interp_linear(curves[(series, best)], x)


def attention_tflops(profile: BenchProfile, series: str, batch_size: float, seq_len: float) -> float:
    """Attention throughput; the batch-size curve nearest ``batch_size`` is used."""
    return _compute_lookup(profile.attention_curves, "attention", series, batch_size, seq_len)


def gemm_tflops(profile: BenchProfile, series: str, batch_size: float, num_tokens: float) -> float:
    return _compute_lookup(profile.gemm_curves, "gemm", series, batch_size, num_tokens)


# ---------------------------------------------------------------------------
# shape selection

@dataclass(frozen=True)
class ShapeChoice:
    batch_size: int
    attention: Tuple[str, float, float]   # (series, seq_len, tflops)
    gemm: Tuple[str, float, float]        # (series, num_tokens, tflops)

    @property
    def score(self) -> float:
        return min(self.attention[2], self.gemm[2])


def _best_per_batch(curves) -> Dict[int, Tuple[str, float, float]]:
    best: Dict[int, Tuple[str, float, float]] = {}
    for (series, batch), curve in sorted(curves.items()):
        for x, y in curve:
            if batch not in best or y > best[batch][2]:
                best[batch] = (series, x, y)
    return best


def select_best_shapes(profile: BenchProfile) -> List[ShapeChoice]:
    """Pair the best attention and best GEMM measurement for every batch size both
    families cover, ranked by the slower of the two (descending)."""
    attn = _best_per_batch(profile.attention_curves)
    gemm = _best_per_batch(profile.gemm_curves)
    common = sorted(set(attn) & set(gemm))
    if not common:
        warnings.warn("attention and GEMM benchmarks share no batch size", stacklevel=2)
        return []
    choices = [ShapeChoice(b, attn[b], gemm[b]) for b in common]
    return sorted(choices, key=lambda c: (-c.score, c.batch_size))


# ---------------------------------------------------------------------------
# CSV I/O

def _fmt(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


def _num(text: str, kind, path, lineno: int, column: str):
    try:
        value = kind(text)
    except ValueError:
        raise ProfileError(f"{path}:{lineno}: column {column!r} is not a number: {text!r}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ProfileError(f"{path}:{lineno}: column {column!r} is not finite")
    return value


def _read_rows(path: Path, header: Sequence[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ProfileError(f"{path}: empty file (header row required)") from None
        if tuple(c.strip() for c in first) != tuple(header):
            raise ProfileError(f"{path}:1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ProfileError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def _collect(path: Path, header, parse_row) -> Dict:
    groups: Dict = {}
    seen = set()
    for lineno, row in _read_rows(path, header):
        key, x, y = parse_row(row, lineno)
        if y <= 0:
            raise ProfileError(f"{path}:{lineno}: {header[-1]} must be positive, got {y}")
        if (key, x) in seen:
            raise ProfileError(f"{path}:{lineno}: duplicate key {key + (x,)}")
        seen.add((key, x))
        groups.setdefault(key, []).append((x, y))
    if not groups:
        raise ProfileError(f"{path}: no data rows")
    return {k: sorted(v) for k, v in groups.items()}


def _compute_file(path: Path, header) -> Dict:
    def parse(row, lineno):
        series = row[0]
        if not series:
            raise ProfileError(f"{path}:{lineno}: empty series name")
        x = _num(row[1], int, path, lineno, header[1])
        batch = _num(row[2], int, path, lineno, header[2])
        y = _num(row[3], float, path, lineno, header[3])
        return (series, batch), x, y
    return _collect(path, header, parse)


def _a2a_file(path: Path) -> Dict:
    def parse(row, lineno):
        gpus = _num(row[0], int, path, lineno, A2A_HEADER[0])
        nodes = _num(row[1], int, path, lineno, A2A_HEADER[1])
        msg = _num(row[2], int, path, lineno, A2A_HEADER[2])
        bw = _num(row[3], float, path, lineno, A2A_HEADER[3])
        if msg <= 0 or gpus <= 0 or nodes <= 0:
            raise ProfileError(f"{path}:{lineno}: num_gpus, num_nodes and message_bytes must be positive")
        return (gpus, nodes), msg, bw
    return _collect(path, A2A_HEADER, parse)


def load_profile(path: Union[str, Path]) -> BenchProfile:
    """Load a profile directory, or a single CSV whose header identifies its family."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files: Dict[str, Path] = {}
    peak = None
    if path.is_dir():
        for name in ("attention", "gemm", "a2a"):
            if (path / f"{name}.csv").exists():
                files[name] = path / f"{name}.csv"
        meta = path / "profile.json"
        if meta.exists():
            peak = json.loads(meta.read_text()).get("effective_peak")
        if not files:
            raise ProfileError(f"{path}: no attention.csv, gemm.csv or a2a.csv found")
    else:
        with open(path, newline="") as fh:
            first = tuple(c.strip() for c in next(csv.reader(fh), []))
        family = {ATTENTION_HEADER: "attention", GEMM_HEADER: "gemm", A2A_HEADER: "a2a"}.get(first)
        if family is None:
            raise ProfileError(f"{path}:1: unrecognised header {','.join(first)}")
        files[family] = path
    try:
        return BenchProfile(
            attention_curves=_compute_file(files["attention"], ATTENTION_HEADER) if "attention" in files else {},
            gemm_curves=_compute_file(files["gemm"], GEMM_HEADER) if "gemm" in files else {},
            a2a_curves=_a2a_file(files["a2a"]) if "a2a" in files else {},
            effective_peak_override=peak,
        )
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from None


def _compute_csv(curves, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for (series, batch), curve in sorted(curves.items()):
        for x, y in curve:
            w.writerow([series, _fmt(x), batch, _fmt(y)])
    return buf.getvalue()


def _a2a_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(A2A_HEADER)
    for (gpus, nodes), curve in sorted(curves.items()):
        for x, y in curve:
            w.writerow([gpus, nodes, _fmt(x), _fmt(y)])
    return buf.getvalue()


def save_profile(profile: BenchProfile, directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if profile.attention_curves:
        (directory / "attention.csv").write_text(_compute_csv(profile.attention_curves, ATTENTION_HEADER))
    if profile.gemm_curves:
        (directory / "gemm.csv").write_text(_compute_csv(profile.gemm_curves, GEMM_HEADER))
    if profile.a2a_curves:
        (directory / "a2a.csv").write_text(_a2a_csv(profile.a2a_curves))
    if profile.effective_peak_override is not None:
        (directory / "profile.json").write_text(
            json.dumps({"effective_peak": profile.effective_peak_override}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic profiles

def synthetic_profile(*, attention_series: Sequence[str] = ("default",),
                      gemm_series: Sequence[str] = ("default",),
                      batch_sizes: Sequence[int] = (1, 2, 4, 8),
                      peak_tflops: float = 150.0,
                      gpus_per_node: int = 8,
                      max_gpus: int = 64,
                      intra_node_bw: float = 150e9,
                      inter_node_bw: float = 20e9) -> BenchProfile:
    """SYNTHETIC curves with plausible shapes, for desk-scale testing only.

    Compute throughput saturates with work (``peak * w / (w + w_half)``) and
    stays strictly below ``peak_tflops``. All-to-all bandwidth rises with message
    size and drops once the group spans more than one node.
    """
    seq_lens = (512, 1024, 2048, 4096, 8192)
    tokens = (64, 256, 1024, 4096, 16384)
    attention = {}
    for si, series in enumerate(attention_series):
        for b in batch_sizes:
            attention[(series, b)] = [
                (s, round(peak_tflops * 0.8 * (b * s) / (b * s + 2048 * (1 + si)), 3)) for s in seq_lens]
    gemm = {}
    for si, series in enumerate(gemm_series):
        for b in batch_sizes:
            gemm[(series, b)] = [
                (t, round(peak_tflops * 0.9 * (b * t) / (b * t + 1024 * (1 + si)), 3)) for t in tokens]
    sizes = tuple(2**p for p in range(12, 31, 2))
    a2a = {}
    g = 2
    while g <= max_gpus:
        nodes = max(1, -(-g // gpus_per_node))
        ceiling = intra_node_bw if nodes == 1 else inter_node_bw / (1 + 0.1 * math.log2(nodes))
        a2a[(g, nodes)] = [(m, round(ceiling * m / (m + 2**20), 1)) for m in sizes]
        g *= 2
    return BenchProfile(attention_curves=attention, gemm_curves=gemm, a2a_curves=a2a)
