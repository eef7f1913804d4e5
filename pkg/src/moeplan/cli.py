"""``moeplan`` command line: mem, plan, estimate, a2a-sim, rebalance.

Exit codes: 0 success, 2 input error, 3 no feasible plan.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import benchdata, memmodel, netsim, planner, rebalancer
from .core import (ConfigError, ModelArch, ParallelPlan, PlatformSpec, TrainingRun, frontier_like_platform,
                   load_json, load_model_zoo, tiny_fixture, to_dict)
from .estimator import estimate_step

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 2, 3
DEFAULT_SIZES = tuple(2**p for p in range(10, 25, 2))


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument resolution

def resolve_model(arg: str) -> ModelArch:
    if arg == "tiny":
        return tiny_fixture()[0]
    path = Path(arg)
    if path.suffix == ".json" or path.exists():
        return load_json(ModelArch, path)
    zoo = load_model_zoo()
    if arg not in zoo:
        raise InputError(f"unknown model {arg!r}; give a JSON file, 'tiny' or one of: {', '.join(sorted(zoo))}")
    if zoo[arg].arch is None:
        raise InputError(f"model {arg!r} does not publish enough architecture to be modelled")
    return zoo[arg].arch


def resolve_run(arg: Optional[str], model_arg: str) -> TrainingRun:
    if arg is None:
        if model_arg == "tiny":
            return tiny_fixture()[1]
        return TrainingRun(seq_len=4096, global_batch=1, microbatch_mult=1)
    if arg == "tiny":
        return tiny_fixture()[1]
    return load_json(TrainingRun, arg)


def resolve_platform(arg: Optional[str]) -> PlatformSpec:
    if arg is None or arg == "frontier":
        return frontier_like_platform()
    return load_json(PlatformSpec, arg)


def resolve_profile(arg: Optional[str], arch: ModelArch) -> benchdata.BenchProfile:
    if arg is None:
        raise InputError("--profile is required (a directory, a CSV, or 'synthetic')")
    if arg == "synthetic":
        return benchdata.synthetic_profile(attention_series=(str(arch.head_dim),),
                                           gemm_series=(f"{arch.d_model}x{arch.ffn_dim_moe}",))
    return benchdata.load_profile(arg)


def parse_plan(text: str):
    try:
        pp, ep = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise InputError(f"--plan expects PPxEP, got {text!r}") from None
    if pp < 1 or ep < 1:
        raise InputError("--plan values must be >= 1")
    return pp, ep


def parse_int_range(text: str) -> List[int]:
    """``A..B`` (inclusive), ``A,B,C`` or a single integer."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [int(x) for x in text.split(",")]
    except ValueError:
        raise InputError(f"expected A..B, a comma list or an integer, got {text!r}") from None
    if not values or min(values) < 1:
        raise InputError(f"range {text!r} must be non-empty and positive")
    return values


def _plan_for(arch: ModelArch, platform: PlatformSpec, text: str) -> ParallelPlan:
    pp, ep = parse_plan(text)
    nodes = max(1, -(-(pp * ep) // platform.gpus_per_node))
    return ParallelPlan.build(arch, pp, ep, nodes)


def _emit(args, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def _gib(n) -> str:
    return f"{float(n) / 2**30:.3f} GiB"


# ---------------------------------------------------------------------------
# subcommands

def cmd_mem(args) -> int:
    arch = resolve_model(args.model)
    run = resolve_run(args.run, args.model)
    platform = resolve_platform(args.platform) if args.platform else None
    opts = dict(flash_attention=args.flash_attention, platform=platform)
    und = memmodel.undivided_memory(arch, run, **opts)
    report = {"model": to_dict(arch), "run": to_dict(run), "undivided": und.to_dict()}
    if args.plan:
        plan = _plan_for(arch, platform or frontier_like_platform(), args.plan)
        stages = memmodel.ofob_all_stages(arch, run, plan, activation_checkpointing=args.activation_checkpointing,
                                          allow_uneven=True, **opts)
        report["plan"] = {"pp": plan.pp, "ep": plan.ep}
        report["edp"] = memmodel.edp_memory(arch, run, plan.ep, **opts).to_dict()
        if arch.num_layers % plan.pp == 0:
            report["gpipe_stage0"] = memmodel.gpipe_memory(arch, run, plan, 0, **opts).to_dict()
        report["ofob_stages"] = [s.to_dict() for s in stages]
        report["stage_skew_bytes"] = stages[0].total_bytes - stages[-1].total_bytes

    if args.format == "json":
        _emit(args, _json(report))
        return EXIT_OK
    lines = [f"undivided: total {und.total_bytes} bytes ({_gib(und.total_bytes)})"]
    for key in ("attn_params_bytes", "expert_params_bytes", "attn_activation_bytes", "expert_activation_bytes"):
        lines.append(f"  {key}: {report['undivided'][key]}")
    if args.plan:
        lines.append(f"edp (EP={report['plan']['ep']}): total {report['edp']['total_bytes']} bytes")
        if "gpipe_stage0" in report:
            lines.append(f"gpipe stage 0: total {report['gpipe_stage0']['total_bytes']} bytes")
        rows = [(i, s["total_bytes"], _gib(s["total_bytes"])) for i, s in enumerate(report["ofob_stages"])]
        lines.append(_table(("stage", "bytes", "GiB"), rows))
        lines.append(f"stage skew: {report['stage_skew_bytes']} bytes")
    _emit(args, "\n".join(lines))
    return EXIT_OK


def cmd_plan(args) -> int:
    arch = resolve_model(args.model)
    run = resolve_run(args.run, args.model)
    platform = resolve_platform(args.platform)
    nodes = parse_int_range(args.nodes)
    profile = resolve_profile(args.profile, arch) if args.profile else None
    verdicts = planner.enumerate_plans(
        arch, run, platform, nodes, profile=profile, strict_node_locality=args.strict_node_locality,
        activation_checkpointing=args.activation_checkpointing, flash_attention=args.flash_attention)
    feasible = [v for v in verdicts if v.feasible]
    min_n = min((v.plan.num_nodes for v in feasible), default=None)
    report = {"plans": [v.to_dict() for v in verdicts], "num_feasible": len(feasible), "min_nodes": min_n}

    if args.format == "json":
        _emit(args, _json(report))
    elif args.format == "csv":
        rows = ["nodes,pp,ep,feasible,peak_stage0_bytes,estimated_mfu,failed"]
        for v in verdicts:
            rows.append(f"{v.plan.num_nodes},{v.plan.pp},{v.plan.ep},{int(v.feasible)},"
                        f"{'' if v.peak_stage0_bytes is None else v.peak_stage0_bytes},"
                        f"{'' if v.estimated_mfu is None else repr(v.estimated_mfu)},{';'.join(v.failed)}")
        _emit(args, "\n".join(rows))
    else:
        rows = [(v.plan.num_nodes, v.plan.pp, v.plan.ep, v.peak_stage0_bytes,
                 "-" if v.estimated_mfu is None else f"{v.estimated_mfu:.4f}") for v in feasible]
        lines = ["feasible plans:", _table(("nodes", "PP", "EP", "peak_bytes", "MFU"), rows) if rows else "  none"]
        lines.append("rejected:")
        for v in verdicts:
            if not v.feasible:
                lines.append(f"  n={v.plan.num_nodes} PP={v.plan.pp} EP={v.plan.ep}: {', '.join(v.failed)}")
        lines.append(f"min nodes: {min_n if min_n is not None else 'none'}")
        _emit(args, "\n".join(lines))
    if not feasible:
        print("no feasible plan", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_estimate(args) -> int:
    arch = resolve_model(args.model)
    run = resolve_run(args.run, args.model)
    platform = resolve_platform(args.platform)
    if not args.plan:
        raise InputError("--plan PPxEP is required")
    plan = _plan_for(arch, platform, args.plan)
    profile = resolve_profile(args.profile, arch)
    est = estimate_step(arch, run, plan, platform, profile, attention_series=args.attention_series,
                        gemm_series=args.gemm_series, activation_checkpointing=args.activation_checkpointing)
    report = est.to_dict()
    report["identity_residual"] = est.identity_residual()
    report["plan"] = {"pp": plan.pp, "ep": plan.ep, "num_nodes": plan.num_nodes}
    if args.format == "json":
        _emit(args, _json(report))
        return EXIT_OK
    lines = [f"plan PP={plan.pp} EP={plan.ep} on {plan.num_nodes} node(s), {est.num_gpus} GPUs"]
    for key in ("t_attention", "t_expert", "t_dispatch", "t_combine", "t_p2p", "t_compute", "t_comm", "t_step"):
        lines.append(f"  {key:<12} {getattr(est, key):.6e} s")
    lines.append(f"  bubble fraction     {est.bubble_fraction:.6f}")
    lines.append(f"  hardware efficiency {est.hardware_efficiency:.6f}")
    lines.append(f"  compute fraction    {est.compute_fraction:.6f}")
    lines.append(f"  MFU                 {est.mfu:.6f}")
    ok = report["identity_residual"] <= 1e-9
    lines.append(f"identity t_compute/t_step = 1 - bubble - t_comm/t_step: "
                 f"{'holds' if ok else 'VIOLATED'} (residual {report['identity_residual']:.3e})")
    _emit(args, "\n".join(lines))
    return EXIT_OK


def cmd_a2a_sim(args) -> int:
    platform = resolve_platform(args.platform)
    nodes = parse_int_range(args.nodes)
    sizes = parse_int_range(args.sizes) if args.sizes else list(DEFAULT_SIZES)
    rows = netsim.sweep(platform, sizes, nodes, overlap_mode=args.overlap, placement=args.placement)
    if args.format == "json":
        _emit(args, netsim.sweep_json(rows))
    elif args.format == "csv":
        _emit(args, netsim.sweep_csv(rows))
    else:
        table = [(r.nodes, r.message_bytes, f"{r.t_flat:.4e}", f"{r.t_halo:.4e}", f"{r.speedup:.3f}")
                 for r in rows]
        _emit(args, _table(("nodes", "msg_bytes", "t_flat", "t_halo", "speedup"), table))
    return EXIT_OK


def cmd_rebalance(args) -> int:
    arch = resolve_model(args.model)
    platform = resolve_platform(args.platform)
    if args.snapshot:
        try:
            groups = json.loads(args.snapshot)
        except json.JSONDecodeError as exc:
            raise InputError(f"--snapshot is not JSON: {exc}") from None
        state = rebalancer.LoadState(groups)
        res = rebalancer.rebalance(state, args.max_iters, arch=arch, platform=platform)
        report = {"trigger": rebalancer.should_migrate(state, args.threshold), "result": res.to_dict()}
        if args.format == "json":
            _emit(args, _json(report))
            return EXIT_OK
        lines = [f"imbalance {res.initial_imbalance} -> {res.final_imbalance} with {res.swap_count} swap(s)"]
        for s in res.swap_list:
            lines.append(f"  swap expert {s.heavy_expert} (GPU {s.heavy_group}) <-> "
                         f"expert {s.light_expert} (GPU {s.light_group}): delta {s.delta_before} -> {s.delta_after}")
        lines.append(f"new groups: {[list(g) for g in res.new_groups]}")
        m = res.migration
        lines.append(f"migration: {m.bytes_per_gpu} bytes per GPU, {float(m.latency_seconds) * 1e3:.4g} ms")
        _emit(args, "\n".join(lines))
        return EXIT_OK

    if not args.trace:
        raise InputError("give --trace or --snapshot")
    if args.groups is None and args.ep is None:
        raise InputError("--trace needs --groups (sidecar CSV) or --ep")
    states = rebalancer.ingest_load_trace(args.trace, layer=args.layer, sidecar=args.groups, ep=args.ep,
                                          num_experts=arch.num_experts if args.groups is None else None)
    rep = rebalancer.replay_trace(states, args.threshold, arch, platform, args.step_time, args.max_iters)
    report = rep.to_dict()
    report["num_steps"] = len(states)
    if args.format == "json":
        _emit(args, _json(report))
        return EXIT_OK
    lines = [f"steps: {len(states)}, migrations triggered: {len(rep.triggers)}"]
    for step, r in zip(rep.triggers, rep.results):
        lines.append(f"  step {step}: {r.swap_count} swap(s), imbalance {r.initial_imbalance} -> "
                     f"{r.final_imbalance}, {float(r.migration.latency_seconds) * 1e3:.4g} ms")
    lines.append(f"total migration time: {rep.total_migration_seconds:.4g} s")
    lines.append(f"amortized overhead fraction: {rep.fraction:.4g}")
    _emit(args, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeplan", description="MoE training resource modelling toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, formats=("text", "json")):
        sp.add_argument("--format", choices=formats, default="text")
        sp.add_argument("--out", help="write output here instead of stdout")

    def model_opts(sp):
        sp.add_argument("--model", required=True, help="ModelArch JSON, zoo name, or 'tiny'")
        sp.add_argument("--run", help="TrainingRun JSON or 'tiny'")
        sp.add_argument("--flash-attention", action="store_true")
        sp.add_argument("--activation-checkpointing", action="store_true")

    sp = sub.add_parser("mem", help="per-GPU memory breakdown")
    model_opts(sp)
    sp.add_argument("--platform", help="PlatformSpec JSON or 'frontier' (adds framework overhead)")
    sp.add_argument("--plan", help="PPxEP")
    common(sp)
    sp.set_defaults(func=cmd_mem)

    sp = sub.add_parser("plan", help="enumerate and rank parallel plans")
    model_opts(sp)
    sp.add_argument("--platform", default="frontier")
    sp.add_argument("--nodes", default="1..16", help="A..B, comma list or integer")
    sp.add_argument("--profile", help="benchmark profile (enables MFU ranking)")
    sp.add_argument("--strict-node-locality", action="store_true")
    common(sp, ("text", "json", "csv"))
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("estimate", help="step time and MFU for one plan")
    model_opts(sp)
    sp.add_argument("--platform", default="frontier")
    sp.add_argument("--profile", help="profile directory, CSV, or 'synthetic'")
    sp.add_argument("--plan", help="PPxEP")
    sp.add_argument("--attention-series")
    sp.add_argument("--gemm-series")
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("a2a-sim", help="flat vs hierarchical all-to-all latency sweep")
    sp.add_argument("--platform", default="frontier")
    sp.add_argument("--nodes", default="1,2,4,8,16,32,64")
    sp.add_argument("--sizes", help="per-pair message bytes: A..B, comma list or integer")
    sp.add_argument("--overlap", choices=netsim.OVERLAP_MODES, default="ii")
    sp.add_argument("--placement", choices=netsim.PLACEMENTS, default="packed")
    common(sp, ("text", "json", "csv"))
    sp.set_defaults(func=cmd_a2a_sim)

    sp = sub.add_parser("rebalance", help="expert load rebalancing and migration cost")
    sp.add_argument("--model", required=True)
    sp.add_argument("--platform", default="frontier")
    sp.add_argument("--trace", help="CSV step,layer,expert,tokens")
    sp.add_argument("--groups", help="sidecar CSV expert,group")
    sp.add_argument("--ep", type=int, help="round-robin expert placement when no sidecar is given")
    sp.add_argument("--layer", type=int)
    sp.add_argument("--snapshot", help="JSON list of per-GPU load lists, e.g. '[[4,3],[2,1]]'")
    sp.add_argument("--threshold", type=float, default=0.1)
    sp.add_argument("--step-time", type=float, default=1.0, help="seconds per training step")
    sp.add_argument("--max-iters", type=int, default=100)
    common(sp)
    sp.set_defaults(func=cmd_rebalance)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, benchdata.ProfileError, rebalancer.TraceError,
            OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"moeplan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
