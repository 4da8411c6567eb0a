"""``deer`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import tomli

from . import __version__
from .cfg import build_cfg, detect_cycles
from .experiment import ExperimentError, ExperimentSpec, run_experiment, run_mode
from .hyperblock import HBConfig, analyze_hyperblocks
from .metacodec import EncodingError, InsertionFailure, read_table, write_table
from .metrics import ConfigMismatch, compare_report, plot_rows, rows_to_csv
from .pipeline import analyze
from .sim import MODES, CacheConfig, DRUConfig, simulate
from .ssra import SSRAConfig
from .synth import SynthWorkloadSpec, generate_synthetic
from .trace import IClass, TraceFormatError, TraceInvariantError, read_trace, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_size(text: str) -> int:
    """'256k' -> 262144, '2m' -> 2097152, plain integers are bytes."""
    t = text.strip().lower()
    mult = 1
    for suffix, m in (("k", 1 << 10), ("m", 1 << 20), ("g", 1 << 30)):
        if t.endswith(suffix) or t.endswith(suffix + "b"):
            t = t[: -len(suffix + "b")] if t.endswith(suffix + "b") else t[:-1]
            mult = m
            break
    try:
        return int(t) * mult
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=1)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_workload(path: str, seed: int | None) -> SynthWorkloadSpec:
    d = tomli.loads(Path(path).read_text())
    d = d.get("workload", d)
    if seed is not None:
        d["rng_seed"] = seed
    return SynthWorkloadSpec.from_dict(d)


def cmd_trace_gen(args) -> int:
    spec = _load_workload(args.spec, args.seed)
    trace = generate_synthetic(spec)
    write_trace(trace, args.output)
    print(f"wrote {len(trace)} instructions to {args.output}")
    return EXIT_OK


def cmd_trace_info(args) -> int:
    tr = read_trace(args.trace)
    classes = Counter(IClass(c).name.lower() for c in tr.iclasses().tolist())
    _write_json({
        "name": tr.meta.name,
        "instructions": len(tr),
        "instruction_size": tr.meta.instruction_size,
        "cacheline_size": tr.meta.cacheline_size,
        "unique_pcs": len(set(tr.pcs.tolist())),
        "unique_lines": tr.unique_lines(),
        "classes": dict(sorted(classes.items())),
    }, None)
    return EXIT_OK


def _hb_config(args) -> HBConfig:
    return HBConfig(probability_threshold=args.threshold)


def _ssra_config(args) -> SSRAConfig:
    return SSRAConfig(max_depth_hbs=args.depth, max_cachelines_per_entry=args.lastn,
                      containment_pruning=not args.no_prune)


def cmd_analyze_cfg(args) -> int:
    tr = read_trace(args.trace)
    cfg = build_cfg(tr)
    out = cfg.to_json()
    out["cycles"] = [
        {"kind": c.kind, "header": hex(c.header), "body": [hex(b) for b in sorted(c.body)],
         "exits": [{"from": hex(u), "to": hex(v), "count": n} for u, v, n in c.exit_edges],
         "reducible": c.reducible}
        for c in detect_cycles(cfg)
    ]
    _write_json(out, args.output)
    return EXIT_OK


def cmd_analyze_hb(args) -> int:
    tr = read_trace(args.trace)
    cfg = build_cfg(tr)
    hba = analyze_hyperblocks(tr, cfg, detect_cycles(cfg), _hb_config(args))
    _write_json({
        "threshold": args.threshold,
        "triggers": [hex(t) for t in sorted(hba.triggers)],
        "hyperblocks": [hb.to_json() for _, hb in sorted(hba.hbs.items())],
    }, args.output)
    return EXIT_OK


def cmd_genmeta(args) -> int:
    tr = read_trace(args.trace)
    a = analyze(tr, _hb_config(args), _ssra_config(args))
    write_table(a.table, args.output)
    stats = dict(a.stats)
    stats.update(metadata_bytes=a.metadata_bytes, code_bytes=a.code_bytes,
                 overhead=a.overhead, lossy_drops=a.lossy_drops)
    _write_json(stats, None)
    return EXIT_OK


def cmd_simulate(args) -> int:
    tr = read_trace(args.trace)
    cache = CacheConfig(l1i_size=args.l1i, l1i_assoc=args.l1i_assoc, l2_size=args.l2,
                        l2_assoc=args.l2_assoc, l2_hit=args.l2_latency, dram=args.dram_latency)
    dru = DRUConfig(mode=args.mode, ras_size=args.ras, prefetch_buffer_size=args.pfb,
                    metadata_load_latency=args.md_latency, ras_top_prefetch=not args.no_ras_top,
                    metadata_cache_entries=args.md_cache, runahead_depth=args.depth,
                    warm_metadata_cache=args.warm)
    train = test = tr
    if args.holdout:
        half = len(tr) // 2
        train, test = tr.slice(0, half), tr.slice(half, len(tr))
    if args.mode == "ssra" and args.meta:
        rep = simulate(test, read_table(args.meta), cache, dru)
    else:
        rep = run_mode(test, args.mode, _hb_config(args), _ssra_config(args), cache,
                       replace(dru, mode=args.mode), train=train)
    rep.extra["holdout"] = bool(args.holdout)
    _write_json(rep.to_json(), args.output)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [json.loads(Path(p).read_text()) for p in args.reports]
    if len(reports) < 2:
        raise UsageError("report needs a baseline and at least one candidate")
    rows = compare_report(reports[0], *reports[1:])
    if args.output and args.output.endswith(".json"):
        _write_json(rows, args.output)
    elif args.output:
        Path(args.output).write_text(rows_to_csv(rows))
    else:
        sys.stdout.write(rows_to_csv(rows))
    if args.plot:
        plot_rows(rows, args.plot)
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.load(args.recipe)
    if args.seed is not None and spec.workload is not None:
        spec.workload = replace(spec.workload, rng_seed=args.seed)
    if args.output:
        spec.output = args.output
    bundle = run_experiment(spec, threads=args.threads)
    sys.stdout.write(rows_to_csv(bundle.table))
    return EXIT_OK


def _add_analysis_flags(p) -> None:
    p.add_argument("--threshold", type=float, default=0.8, help="HB edge probability threshold")
    p.add_argument("--depth", type=int, default=50, help="runahead depth in HBs")
    p.add_argument("--lastn", type=int, default=16, help="cachelines kept per entry")
    p.add_argument("--no-prune", action="store_true", help="disable containment pruning")


def _global_flags(p, suppress: bool = False) -> None:
    # also attached to every subcommand; SUPPRESS keeps the top-level values
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="override the workload RNG seed")
    p.add_argument("--threads", type=int, default=d(1), help="worker processes for sweeps")
    p.add_argument("--json-errors", action="store_true", default=d(False),
                   help="emit errors as JSON on stderr")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="deer", description="Deep runahead instruction prefetcher toolchain")
    ap.add_argument("--version", action="version", version=f"deer {__version__}")
    _global_flags(ap)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    tr = sub.add_parser("trace", help="generate or inspect traces")
    trs = tr.add_subparsers(dest="trace_cmd", parser_class=_Parser)
    g = trs.add_parser("gen", parents=[common], help="generate a synthetic trace")
    g.add_argument("--spec", required=True, help="workload TOML")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_trace_gen)
    i = trs.add_parser("info", parents=[common], help="summarize a trace")
    i.add_argument("trace")
    i.set_defaults(func=cmd_trace_info)

    an = sub.add_parser("analyze", help="dump CFG or hyperblocks as JSON")
    ans = an.add_subparsers(dest="analyze_cmd", parser_class=_Parser)
    c = ans.add_parser("cfg", parents=[common])
    c.add_argument("trace")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_analyze_cfg)
    h = ans.add_parser("hb", parents=[common])
    h.add_argument("trace")
    h.add_argument("--threshold", type=float, default=0.8)
    h.add_argument("-o", "--output")
    h.set_defaults(func=cmd_analyze_hb)

    m = sub.add_parser("genmeta", parents=[common], help="build the metadata table")
    m.add_argument("trace")
    _add_analysis_flags(m)
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_genmeta)

    s = sub.add_parser("simulate", parents=[common], help="run the cache simulator")
    s.add_argument("trace")
    s.add_argument("--meta", help="metadata table from genmeta (mode ssra)")
    s.add_argument("--mode", choices=MODES, default="ssra")
    s.add_argument("--l1i", type=parse_size, default=256 << 10)
    s.add_argument("--l1i-assoc", type=int, default=8)
    s.add_argument("--l2", type=parse_size, default=2 << 20)
    s.add_argument("--l2-assoc", type=int, default=8)
    s.add_argument("--l2-latency", type=int, default=12)
    s.add_argument("--dram-latency", type=int, default=150)
    s.add_argument("--md-latency", type=int, default=400)
    s.add_argument("--pfb", type=int, default=32)
    s.add_argument("--ras", type=int, default=16)
    s.add_argument("--md-cache", type=int, default=None, help="dynamic mode metadata cache entries")
    s.add_argument("--warm", action="store_true", help="warm the dynamic metadata cache")
    s.add_argument("--no-ras-top", action="store_true")
    s.add_argument("--holdout", action="store_true", help="train on first half, test on second")
    _add_analysis_flags(s)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", parents=[common], help="compare simulation reports (first is the baseline)")
    r.add_argument("reports", nargs="+")
    r.add_argument("-o", "--output")
    r.add_argument("--plot")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("experiment", parents=[common], help="run a TOML experiment recipe")
    e.add_argument("recipe")
    e.add_argument("-o", "--output", help="output directory")
    e.set_defaults(func=cmd_experiment)
    return ap


DATA_ERRORS = (TraceFormatError, TraceInvariantError, EncodingError, InsertionFailure,
               ConfigMismatch, ExperimentError, tomli.TOMLDecodeError, OSError, ValueError,
               KeyError)


def _fail(args_json: bool, code: int, exc: BaseException) -> int:
    if args_json:
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        for attr in ("offset", "index", "cacheline"):
            if hasattr(exc, attr):
                payload[attr] = getattr(exc, attr)
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"deer: error: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    json_errors = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("missing command; see deer --help")
        return args.func(args)
    except UsageError as e:
        return _fail(json_errors, EXIT_USAGE, e)
    except argparse.ArgumentTypeError as e:
        return _fail(json_errors, EXIT_USAGE, e)
    except DATA_ERRORS as e:
        return _fail(json_errors, EXIT_DATA, e)


if __name__ == "__main__":
    sys.exit(main())
