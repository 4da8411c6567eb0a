"""TOML experiment recipes: one trace, a set of modes and one-axis-at-a-time sweeps."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .hyperblock import HBConfig
from .metrics import compare_report, rows_to_csv
from .pipeline import analyze
from .rivals import rnr_simulate
from .sim import CacheConfig, DRUConfig, SimReport, dynamic_metadata, run_oracle, simulate, \
    simulate_dynamic
from .ssra import SSRAConfig
from .synth import SynthWorkloadSpec, generate_synthetic
from .trace import Trace, read_trace

# sweep axis -> (config section, field, allowed range)
SWEEP_AXES = {
    "md_latency": ("dru", "metadata_load_latency", (0, 10_000)),
    "depth": ("ssra", "max_depth_hbs", (1, 1000)),
    "lastn": ("ssra", "max_cachelines_per_entry", (1, 48)),
    "pfb": ("dru", "prefetch_buffer_size", (1, 4096)),
    "ras": ("dru", "ras_size", (1, 1024)),
}


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    workload: SynthWorkloadSpec | None = None
    trace_path: str | None = None
    hb: HBConfig = field(default_factory=HBConfig)
    ssra: SSRAConfig = field(default_factory=SSRAConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    dru: DRUConfig = field(default_factory=DRUConfig)
    modes: list[str] = field(default_factory=lambda: ["off", "ssra"])
    sweep: dict[str, list[int]] = field(default_factory=dict)
    output: str | None = None

    def __post_init__(self):
        if (self.workload is None) == (self.trace_path is None):
            raise ValueError("exactly one of [workload] or trace_path is required")
        for axis, values in self.sweep.items():
            if axis not in SWEEP_AXES:
                raise ValueError(f"unknown sweep axis {axis!r}")
            lo, hi = SWEEP_AXES[axis][2]
            for v in values:
                if not lo <= v <= hi:
                    raise ValueError(f"sweep {axis}={v} outside [{lo}, {hi}]")

    @classmethod
    def from_toml(cls, text: str, base_dir: str | Path = ".") -> "ExperimentSpec":
        d = tomli.loads(text)
        trace_path = d.get("trace_path")
        if trace_path is not None:
            trace_path = str(Path(base_dir) / trace_path)
        return cls(
            workload=SynthWorkloadSpec.from_dict(d["workload"]) if "workload" in d else None,
            trace_path=trace_path,
            hb=HBConfig(**d.get("hb", {})),
            ssra=SSRAConfig(**d.get("ssra", {})),
            cache=CacheConfig(**d.get("cache", {})),
            dru=DRUConfig(**d.get("dru", {})),
            modes=list(d.get("modes", ["off", "ssra"])),
            sweep={k: list(v) for k, v in d.get("sweep", {}).items()},
            output=d.get("output"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        path = Path(path)
        return cls.from_toml(path.read_text(), path.parent)

    def load_trace(self) -> Trace:
        if self.trace_path is not None:
            return read_trace(self.trace_path)
        return generate_synthetic(self.workload)


def run_mode(trace: Trace, mode: str, hb: HBConfig, ssra: SSRAConfig, cache: CacheConfig,
             dru: DRUConfig, train: Trace | None = None) -> SimReport:
    """Simulate one mode; analysis comes from ``train`` (default: the same trace)."""
    if mode == "off":
        return simulate(trace, None, cache, replace(dru, mode="off"))
    if mode == "oracle":
        return run_oracle(trace, cache)
    a = analyze(train or trace, hb, ssra)
    if mode == "ssra":
        rep = simulate(trace, a.table, cache, replace(dru, mode="ssra"))
        rep.extra["metadata_bytes"] = a.metadata_bytes
        return rep
    if mode == "dynamic":
        return simulate_dynamic(trace, dynamic_metadata(a.hbs), cache, replace(dru, mode="dynamic"))
    if mode in ("rnr50", "rnr-unique50"):
        return rnr_simulate(trace, a.hbs, mode, cache, replace(dru, mode=mode),
                            replay_cap=ssra.max_cachelines_per_entry)
    raise ExperimentError(f"unknown mode {mode!r}")


@dataclass
class Point:
    label: str
    mode: str
    hb: HBConfig
    ssra: SSRAConfig
    cache: CacheConfig
    dru: DRUConfig


def sweep_points(spec: ExperimentSpec) -> list[Point]:
    points = [Point(m, m, spec.hb, spec.ssra, spec.cache, spec.dru) for m in spec.modes]
    for axis, values in spec.sweep.items():
        section, name, _ = SWEEP_AXES[axis]
        for v in values:
            ssra, dru = spec.ssra, spec.dru
            if section == "ssra":
                ssra = replace(ssra, **{name: v})
            else:
                dru = replace(dru, **{name: v})
            points.append(Point(f"ssra:{axis}={v}", "ssra", spec.hb, ssra, spec.cache, dru))
    return points


def _run_point(args) -> dict:
    trace, p = args
    try:
        rep = run_mode(trace, p.mode, p.hb, p.ssra, p.cache, p.dru)
    except Exception as e:  # keep sweep context on the error
        raise ExperimentError(f"sweep point {p.label}: {e}") from e
    d = rep.to_json()
    d["label"] = p.label
    return d


@dataclass
class ReportBundle:
    reports: dict[str, dict]
    table: list[dict]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label, rep in self.reports.items():
            safe = label.replace(":", "_").replace("=", "_")
            (out / f"{safe}.json").write_text(json.dumps(rep, indent=1))
        (out / "comparison.csv").write_text(rows_to_csv(self.table))


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ReportBundle:
    trace = spec.load_trace()
    points = sweep_points(spec)
    jobs = [(trace, p) for p in points]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    reports = {r["label"]: r for r in results}
    table: list[dict] = []
    if "off" in reports and len(reports) > 1:
        others = [r for lbl, r in reports.items() if lbl != "off"]
        table = compare_report(reports["off"], *others)
        for row, r in zip(table[1:], others):
            row["mode"] = r["label"]
    bundle = ReportBundle(reports, table)
    if spec.output:
        bundle.write(spec.output)
    return bundle

