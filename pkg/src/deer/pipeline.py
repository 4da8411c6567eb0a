"""Offline analysis: trace to CFG, hyperblocks, SSRA chains and the metadata table."""

from __future__ import annotations

from dataclasses import dataclass, field

from .cfg import CFG, CycleInfo, build_cfg, detect_cycles
from .hyperblock import HBAnalysis, HBConfig, Hyperblock, analyze_hyperblocks
from .metacodec import HashConfig, MetadataEntry, MetadataTable, encode_lossy, table_build
from .ssra import SSRAChain, SSRAConfig, build_all_chains, prune_contained, select_cachelines
from .trace import Trace


@dataclass
class Analysis:
    cfg: CFG
    cycles: list[CycleInfo]
    hb: HBAnalysis
    chains: dict[int, SSRAChain]
    kept: dict[int, SSRAChain]
    pruned: dict[int, int]
    entries: dict[int, MetadataEntry]
    table: MetadataTable
    lossy_drops: int = 0
    code_bytes: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def hbs(self) -> dict[int, Hyperblock]:
        return self.hb.hbs

    @property
    def metadata_bytes(self) -> int:
        return self.table.memory_bytes

    @property
    def overhead(self) -> float:
        return self.metadata_bytes / self.code_bytes if self.code_bytes else 0.0


def encode_chains(chains: dict[int, SSRAChain], last_n: int) -> tuple[dict[int, MetadataEntry], int]:
    """Select the last ``last_n`` lines of each chain and encode them (lossy if needed)."""
    entries = {}
    drops = 0
    for t, ch in chains.items():
        if not ch.hbs:
            continue
        entry, d = encode_lossy(t, select_cachelines(ch, last_n))
        entries[t] = entry
        drops += d
    return entries, drops


def analyze(trace: Trace, hb_config: HBConfig | None = None,
            ssra_config: SSRAConfig | None = None,
            hash_config: HashConfig | None = None) -> Analysis:
    ssra_config = ssra_config or SSRAConfig()
    cfg = build_cfg(trace)
    cycles = detect_cycles(cfg)
    hb = analyze_hyperblocks(trace, cfg, cycles, hb_config)
    chains = build_all_chains(hb.hbs, hb.triggers, ssra_config)
    if ssra_config.containment_pruning:
        kept, pruned = prune_contained(chains, hb.transitions.predecessors())
    else:
        kept, pruned = dict(chains), {}
    entries, drops = encode_chains(kept, ssra_config.max_cachelines_per_entry)
    table = table_build(entries, hash_config)
    isize = trace.meta.instruction_size
    code_bytes = len(set(trace.pcs.tolist())) * isize
    reasons: dict[str, int] = {}
    for ch in chains.values():
        reasons[ch.truncation_reason] = reasons.get(ch.truncation_reason, 0) + 1
    stats = {
        "blocks": len(cfg.blocks),
        "hyperblocks": len(hb.hbs),
        "triggers": len(hb.triggers),
        "chains": len(chains),
        "pruned": len(pruned),
        "entries": len(entries),
        "buckets": table.bucket_count,
        "truncation_reasons": reasons,
        "loops": sum(1 for c in cycles if c.kind == "loop"),
        "recursions": sum(1 for c in cycles if c.kind == "recursion"),
    }
    return Analysis(cfg, cycles, hb, chains, kept, pruned, entries, table, drops,
                    code_bytes, stats)
