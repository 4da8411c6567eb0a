"""Hyperblock formation, most-likely-successor links and cycle skipping."""

from __future__ import annotations

import enum
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterator

from .cfg import CALL, CFG, INTRA_KINDS, RETURN, CycleInfo, back_edge_set
from .trace import IClass, Trace


class HBType(str, enum.Enum):
    CALL = "call"
    RETURN = "return"
    OTHER = "other"


@dataclass
class HBConfig:
    probability_threshold: float = 0.8
    cold_floor: int = 2
    mls_tiebreak: str = "count-then-lowest-pc"

    def __post_init__(self):
        if not 0.0 < self.probability_threshold <= 1.0:
            raise ValueError("probability_threshold must be in (0, 1]")


@dataclass
class Hyperblock:
    start_pc: int
    blocks: list[int]
    block_ends: list[int]
    hb_type: HBType
    function: int
    cachelines: list[int]
    n_insts: int
    return_address: int | None = None
    exec_count: int = 0
    mls: int | None = None
    successors: dict[int, int] = field(default_factory=dict)
    # effective continuation used by runahead walks (MLS after cycle skipping)
    next_hb: int | None = None
    skip: str | None = None
    cycle_lines: list[int] = field(default_factory=list)
    cycle_insts: int = 0
    truncation: str | None = None

    def step_lines(self) -> list[int]:
        if not self.cycle_lines:
            return self.cachelines
        seen = set(self.cachelines)
        return self.cachelines + [l for l in self.cycle_lines if l not in seen]

    def step_insts(self) -> int:
        return self.n_insts + self.cycle_insts

    def to_json(self) -> dict:
        return {
            "start": hex(self.start_pc),
            "type": self.hb_type.value,
            "blocks": [hex(b) for b in self.blocks],
            "function": hex(self.function),
            "return_address": hex(self.return_address) if self.return_address is not None else None,
            "cachelines": [hex(l) for l in self.cachelines],
            "n_insts": self.n_insts,
            "exec_count": self.exec_count,
            "mls": hex(self.mls) if self.mls is not None else None,
            "next": hex(self.next_hb) if self.next_hb is not None else None,
            "skip": self.skip,
            "cycle_lines": [hex(l) for l in self.cycle_lines],
            "truncation": self.truncation,
        }


def block_lines(start: int, end: int, line_size: int = 64) -> range:
    mask = ~(line_size - 1)
    return range(start & mask, (end & mask) + line_size, line_size)


def _type_of(term: IClass) -> HBType:
    if term in (IClass.CALL, IClass.INDIRECT_CALL):
        return HBType.CALL
    if term is IClass.RETURN:
        return HBType.RETURN
    return HBType.OTHER


def trigger_targets(cfg: CFG) -> set[int]:
    """Blocks entered by a call or return: the trigger PCs."""
    return {v for (_, v, k) in cfg.edges if k in (CALL, RETURN)}


def form_hyperblocks(cfg: CFG, config: HBConfig | None = None,
                     cycles: list[CycleInfo] | None = None) -> dict[int, Hyperblock]:
    """Grow one HB per start block along edges whose probability meets the threshold.

    Starts are the trace head, every call/return target, every loop exit target and,
    to a fixpoint, every successor an HB does not follow, so any divergence from an
    HB lands on the start of another one.  Growth also stops at loop back edges so
    each loop iteration begins a new HB instance.
    """
    config = config or HBConfig()
    thr = config.probability_threshold
    back = back_edge_set(cycles or [])
    blocks = cfg.blocks
    if not blocks:
        return {}

    def grow(start: int) -> list[int]:
        fn = blocks[start].function
        members = [start]
        cur = start
        while True:
            if blocks[cur].terminator in (IClass.CALL, IClass.INDIRECT_CALL, IClass.RETURN):
                break
            total = cfg.out_count(cur)
            if total == 0:
                break
            per_target: dict[int, int] = defaultdict(int)
            for v, k, c in cfg.successors(cur):
                if k in INTRA_KINDS:
                    per_target[v] += c
            best = None
            for v, c in sorted(per_target.items()):
                if c / total >= thr and (best is None or c > per_target[best]):
                    best = v
            if best is None or (cur, best) in back or blocks[best].function != fn \
                    or best in members:
                break
            members.append(best)
            cur = best
        return members

    seeds = {cfg.first_block} | trigger_targets(cfg)
    for cyc in cycles or []:
        seeds.update(v for _, v, _ in cyc.exit_edges)
    hbs: dict[int, Hyperblock] = {}
    work = sorted(seeds, reverse=True)
    while work:
        s = work.pop()
        if s in hbs or s not in blocks:
            continue
        members = grow(s)
        last = blocks[members[-1]]
        lines: list[int] = []
        seen = set()
        for m in members:
            for l in block_lines(m, blocks[m].end_pc):
                if l not in seen:
                    seen.add(l)
                    lines.append(l)
        hb_type = _type_of(last.terminator)
        hbs[s] = Hyperblock(
            start_pc=s,
            blocks=members,
            block_ends=[blocks[m].end_pc for m in members],
            hb_type=hb_type,
            function=blocks[s].function,
            cachelines=lines,
            n_insts=sum(blocks[m].n_insts for m in members),
            return_address=last.end_pc + 4 if hb_type is HBType.CALL else None,
        )
        for i, m in enumerate(members):
            cont = members[i + 1] if i + 1 < len(members) else None
            for v, _, _ in cfg.successors(m):
                if v != cont and v not in hbs:
                    work.append(v)
    return hbs


def segment(trace: Trace, hbs: dict[int, Hyperblock]) -> Iterator[tuple[int, int, int | None]]:
    """Split the instruction stream into HB instances.

    Yields ``(instruction index, hb start, last block of the previous instance)``
    for each instance start.  An instance continues while execution follows its
    member blocks; anything else starts a new instance at the current PC.
    """
    pcs, _, cls = trace.columns()
    cur: Hyperblock | None = None
    k = 0
    end = -1
    prev_pc = None
    prev_cls = 0
    for i, pc in enumerate(pcs):
        if cur is not None:
            if prev_pc != end and prev_cls == 0 and pc == prev_pc + 4:
                prev_pc, prev_cls = pc, cls[i]
                continue
            if prev_pc == end and k + 1 < len(cur.blocks) and pc == cur.blocks[k + 1]:
                k += 1
                end = cur.block_ends[k]
                prev_pc, prev_cls = pc, cls[i]
                continue
        hb = hbs.get(pc)
        if hb is not None:
            yield i, pc, (cur.blocks[k] if cur is not None else None)
            cur, k, end = hb, 0, hb.block_ends[0]
        elif cur is not None:
            cur = None
        prev_pc, prev_cls = pc, cls[i]


@dataclass
class Transitions:
    counts: dict[int, Counter] = field(default_factory=lambda: defaultdict(Counter))
    from_blocks: dict[tuple[int, int], Counter] = field(default_factory=lambda: defaultdict(Counter))

    def predecessors(self) -> dict[int, set[int]]:
        pred: dict[int, set[int]] = defaultdict(set)
        for a, succ in self.counts.items():
            for b in succ:
                pred[b].add(a)
        return pred


def compute_mls(trace: Trace, hbs: dict[int, Hyperblock],
                config: HBConfig | None = None) -> Transitions:
    """Replay the trace over the HB map and set each HB's most likely successor."""
    config = config or HBConfig()
    tr = Transitions()
    for hb in hbs.values():
        hb.exec_count = 0
    prev = None
    for _, s, from_block in segment(trace, hbs):
        hbs[s].exec_count += 1
        if prev is not None and from_block is not None:
            tr.counts[prev][s] += 1
            tr.from_blocks[(prev, s)][from_block] += 1
        prev = s
    for s, hb in hbs.items():
        succ = tr.counts.get(s, Counter())
        hb.successors = dict(succ)
        hb.mls = None
        if hb.hb_type is HBType.RETURN or hb.exec_count < config.cold_floor or not succ:
            continue
        hb.mls = min(succ.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    for hb in hbs.values():
        hb.next_hb = hb.mls
    return tr


def _lines_of(cfg: CFG, body) -> tuple[list[int], int]:
    seen = set()
    lines = []
    insts = 0
    for b in sorted(body):
        insts += cfg.blocks[b].n_insts
        for l in block_lines(b, cfg.blocks[b].end_pc):
            if l not in seen:
                seen.add(l)
                lines.append(l)
    return lines, insts


def apply_cycle_skipping(hbs: dict[int, Hyperblock], cycles: list[CycleInfo], cfg: CFG,
                         transitions: Transitions) -> None:
    """Rewire continuations past loops and recursion.

    An ``other`` HB whose MLS link follows a loop back edge, or enters a loop from
    outside, continues at the loop's most likely exit instead; one traversal of the
    loop body is attached as ``cycle_lines``.  A call HB whose callee is in the
    same recursive component skips the call and continues at its return address.
    """
    loops = [c for c in cycles if c.kind == "loop"]
    recursions = [c for c in cycles if c.kind == "recursion"]
    by_back_edge: dict[tuple[int, int], list[CycleInfo]] = defaultdict(list)
    for lp in loops:
        for e in lp.back_edges:
            by_back_edge[e].append(lp)
    line_cache: dict[int, tuple[list[int], int]] = {}

    def attach(hb: Hyperblock, cyc: CycleInfo, kind: str, nxt: int | None):
        key = id(cyc)
        if key not in line_cache:
            line_cache[key] = _lines_of(cfg, cyc.body)
        hb.cycle_lines, hb.cycle_insts = line_cache[key]
        hb.skip = kind
        hb.next_hb = nxt if nxt in hbs else None
        hb.truncation = None if hb.next_hb is not None else "cycle_no_exit"

    for s, hb in sorted(hbs.items()):
        hb.next_hb, hb.skip, hb.cycle_lines, hb.cycle_insts, hb.truncation = \
            hb.mls, None, [], 0, None
        m = hb.mls
        if m is None:
            continue
        if hb.hb_type is HBType.CALL:
            callee_fn = cfg.blocks[m].function
            for rec in recursions:
                if callee_fn in rec.functions and hb.function in rec.functions:
                    attach(hb, rec, "recursion", hb.return_address)
                    break
            continue
        fb_counts = transitions.from_blocks.get((s, m))
        f = fb_counts.most_common(1)[0][0] if fb_counts else hb.blocks[-1]
        fn = cfg.blocks[f].function
        # entering from outside, either by the MLS edge or by the HB's own growth
        entering = [lp for lp in loops if fn in lp.functions and (
            (m in lp.body and f not in lp.body)
            or (s not in lp.body and (f in lp.body or m in lp.body)))]
        if entering:
            lp = max(entering, key=lambda c: (len(c.body), -c.header))
            attach(hb, lp, "loop", lp.best_exit())
            continue
        cands = by_back_edge.get((f, m))
        if cands:
            lp = min(cands, key=lambda c: len(c.body))
            attach(hb, lp, "loop", lp.best_exit())


@dataclass
class HBAnalysis:
    hbs: dict[int, Hyperblock]
    transitions: Transitions
    triggers: set[int]


def analyze_hyperblocks(trace: Trace, cfg: CFG, cycles: list[CycleInfo],
                        config: HBConfig | None = None) -> HBAnalysis:
    hbs = form_hyperblocks(cfg, config, cycles)
    tr = compute_mls(trace, hbs, config)
    apply_cycle_skipping(hbs, cycles, cfg, tr)
    triggers = {t for t in trigger_targets(cfg) if t in hbs}
    return HBAnalysis(hbs, tr, triggers)
