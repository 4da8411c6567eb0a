"""Basic blocks, control-flow graph and call graph reconstructed from a trace."""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .trace import IClass, Trace, FLAG_TAKEN

FALLTHROUGH = "fallthrough"
TAKEN = "taken"
CALL = "call"
RETURN = "return"
EDGE_KINDS = (FALLTHROUGH, TAKEN, CALL, RETURN)
INTRA_KINDS = (FALLTHROUGH, TAKEN)

_KIND_CLASS = {FALLTHROUGH: "branch", TAKEN: "branch", CALL: CALL, RETURN: RETURN}


@dataclass
class BasicBlock:
    start_pc: int
    end_pc: int
    terminator: IClass
    exec_count: int = 0
    function: int = 0

    @property
    def n_insts(self) -> int:
        return (self.end_pc - self.start_pc) // 4 + 1

    def pcs(self) -> range:
        return range(self.start_pc, self.end_pc + 4, 4)


@dataclass
class CFG:
    blocks: dict[int, BasicBlock]
    edges: dict[tuple[int, int, str], int]
    # call block -> block at its return address, counted on matched returns
    summary_edges: dict[tuple[int, int], int]
    function_entries: list[int]
    first_block: int | None = None
    last_block: int | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._succ = None
        self._pred = None

    def successors(self, b: int) -> list[tuple[int, str, int]]:
        if self._succ is None:
            self._index()
        return self._succ.get(b, [])

    def predecessors(self, b: int) -> list[tuple[int, str, int]]:
        if self._pred is None:
            self._index()
        return self._pred.get(b, [])

    def _index(self):
        succ, pred = defaultdict(list), defaultdict(list)
        for (u, v, k), c in sorted(self.edges.items()):
            succ[u].append((v, k, c))
            pred[v].append((u, k, c))
        self._succ, self._pred = dict(succ), dict(pred)

    def out_count(self, b: int) -> int:
        return sum(c for _, _, c in self.successors(b))

    def function_of(self, pc: int) -> int:
        i = bisect.bisect_right(self.function_entries, pc) - 1
        return self.function_entries[max(i, 0)]

    def function_blocks(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for s, b in sorted(self.blocks.items()):
            out[b.function].append(s)
        return dict(out)

    def intra_graph(self, function: int | None = None) -> nx.DiGraph:
        """Intra-function flow graph: branch edges plus call-continuation edges."""
        g = nx.DiGraph()
        for s, b in self.blocks.items():
            if function is None or b.function == function:
                g.add_node(s)
        for (u, v, k), c in self.edges.items():
            if k in INTRA_KINDS and u in g and v in g and \
                    self.blocks[u].function == self.blocks[v].function:
                _add(g, u, v, c)
        for (u, v), c in self.summary_edges.items():
            if u in g and v in g and self.blocks[u].function == self.blocks[v].function:
                _add(g, u, v, c)
        return g

    def to_json(self) -> dict:
        probs = {(p.from_bb, p.to_bb, p.kind): p.probability for p in edge_probabilities(self)}
        return {
            "function_entries": [hex(e) for e in self.function_entries],
            "blocks": [
                {
                    "start": hex(b.start_pc),
                    "end": hex(b.end_pc),
                    "terminator": b.terminator.name.lower(),
                    "exec_count": b.exec_count,
                    "function": hex(b.function),
                }
                for _, b in sorted(self.blocks.items())
            ],
            "edges": [
                {"from": hex(u), "to": hex(v), "kind": k, "count": c,
                 "probability": probs[(u, v, k)]}
                for (u, v, k), c in sorted(self.edges.items())
            ],
            "warnings": self.warnings,
        }


def _add(g: nx.DiGraph, u: int, v: int, c: int) -> None:
    if g.has_edge(u, v):
        g[u][v]["count"] += c
    else:
        g.add_edge(u, v, count=c)


def build_cfg(trace: Trace) -> CFG:
    """Reconstruct basic blocks and edges; blocks are split at every observed entry."""
    n = len(trace)
    if n == 0:
        return CFG({}, {}, {}, [])
    pcs, targets, cls = trace.columns()
    taken = ((trace.flags & FLAG_TAKEN) != 0).tolist()

    static: dict[int, int] = dict(zip(pcs, cls))
    pc_arr = trace.pcs.astype(np.int64)
    cls_arr = np.asarray(cls)
    nonseq = np.nonzero((cls_arr[:-1] != 0) | (pc_arr[1:] != pc_arr[:-1] + 4))[0] + 1
    leaders = {pcs[0]}
    leaders.update(pc_arr[nonseq].tolist())

    warnings = []
    seq_idx = np.nonzero((cls_arr[:-1] == 0) & (pc_arr[1:] == pc_arr[:-1] + 4))[0] + 1
    seq_entered = set(pc_arr[seq_idx].tolist())
    for pc in sorted(leaders & seq_entered):
        warnings.append(f"block split at {pc:#x}: entered both sequentially and by a transfer")

    blocks: dict[int, BasicBlock] = {}
    for start in leaders:
        pc = start
        while static[pc] == 0 and (pc + 4) in static and (pc + 4) not in leaders:
            pc += 4
        blocks[start] = BasicBlock(start, pc, IClass(static[pc]))

    entries = {pcs[0]}
    for i in np.nonzero((cls_arr == IClass.CALL) | (cls_arr == IClass.INDIRECT_CALL))[0].tolist():
        entries.add(targets[i])
    entries = sorted(entries)
    for b in blocks.values():
        i = bisect.bisect_right(entries, b.start_pc) - 1
        b.function = entries[max(i, 0)]

    edges: dict[tuple[int, int, str], int] = defaultdict(int)
    summary: dict[tuple[int, int], int] = defaultdict(int)
    stack: list[tuple[int, int]] = []
    cur = None
    for i in range(n):
        pc = pcs[i]
        if pc in blocks:
            if cur is not None:
                c = cls[i - 1]
                if c == 0:
                    kind = FALLTHROUGH
                elif c == IClass.COND:
                    kind = TAKEN if taken[i - 1] else FALLTHROUGH
                elif c == IClass.UNCOND:
                    kind = TAKEN
                elif c == IClass.RETURN:
                    kind = RETURN
                else:
                    kind = CALL
                edges[(cur, pc, kind)] += 1
            cur = pc
            blocks[pc].exec_count += 1
        c = cls[i]
        if c == IClass.CALL or c == IClass.INDIRECT_CALL:
            stack.append((cur, pc + 4))
        elif c == IClass.RETURN and stack:
            call_block, ret = stack.pop()
            if ret == targets[i] and ret in blocks:
                summary[(call_block, ret)] += 1

    cfg = CFG(blocks, dict(edges), dict(summary), entries, pcs[0], cur, warnings)
    return cfg


@dataclass(frozen=True)
class EdgeProbability:
    from_bb: int
    to_bb: int
    kind: str
    probability: float


def edge_probabilities(cfg: CFG) -> list[EdgeProbability]:
    """Edge count over the sum of its siblings in the same edge-kind class."""
    totals: dict[tuple[int, str], int] = defaultdict(int)
    for (u, _, k), c in cfg.edges.items():
        totals[(u, _KIND_CLASS[k])] += c
    return [
        EdgeProbability(u, v, k, c / totals[(u, _KIND_CLASS[k])])
        for (u, v, k), c in sorted(cfg.edges.items())
    ]


@dataclass(frozen=True)
class CycleInfo:
    kind: str  # "loop" or "recursion"
    header: int
    body: frozenset[int]
    back_edges: tuple[tuple[int, int], ...]
    exit_edges: tuple[tuple[int, int, int], ...]  # (from, to, count)
    functions: frozenset[int] = frozenset()
    reducible: bool = True

    def best_exit(self) -> int | None:
        """Target of the highest-count exit edge (lowest pc on ties)."""
        if not self.exit_edges:
            return None
        return min(self.exit_edges, key=lambda e: (-e[2], e[1], e[0]))[1]


def _dominates(idom: dict, h: int, u: int) -> bool:
    while True:
        if u == h:
            return True
        nxt = idom.get(u)
        if nxt is None or nxt == u:
            return False
        u = nxt


def _exit_edges(g: nx.DiGraph, body: set[int]) -> tuple:
    out = []
    for u in sorted(body):
        for v in sorted(g.successors(u)):
            if v not in body:
                out.append((u, v, g[u][v]["count"]))
    return tuple(out)


def _natural_loop(g: nx.DiGraph, header: int, tails: list[int]) -> set[int]:
    body = {header}
    work = [t for t in tails if t != header]
    body.update(work)
    while work:
        x = work.pop()
        for p in g.predecessors(x):
            if p not in body:
                body.add(p)
                work.append(p)
    return body


def detect_cycles(cfg: CFG) -> list[CycleInfo]:
    """Loops (dominator back edges, SCC fallback) and recursive call-graph SCCs."""
    cycles: list[CycleInfo] = []
    for fn, members in sorted(cfg.function_blocks().items()):
        g = cfg.intra_graph(fn)
        entry = fn if fn in g else members[0]
        idom = nx.immediate_dominators(g, entry)
        back: dict[int, list[int]] = defaultdict(list)
        for u, v in g.edges():
            if u in idom and v in idom and _dominates(idom, v, u):
                back[v].append(u)
        for h in sorted(back):
            tails = sorted(back[h])
            body = _natural_loop(g, h, tails)
            cycles.append(CycleInfo(
                "loop", h, frozenset(body), tuple((t, h) for t in tails), _exit_edges(g, body),
                frozenset({fn}),
            ))
        # irreducible remainder
        rest = g.copy()
        rest.remove_edges_from((t, h) for h, ts in back.items() for t in ts)
        for scc in nx.strongly_connected_components(rest):
            if len(scc) < 2 and not any(rest.has_edge(x, x) for x in scc):
                continue
            outside_pred = [x for x in scc if any(p not in scc for p in g.predecessors(x))]
            header = min(outside_pred) if outside_pred else min(scc)
            sub = rest.subgraph(scc)
            dfs_back = _dfs_back_edges(sub, header)
            cycles.append(CycleInfo(
                "loop", header, frozenset(scc), tuple(dfs_back), _exit_edges(g, set(scc)),
                frozenset({fn}), reducible=False,
            ))

    cg = call_graph(cfg)
    fblocks = cfg.function_blocks()
    for scc in nx.strongly_connected_components(cg):
        if len(scc) < 2 and not any(cg.has_edge(f, f) for f in scc):
            continue
        body = frozenset(b for f in scc for b in fblocks.get(f, []))
        inner_calls = tuple(sorted(
            (u, v) for (u, v, k) in cfg.edges
            if k == CALL and cfg.blocks[u].function in scc and cfg.blocks[v].function in scc
        ))
        cycles.append(CycleInfo(
            "recursion", min(scc), body, inner_calls, _recursion_exits(cfg, scc), frozenset(scc)
        ))
    return cycles


def _recursion_exits(cfg: CFG, scc: set[int]) -> tuple:
    """Continuations of calls that enter the recursive component from outside."""
    out = defaultdict(int)
    callee_of = defaultdict(set)
    for (u, v, k) in cfg.edges:
        if k == CALL:
            callee_of[u].add(cfg.blocks[v].function)
    for (u, v), c in cfg.summary_edges.items():
        if cfg.blocks[u].function not in scc and callee_of[u] & scc:
            out[(u, v)] += c
    return tuple(sorted((u, v, c) for (u, v), c in out.items()))


def _dfs_back_edges(g: nx.DiGraph, root: int) -> list[tuple[int, int]]:
    back = []
    state: dict[int, int] = {}
    for start in [root] + sorted(n for n in g if n != root):
        if start in state:
            continue
        stack = [(start, iter(sorted(g.successors(start))))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            for v in it:
                if state.get(v) == 1:
                    back.append((node, v))
                elif v not in state:
                    state[v] = 1
                    stack.append((v, iter(sorted(g.successors(v)))))
                    break
            else:
                state[node] = 2
                stack.pop()
    return back


def call_graph(cfg: CFG) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(cfg.function_entries)
    for (u, v, k), c in cfg.edges.items():
        if k == CALL:
            _add(g, cfg.blocks[u].function, cfg.blocks[v].function, c)
    return g


def back_edge_set(cycles: list[CycleInfo]) -> set[tuple[int, int]]:
    return {e for cyc in cycles if cyc.kind == "loop" for e in cyc.back_edges}
