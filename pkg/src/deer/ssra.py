"""Semi-static runahead chains: offline walk of MLS links with a static RAS."""

from __future__ import annotations

from dataclasses import dataclass, field

from .hyperblock import HBType, Hyperblock

DEPTH_CAP = "depth_cap"
STATIC_RAS_EXHAUSTED = "static_ras_exhausted"
NO_MLS = "no_mls"
CYCLE_NO_EXIT = "cycle_no_exit"

MAX_ENCODABLE_LINES = 48


@dataclass
class SSRAConfig:
    max_depth_hbs: int = 50
    max_cachelines_per_entry: int = 16
    containment_pruning: bool = True

    def __post_init__(self):
        if self.max_depth_hbs < 1:
            raise ValueError("max_depth_hbs must be >= 1")
        if not 1 <= self.max_cachelines_per_entry <= MAX_ENCODABLE_LINES:
            raise ValueError(f"max_cachelines_per_entry must be in [1, {MAX_ENCODABLE_LINES}]")


@dataclass
class SSRAChain:
    trigger_pc: int
    hbs: list[int]
    cachelines: list[int]
    truncation_reason: str
    n_insts: int = 0
    pruned_by: int | None = None
    steps: list[tuple[list[int], int]] = field(default_factory=list, repr=False)


def walk_step(hb: Hyperblock, ras: list[int]) -> tuple[int | None, str | None]:
    """One runahead step from ``hb``; mutates ``ras``.

    Returns (next start pc, stop reason).  A return HB with an empty ``ras``
    yields reason ``static_ras_exhausted``.
    """
    if hb.skip == "recursion" or hb.hb_type is HBType.OTHER:
        nxt = hb.next_hb
    elif hb.hb_type is HBType.CALL:
        ras.append(hb.return_address)
        nxt = hb.next_hb
    else:
        if not ras:
            return None, STATIC_RAS_EXHAUSTED
        nxt = ras.pop()
    if nxt is None:
        return None, CYCLE_NO_EXIT if hb.truncation == CYCLE_NO_EXIT else NO_MLS
    return nxt, None


def build_chain(trigger_pc: int, hbs: dict[int, Hyperblock],
                config: SSRAConfig | None = None) -> SSRAChain:
    config = config or SSRAConfig()
    if trigger_pc not in hbs:
        return SSRAChain(trigger_pc, [], [], NO_MLS)
    chain = [trigger_pc]
    ras: list[int] = []
    cur = hbs[trigger_pc]
    while True:
        if len(chain) >= config.max_depth_hbs:
            reason = DEPTH_CAP
            break
        nxt, reason = walk_step(cur, ras)
        if reason is not None:
            break
        if nxt not in hbs:
            reason = NO_MLS
            break
        chain.append(nxt)
        cur = hbs[nxt]
    steps = [(hbs[s].step_lines(), hbs[s].step_insts()) for s in chain]
    lines: list[int] = []
    seen = set()
    for ls, _ in steps:
        for l in ls:
            if l not in seen:
                seen.add(l)
                lines.append(l)
    return SSRAChain(trigger_pc, chain, lines, reason, sum(n for _, n in steps), steps=steps)


def chain_line_sequence(chain: SSRAChain) -> list[int]:
    """All cachelines of the chain in walk order, with repeats."""
    return [l for ls, _ in chain.steps for l in ls]


def select_cachelines(chain: SSRAChain | list[int], n: int) -> list[int]:
    """Keep the last ``n`` unique cachelines by final occurrence in the chain.

    With at most ``n`` uniques, all are kept in first-occurrence order.
    """
    seq = chain_line_sequence(chain) if isinstance(chain, SSRAChain) else list(chain)
    last: dict[int, int] = {}
    first: dict[int, int] = {}
    for pos, l in enumerate(seq):
        last[l] = pos
        first.setdefault(l, pos)
    if len(last) <= n:
        return sorted(first, key=first.__getitem__)
    keep = sorted(last, key=last.__getitem__)[-n:]
    return keep


def build_all_chains(hbs: dict[int, Hyperblock], triggers, config: SSRAConfig | None = None
                     ) -> dict[int, SSRAChain]:
    config = config or SSRAConfig()
    return {t: build_chain(t, hbs, config) for t in sorted(triggers)}


def _contains(seq: list[int], sub: list[int]) -> bool:
    n, m = len(seq), len(sub)
    if m > n:
        return False
    first = sub[0]
    for i in range(n - m + 1):
        if seq[i] == first and seq[i:i + m] == sub:
            return True
    return False


def prune_contained(chains: dict[int, SSRAChain], predecessors: dict[int, set[int]]
                    ) -> tuple[dict[int, SSRAChain], dict[int, int]]:
    """Drop chains reachable only through a single covering chain.

    A chain C is removed iff its HB list is a contiguous run inside exactly one
    other chain D, and C's trigger HB has exactly one predecessor HB overall,
    which is a member of D.  Returns (kept chains, {pruned trigger: covering trigger}).
    Containment is checked against the original set, so removals do not cascade.
    """
    by_first: dict[int, list[int]] = {}
    for t, ch in chains.items():
        for h in set(ch.hbs):
            by_first.setdefault(h, []).append(t)
    removed: dict[int, int] = {}
    for t, c in chains.items():
        if not c.hbs:
            continue
        preds = predecessors.get(t, set())
        if len(preds) != 1:
            continue
        (pred,) = preds
        covering = [d for d in by_first.get(c.hbs[0], []) if d != t and _contains(chains[d].hbs, c.hbs)]
        if len(covering) != 1:
            continue
        d = covering[0]
        if pred in chains[d].hbs:
            removed[t] = d
    kept = {}
    for t, c in chains.items():
        if t in removed:
            c.pruned_by = removed[t]
        else:
            kept[t] = c
    return kept, removed
