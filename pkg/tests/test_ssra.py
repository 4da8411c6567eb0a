import random

import pytest
from hypothesis import given, strategies as st

from builders import HB1, HB3, HB4, HB5, TOP, topology_trace, random_spec, synth
from deer.hyperblock import HBType, Hyperblock
from deer.pipeline import analyze
from deer.sim import dynamic_metadata, dynamic_walk
from oracles import SENTINEL, oracle_walk
from deer.ssra import (CYCLE_NO_EXIT, DEPTH_CAP, NO_MLS, STATIC_RAS_EXHAUSTED, SSRAChain,
                       SSRAConfig, build_all_chains, build_chain, prune_contained,
                       select_cachelines)


def _hb(start, nxt=None, kind=HBType.OTHER, ret=None, lines=None):
    return Hyperblock(start, [start], [start], kind, start & ~0xFFF,
                      lines if lines is not None else [start & ~63], 4,
                      return_address=ret, mls=nxt, next_hb=nxt)


def test_topology_chain_stops_at_empty_static_ras():
    a = analyze(topology_trace())
    ch = a.chains[HB3]
    assert ch.hbs == [HB3, HB4, HB5]
    assert ch.truncation_reason == STATIC_RAS_EXHAUSTED


def test_no_mls_gives_single_hb():
    hbs = {0x40: _hb(0x40)}
    ch = build_chain(0x40, hbs)
    assert ch.hbs == [0x40] and ch.truncation_reason == NO_MLS


def test_linear_chain_hits_depth_cap():
    starts = [0x1000 + 0x40 * k for k in range(60)]
    hbs = {s: _hb(s, starts[k + 1] if k + 1 < 60 else None) for k, s in enumerate(starts)}
    ch = build_chain(starts[0], hbs, SSRAConfig(max_depth_hbs=50))
    assert ch.hbs == starts[:50]
    assert ch.truncation_reason == DEPTH_CAP
    assert len(ch.cachelines) == 50


def test_cycle_without_exit_reason():
    hb = _hb(0x80)
    hb.truncation = CYCLE_NO_EXIT
    assert build_chain(0x80, {0x80: hb}).truncation_reason == CYCLE_NO_EXIT


def test_unknown_trigger_is_empty():
    assert build_chain(0x123, {}).hbs == []


def test_chain_pushes_call_return_address():
    hbs = {
        0x100: _hb(0x100, 0x400, HBType.CALL, ret=0x108),
        0x400: _hb(0x400, None, HBType.RETURN),
        0x108: _hb(0x108, None),
    }
    ch = build_chain(0x100, hbs)
    assert ch.hbs == [0x100, 0x400, 0x108]
    assert ch.truncation_reason == NO_MLS


# -- select_cachelines ----------------------------------------------------------

def _last_n_oracle(seq, n):
    """Scan from the end collecting uniques; order them by last position."""
    picked = []
    for l in reversed(seq):
        if l not in picked:
            picked.append(l)
    if len(picked) <= n:
        return list(dict.fromkeys(seq))
    keep = picked[:n]
    lastpos = {l: max(i for i, x in enumerate(seq) if x == l) for l in keep}
    return sorted(keep, key=lastpos.get)


def test_select_keeps_all_when_few():
    seq = [64 * k for k in (3, 1, 3, 2, 9, 1, 4, 5, 6, 7, 8, 0)]
    out = select_cachelines(seq, 16)
    assert out == list(dict.fromkeys(seq)) and len(out) == 10


def test_select_last_16_of_40():
    rng = random.Random(5)
    seq = [64 * rng.randrange(40) for _ in range(200)] + [64 * k for k in range(40)]
    out = select_cachelines(seq, 16)
    assert out == [64 * k for k in range(24, 40)]
    assert out == _last_n_oracle(seq, 16)


def test_select_cap_48_of_60():
    seq = [64 * k for k in range(60)]
    assert select_cachelines(seq, 48) == seq[12:]


@given(st.lists(st.integers(0, 30), max_size=80), st.integers(1, 48))
def test_select_matches_oracle(raw, n):
    seq = [64 * x for x in raw]
    assert select_cachelines(seq, n) == _last_n_oracle(seq, n)


# -- pruning ---------------------------------------------------------------------

def _chain(t, hbs):
    return SSRAChain(t, list(hbs), [], NO_MLS)


def test_prune_contained_single_cover():
    A, B, C = 0x10, 0x20, 0x30
    chains = {A: _chain(A, [A, B, C]), B: _chain(B, [B, C])}
    kept, removed = prune_contained(chains, {B: {A}})
    assert removed == {B: A}
    assert set(kept) == {A}
    assert chains[B].pruned_by == A


def test_prune_keeps_doubly_contained():
    A, B, C, D = 0x10, 0x20, 0x30, 0x40
    chains = {A: _chain(A, [A, B, C]), D: _chain(D, [D, B, C]), B: _chain(B, [B, C])}
    kept, removed = prune_contained(chains, {B: {A}})
    assert removed == {} and set(kept) == set(chains)


def test_prune_keeps_with_second_predecessor():
    A, B, C = 0x10, 0x20, 0x30
    chains = {A: _chain(A, [A, B, C]), B: _chain(B, [B, C])}
    _, removed = prune_contained(chains, {B: {A, 0x99}})
    assert removed == {}


def test_prune_no_containment_unchanged():
    chains = {1: _chain(1, [1, 2]), 3: _chain(3, [3, 4])}
    kept, removed = prune_contained(chains, {1: {3}, 3: {1}})
    assert kept == chains and removed == {}


@pytest.mark.parametrize("seed", range(5))
def test_pruning_safety(seed):
    """A pruned trigger's lines are always covered by the chain of its covering trigger."""
    a = analyze(synth(random_spec(seed, 15_000)))
    preds = a.hb.transitions.predecessors()
    for t, d in a.pruned.items():
        assert preds[t] <= set(a.chains[d].hbs)
        assert set(a.chains[t].cachelines) <= set(a.chains[d].cachelines)
        assert t not in a.kept and d in a.kept or d in a.pruned


# -- SSRA vs dynamic runahead ---------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_ssra_equals_truncated_dynamic_walk(seed):
    tr = synth(random_spec(100 + seed, 12_000))
    cfg = SSRAConfig(max_depth_hbs=50)
    a = analyze(tr, ssra_config=cfg)
    md = dynamic_metadata(a.hbs)
    assert not any(SENTINEL <= s < SENTINEL + 4096 for s in a.hbs)
    mismatches = []
    for t, ch in a.chains.items():
        expect = oracle_walk(t, a.hbs, cfg.max_depth_hbs)
        ras = [SENTINEL + 4 * k for k in range(cfg.max_depth_hbs + 1)]
        visited, lines, _ = dynamic_walk(t, md.get, ras, cfg.max_depth_hbs)
        # the simulator's walker must agree with the oracle on the prefix
        assert visited[:len(expect)] == expect
        if ch.hbs != expect:
            mismatches.append(t)
        elif ch.truncation_reason == STATIC_RAS_EXHAUSTED:
            assert a.hbs[expect[-1]].hb_type is HBType.RETURN
        assert ch.cachelines == list(dict.fromkeys(lines[:sum(len(s[0]) for s in ch.steps)]))
    assert mismatches == []


def test_topology_dynamic_depth5_covers_ras_derived_hb5():
    a = analyze(topology_trace())
    md = dynamic_metadata(a.hbs)
    visited, lines, missed = dynamic_walk(HB1, md.get, [TOP + 4], 5)
    assert missed is None
    assert visited[0] == HB1 and visited[-1] == HB5 and len(visited) == 5
    assert visited[3] == HB4
    expect = [l for h in visited for l in a.hbs[h].step_lines()]
    assert lines == expect


def test_deterministic():
    tr = synth(random_spec(7, 8000))
    a1, a2 = analyze(tr), analyze(tr)
    assert {t: c.hbs for t, c in a1.chains.items()} == {t: c.hbs for t, c in a2.chains.items()}
    assert a1.table.to_bytes() == a2.table.to_bytes()


def test_build_all_chains_covers_triggers():
    a = analyze(synth(random_spec(2, 8000)))
    chains = build_all_chains(a.hbs, a.hb.triggers)
    assert set(chains) == set(a.hb.triggers)
    assert all(c.hbs and c.hbs[0] == t for t, c in chains.items() if t in a.hbs)
