import pytest

from builders import HB1, HB3, HB4, HB5, topology_trace, random_spec, small_spec, synth, \
    two_pass_trace
from deer.pipeline import analyze
from deer.sim import (RAS, CacheConfig, DRUConfig, LRUCache, PrefetchBuffer, dru_storage_bytes,
                      dynamic_metadata, run_oracle, simulate, simulate_dynamic)
from deer.ssra import SSRAConfig
from deer.trace import TraceBuilder
from oracles import RefHierarchy

TINY = CacheConfig(l1i_size=1024, l1i_assoc=2, l2_size=4096, l2_assoc=4)


def _check_against_reference(rep, cfg):
    ref = RefHierarchy(cfg).replay(rep.extra["events"])
    c, b = ref.c, rep.breakdown
    assert rep.l1_misses == c["l1_misses"]
    assert rep.l2_misses == c["l2_misses"]
    assert rep.l2_cold_misses == c["cold"] and rep.l2_noncold_misses == c["noncold"]
    assert (b.hit_redundant, b.useful_cold, b.useful_noncold, b.evicted_without_use) == (
        c["hit_redundant"], c["useful_cold"], c["useful_noncold"], c["evicted_without_use"])
    assert b.unused_at_end == len(ref.unused)
    assert b.total() == rep.prefetches_issued


@pytest.mark.parametrize("seed", range(4))
def test_ssra_matches_reference_model(seed):
    tr = synth(random_spec(seed, 20_000))
    a = analyze(tr)
    rep = simulate(tr, a.table, TINY, DRUConfig(metadata_load_latency=50), record_events=True)
    assert rep.prefetches_issued > 0
    _check_against_reference(rep, TINY)


def test_dynamic_matches_reference_model():
    tr = synth(random_spec(9, 20_000))
    a = analyze(tr)
    rep = simulate_dynamic(tr, dynamic_metadata(a.hbs), TINY,
                           DRUConfig(mode="dynamic", metadata_load_latency=20),
                           record_events=True)
    _check_against_reference(rep, TINY)


def test_off_mode_small_trace_only_cold_misses():
    tr = synth(small_spec(length=20_000))
    rep = simulate(tr, None, CacheConfig(), DRUConfig(mode="off"))
    unique = len({pc >> 6 for pc in tr.pcs.tolist()})
    assert rep.l2_misses == rep.l2_cold_misses == unique
    assert rep.prefetches_issued == 0


def test_lru_eviction_order():
    c = LRUCache(2 * 64, 2)
    assert c.insert(1) is None and c.insert(2) is None
    assert c.access(1)
    assert c.insert(3) == 2
    assert c.contents() == [[1, 3]]


def test_ras_overflow_and_underflow():
    r = RAS(2)
    for a in (1, 2, 3):
        r.push(a)
    assert r.overflows == 1 and r.snapshot() == [2, 3]
    assert r.pop() == 3 and r.pop() == 2 and r.pop() is None
    assert r.top() is None


def test_prefetch_buffer_drops_oldest():
    b = PrefetchBuffer(3)
    for l in range(5):
        b.push(l, "trigger")
    assert [l for l, _ in b.q] == [2, 3, 4]
    assert b.dropped == 2 and b.max_occupancy == 3


def test_buffer_overflow_counted_in_report():
    tr = synth(random_spec(3, 10_000))
    a = analyze(tr, ssra_config=SSRAConfig(max_cachelines_per_entry=48))
    rep = simulate(tr, a.table, TINY, DRUConfig(prefetch_buffer_size=2, metadata_load_latency=0))
    assert rep.prefetches_dropped > 0
    assert rep.max_buffer_occupancy == 2


def test_storage_304_bytes():
    assert dru_storage_bytes(DRUConfig()) == 304
    assert dru_storage_bytes(DRUConfig(prefetch_buffer_size=64, ras_size=32)) == 64 * 6 + 32 * 6 + 16


def test_config_validation():
    with pytest.raises(ValueError):
        CacheConfig(l1i_size=1000)
    with pytest.raises(ValueError):
        CacheConfig(l2_hit=500)
    with pytest.raises(ValueError):
        DRUConfig(mode="bogus")
    with pytest.raises(ValueError):
        DRUConfig(metadata_load_latency=-1)


def test_oracle_zero_distance_is_baseline():
    tr = synth(random_spec(1, 10_000))
    off = simulate(tr, None, TINY, DRUConfig(mode="off"))
    orc = run_oracle(tr, TINY, n=0)
    assert orc.l2_misses == off.l2_misses and orc.prefetches_issued == 0


def test_oracle_removes_noncold_misses_on_two_pass():
    tr = two_pass_trace(lines=256, passes=2)
    small = CacheConfig(l1i_size=1024, l1i_assoc=2, l2_size=8192, l2_assoc=4)
    off = simulate(tr, None, small, DRUConfig(mode="off"))
    assert off.l2_noncold_misses == 256
    orc = run_oracle(tr, small, n=40)
    assert orc.l2_noncold_misses == 0


def test_oracle_tail_issues_nothing_past_end():
    tr = two_pass_trace(lines=4, passes=1)
    rep = run_oracle(tr, TINY, n=10_000)
    assert rep.prefetches_issued == 0


F_BASE, G_BASE, MAIN = 0x10000, 0x20000, 0x100


def _call_linear_twice(lines=16):
    """main calls F then G, twice; F and G are straight-line functions of ``lines`` lines."""
    n = lines * 16
    b = TraceBuilder("linear2")
    for _ in range(2):
        b.straight(MAIN, 1).call(MAIN + 4, F_BASE)
        b.straight(F_BASE, n - 1).ret(F_BASE + 4 * (n - 1), MAIN + 8)
        b.call(MAIN + 8, G_BASE)
        b.straight(G_BASE, n - 1).ret(G_BASE + 4 * (n - 1), MAIN + 12)
        b.jump(MAIN + 12, MAIN)
    return b.build()


def test_zero_latency_second_pass_has_no_misses():
    tr = _call_linear_twice()
    # direct-mapped 16-line L2: F and G evict each other between passes
    cache = CacheConfig(l1i_size=256, l1i_assoc=1, l2_size=1024, l2_assoc=1)
    a = analyze(tr)
    f_lines = {(F_BASE >> 6) + k for k in range(16)}
    dru = DRUConfig(metadata_load_latency=0, ras_top_prefetch=False)
    reports = {m: simulate(tr, a.table if m == "ssra" else None, cache,
                           DRUConfig(mode=m) if m == "off" else dru, record_events=True)
               for m in ("off", "ssra")}
    misses = {}
    for m, rep in reports.items():
        ref = RefHierarchy(cache)
        events = rep.extra["events"]
        first_f = [k for k, (kind, l) in enumerate(events) if kind == "d" and l == F_BASE >> 6]
        second = next(k for k in first_f if k > first_f[0] + 16 * 16)
        ref.replay(events[:second])
        # re-run the second pass, counting misses on F's lines only
        f_miss = 0
        last = None
        for kind, line in events[second:]:
            if kind == "p":
                ref.prefetch(line)
            elif line != last:
                m0 = ref.c["l2_misses"]
                ref.demand(line)
                f_miss += line in f_lines and ref.c["l2_misses"] > m0
                last = line
        misses[m] = f_miss
    assert misses["off"] == 16
    assert misses["ssra"] == 0


def test_topology_dynamic_walk_prefetches_hb5_lines():
    tr = topology_trace()
    a = analyze(tr)
    md = dynamic_metadata(a.hbs)
    rep = simulate_dynamic(tr, md, CacheConfig(), DRUConfig(
        mode="dynamic", runahead_depth=5, warm_metadata_cache=True, metadata_load_latency=0),
        log_walks=True)
    walk = next(v for _, t, v in rep.extra["walks"] if t == HB1)
    assert walk[:5] == [HB1] + walk[1:4] + [HB5]
    assert HB3 in walk and HB4 in walk


def test_dynamic_walk_uses_private_ras():
    tr = topology_trace()
    a = analyze(tr)
    rep = simulate_dynamic(tr, dynamic_metadata(a.hbs), CacheConfig(), DRUConfig(
        mode="dynamic", runahead_depth=50, warm_metadata_cache=True, metadata_load_latency=0),
        log_walks=True)
    # the walk from HB4 pops HB5 then HB6 off its copy; the real RAS still returns to HB5 next
    walks = {t: v for _, t, v in rep.extra["walks"]}
    assert walks[HB4][:2] == [HB4, HB5]
    assert walks[HB5][0] == HB5


def test_dynamic_cold_metadata_walks_at_most_one_step():
    tr = synth(random_spec(2, 5000))
    a = analyze(tr)
    rep = simulate_dynamic(tr, dynamic_metadata(a.hbs), TINY, DRUConfig(
        mode="dynamic", metadata_load_latency=10**6), log_walks=True)
    assert all(len(v) <= 1 for _, _, v in rep.extra["walks"])
    assert rep.prefetches_issued == 0


def test_dynamic_covers_at_least_ssra_depth():
    tr = synth(random_spec(5, 10_000))
    a = analyze(tr)
    rep = simulate_dynamic(tr, dynamic_metadata(a.hbs), TINY, DRUConfig(
        mode="dynamic", warm_metadata_cache=True, metadata_load_latency=0), log_walks=True)
    for _, t, visited in rep.extra["walks"]:
        ch = a.chains.get(t)
        if ch is not None:
            assert len(visited) >= len(ch.hbs)


def test_ras_top_prefetch_adds_prefetches():
    tr = synth(small_spec(length=30_000))
    a = analyze(tr)
    on = simulate(tr, a.table, TINY, DRUConfig(metadata_load_latency=0))
    off = simulate(tr, a.table, TINY, DRUConfig(metadata_load_latency=0, ras_top_prefetch=False))
    assert on.prefetches_issued > off.prefetches_issued
    assert on.metadata_requests > off.metadata_requests


def test_report_json_round_trip():
    tr = synth(random_spec(1, 3000))
    rep = simulate(tr, None, TINY, DRUConfig(mode="off"))
    from deer.sim import SimReport

    back = SimReport.from_json(rep.to_json())
    assert back.l2_misses == rep.l2_misses and back.breakdown == rep.breakdown
