"""Trace-driven two-level instruction-cache simulator with a Deep Runahead Unit.

Timing is a simple stall-accounting clock: each committed instruction costs one
cycle plus the latency of the level that serviced a demand I-fetch miss.
Prefetches are issued from the prefetch buffer head at ``issue_rate`` per cycle
and fill the L2 immediately on issue.
"""

from __future__ import annotations

import heapq
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple

from .metacodec import MetadataTable, decode_entry
from .trace import IClass, Trace

CALL, RETURN, ICALL = int(IClass.CALL), int(IClass.RETURN), int(IClass.INDIRECT_CALL)

MODES = ("off", "ssra", "dynamic", "oracle", "rnr50", "rnr-unique50")


@dataclass
class CacheConfig:
    l1i_size: int = 256 * 1024
    l1i_assoc: int = 8
    l2_size: int = 2 * 1024 * 1024
    l2_assoc: int = 8
    line_size: int = 64
    replacement: str = "LRU"
    l1_hit: int = 1
    l2_hit: int = 12
    dram: int = 150

    def __post_init__(self):
        for size, assoc, name in ((self.l1i_size, self.l1i_assoc, "l1i"),
                                  (self.l2_size, self.l2_assoc, "l2")):
            if assoc < 1 or size % (assoc * self.line_size):
                raise ValueError(f"{name} size {size} not divisible by assoc x line")
        if not self.l1_hit < self.l2_hit < self.dram:
            raise ValueError("latencies must satisfy l1_hit < l2_hit < dram")
        if self.replacement != "LRU":
            raise ValueError("only LRU replacement is modeled")


@dataclass
class DRUConfig:
    mode: str = "ssra"
    ras_size: int = 16
    prefetch_buffer_size: int = 32
    metadata_load_latency: int = 400
    ras_top_prefetch: bool = True
    prefetch_target: str = "L2"
    issue_rate: int = 1
    # dynamic mode
    metadata_cache_entries: int | None = None
    runahead_depth: int = 50
    warm_metadata_cache: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("ras_size", "prefetch_buffer_size", "issue_rate", "runahead_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.metadata_load_latency < 0:
            raise ValueError("metadata_load_latency must be >= 0")
        if self.metadata_cache_entries is not None and self.metadata_cache_entries < 1:
            raise ValueError("metadata_cache_entries must be >= 1")
        if self.prefetch_target != "L2":
            raise ValueError("prefetches always target the L2")


def dru_storage_bytes(cfg: DRUConfig) -> int:
    """On-chip DRU state: 6-byte buffer and RAS entries plus one fetched 16-byte entry."""
    return cfg.prefetch_buffer_size * 6 + cfg.ras_size * 6 + 16


class LRUCache:
    def __init__(self, size: int, assoc: int, line_size: int = 64):
        self.assoc = assoc
        self.nsets = size // (assoc * line_size)
        self.sets = [OrderedDict() for _ in range(self.nsets)]

    def access(self, line: int) -> bool:
        s = self.sets[line % self.nsets]
        if line in s:
            s.move_to_end(line)
            return True
        return False

    def __contains__(self, line: int) -> bool:
        return line in self.sets[line % self.nsets]

    def insert(self, line: int) -> int | None:
        s = self.sets[line % self.nsets]
        s[line] = True
        if len(s) > self.assoc:
            return s.popitem(last=False)[0]
        return None

    def contents(self) -> list[list[int]]:
        """Per-set lines ordered LRU first."""
        return [list(s) for s in self.sets]


class RAS:
    """Bounded return-address stack; overflow overwrites the oldest entry."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._q: deque[int] = deque(maxlen=capacity)
        self.overflows = 0

    def push(self, addr: int) -> None:
        if len(self._q) == self.capacity:
            self.overflows += 1
        self._q.append(addr)

    def pop(self) -> int | None:
        return self._q.pop() if self._q else None

    def top(self) -> int | None:
        return self._q[-1] if self._q else None

    def snapshot(self) -> list[int]:
        return list(self._q)

    def __len__(self) -> int:
        return len(self._q)


class PrefetchBuffer:
    """FIFO of (line, origin); a push into a full buffer drops the head."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.q: deque[tuple[int, str]] = deque()
        self.dropped = 0
        self.max_occupancy = 0

    def push(self, line: int, origin: str) -> None:
        if len(self.q) >= self.capacity:
            self.q.popleft()
            self.dropped += 1
        self.q.append((line, origin))
        if len(self.q) > self.max_occupancy:
            self.max_occupancy = len(self.q)

    def pop(self) -> tuple[int, str]:
        return self.q.popleft()

    def __len__(self) -> int:
        return len(self.q)


@dataclass
class Breakdown:
    hit_redundant: int = 0
    useful_cold: int = 0
    useful_noncold: int = 0
    evicted_without_use: int = 0
    unused_at_end: int = 0

    @property
    def useful(self) -> int:
        return self.useful_cold + self.useful_noncold

    def total(self) -> int:
        return (self.hit_redundant + self.useful_cold + self.useful_noncold
                + self.evicted_without_use + self.unused_at_end)


@dataclass
class SimReport:
    mode: str
    trace_name: str = ""
    instructions: int = 0
    cycles: int = 0
    l1_accesses: int = 0
    l1_misses: int = 0
    l2_accesses: int = 0
    l2_misses: int = 0
    l2_cold_misses: int = 0
    l2_noncold_misses: int = 0
    l2_cold_misses_after_first_trigger: int = 0
    first_trigger_index: int | None = None
    prefetches_issued: int = 0
    prefetches_dropped: int = 0
    breakdown: Breakdown = field(default_factory=Breakdown)
    triggers: int = 0
    metadata_requests: int = 0
    metadata_misses: int = 0
    storage_bytes: int = 0
    max_buffer_occupancy: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def l2_miss_rate(self) -> float:
        return self.l2_misses / self.instructions if self.instructions else 0.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["l2_miss_rate"] = self.l2_miss_rate
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SimReport":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        d["breakdown"] = Breakdown(**d.get("breakdown", {}))
        return cls(**d)


class DynEntry(NamedTuple):
    hb_type: str
    next_hb: int | None
    return_address: int | None
    lines: tuple[int, ...]


class Engine:
    """Cache hierarchy, clock, prefetch buffer and metadata-request queue."""

    def __init__(self, cache_cfg: CacheConfig, dru_cfg: DRUConfig, record_events: bool = False):
        self.cc = cache_cfg
        self.dc = dru_cfg
        self.shift = cache_cfg.line_size.bit_length() - 1
        self.l1 = LRUCache(cache_cfg.l1i_size, cache_cfg.l1i_assoc, cache_cfg.line_size)
        self.l2 = LRUCache(cache_cfg.l2_size, cache_cfg.l2_assoc, cache_cfg.line_size)
        self.buffer = PrefetchBuffer(dru_cfg.prefetch_buffer_size)
        self.ras = RAS(dru_cfg.ras_size)
        self.heap: list = []
        self._seq = 0
        self.issue_cycle = 0
        self.cycle = 0
        self.ever_l2: set[int] = set()
        self.pf_unused: dict[int, bool] = {}
        self.r = SimReport(dru_cfg.mode)
        self.events: list[tuple[str, int]] | None = [] if record_events else None
        self.triggered = False
        self.on_fill: Callable[[int], None] | None = None

    # -- cache side ---------------------------------------------------
    def demand(self, line: int) -> int:
        r = self.r
        if self.events is not None:
            self.events.append(("d", line))
        if self.l1.access(line):
            return 0
        r.l1_misses += 1
        r.l2_accesses += 1
        if self.l2.access(line):
            cold = self.pf_unused.pop(line, None)
            if cold is not None:
                if cold:
                    r.breakdown.useful_cold += 1
                else:
                    r.breakdown.useful_noncold += 1
            stall = self.cc.l2_hit
        else:
            r.l2_misses += 1
            if line in self.ever_l2:
                r.l2_noncold_misses += 1
            else:
                r.l2_cold_misses += 1
                if self.triggered:
                    r.l2_cold_misses_after_first_trigger += 1
                self.ever_l2.add(line)
            self._fill_l2(line)
            stall = self.cc.dram
        self.l1.insert(line)
        return stall

    def _fill_l2(self, line: int) -> None:
        ev = self.l2.insert(line)
        if ev is not None and self.pf_unused.pop(ev, None) is not None:
            self.r.breakdown.evicted_without_use += 1

    def prefetch(self, line: int) -> None:
        r = self.r
        r.prefetches_issued += 1
        if self.events is not None:
            self.events.append(("p", line))
        if line in self.l2:
            r.breakdown.hit_redundant += 1
            return
        cold = line not in self.ever_l2
        self.ever_l2.add(line)
        self._fill_l2(line)
        self.pf_unused[line] = cold

    # -- DRU timing -----------------------------------------------------
    def schedule(self, ready: int, lines, origin: str, fill_pc: int | None = None) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (ready, self._seq, lines, origin, fill_pc))

    def _drain(self, t: int) -> None:
        c = self.issue_cycle
        if c >= t:
            return
        buf = self.buffer.q
        rate = self.dc.issue_rate
        budget = (t - c) * rate
        while buf and budget:
            self.prefetch(buf.popleft()[0])
            budget -= 1
        self.issue_cycle = t

    def advance(self, now: int) -> None:
        heap = self.heap
        while heap and heap[0][0] <= now:
            t = heap[0][0]
            self._drain(t)
            _, _, lines, origin, fill_pc = heapq.heappop(heap)
            if fill_pc is not None:
                self.on_fill(fill_pc)
            else:
                push = self.buffer.push
                for l in lines:
                    push(l, origin)
        # the issue slot of cycle ``now`` precedes that cycle's demand fetch
        self._drain(now + 1)

    def push_lines(self, lines, origin: str) -> None:
        push = self.buffer.push
        for l in lines:
            push(l, origin)

    def finish(self, trace: Trace) -> SimReport:
        r = self.r
        r.breakdown.unused_at_end = len(self.pf_unused)
        r.prefetches_dropped = self.buffer.dropped
        r.max_buffer_occupancy = self.buffer.max_occupancy
        r.cycles = self.cycle
        r.instructions = len(trace)
        r.trace_name = trace.meta.name
        r.config = {"cache": asdict(self.cc), "dru": asdict(self.dc)}
        if self.events is not None:
            r.extra["events"] = self.events
        return r


def _run(trace: Trace, engine: Engine, on_commit=None, pending=lambda: False) -> SimReport:
    """Main loop: demand fetch, clock, then the per-instruction DRU hook."""
    pcs, targets, cls = trace.columns()
    shift = engine.shift
    r = engine.r
    last_line = None
    cycle = 0
    heap = engine.heap
    buf = engine.buffer.q
    demand = engine.demand
    for i in range(len(pcs)):
        if heap or buf:
            engine.advance(cycle)
        line = pcs[i] >> shift
        stall = 0
        if line != last_line:
            stall = demand(line)
            last_line = line
        elif engine.events is not None:
            engine.events.append(("d", line))
        cycle += 1 + stall
        engine.cycle = cycle
        c = cls[i]
        if not engine.triggered and (c == CALL or c == ICALL or c == RETURN):
            engine.triggered = True
            r.first_trigger_index = i
        if on_commit is not None:
            on_commit(i, c, pcs[i], targets[i])
    r.l1_accesses = len(pcs)
    engine.cycle = cycle
    return engine.finish(trace)


def _line_lists(lines, shift: int) -> tuple[int, ...]:
    return tuple(l >> shift for l in lines)


def simulate(trace: Trace, metadata_table: MetadataTable | None,
             cache_cfg: CacheConfig | None = None, dru_cfg: DRUConfig | None = None,
             record_events: bool = False, log_triggers: bool = False) -> SimReport:
    """Replay ``trace`` with the SSRA DRU (``mode='ssra'``) or no prefetcher (``'off'``)."""
    cache_cfg = cache_cfg or CacheConfig()
    dru_cfg = dru_cfg or DRUConfig()
    if dru_cfg.mode not in ("ssra", "off"):
        raise ValueError("simulate() handles modes 'ssra' and 'off'")
    eng = Engine(cache_cfg, dru_cfg, record_events)
    if dru_cfg.mode == "off":
        return _run(trace, eng)
    if metadata_table is None:
        raise ValueError("mode 'ssra' needs a metadata table")

    shift = eng.shift
    latency = dru_cfg.metadata_load_latency
    ras = eng.ras
    r = eng.r
    decoded: dict[int, tuple | None] = {}
    trigger_log: list[tuple[int, int, int | None]] | None = [] if log_triggers else None

    def request(pc: int, origin: str) -> None:
        r.metadata_requests += 1
        lines = decoded.get(pc, ())
        if lines == ():
            entry = metadata_table.lookup(pc)
            lines = _line_lists(decode_entry(entry, pc), shift) if entry is not None else None
            decoded[pc] = lines
        if lines is None:
            r.metadata_misses += 1
            return
        eng.schedule(eng.cycle + latency, lines, origin)

    def on_commit(i, c, pc, target):
        if c == CALL or c == ICALL:
            ras.push(pc + 4)
        elif c == RETURN:
            ras.pop()
        else:
            return
        r.triggers += 1
        request(target, "trigger")
        top = ras.top() if dru_cfg.ras_top_prefetch else None
        if top is not None:
            request(top, "ras_top")
        if trigger_log is not None:
            trigger_log.append((i, target, top))

    rep = _run(trace, eng, on_commit)
    rep.storage_bytes = dru_storage_bytes(dru_cfg)
    if trigger_log is not None:
        rep.extra["trigger_log"] = trigger_log
    return rep


def dynamic_metadata(hbs) -> dict[int, DynEntry]:
    """Unpacked per-HB metadata for dynamic runahead (next HB, type, return address, lines)."""
    return {
        s: DynEntry(hb.hb_type.value if hb.skip != "recursion" else "other",
                    hb.next_hb, hb.return_address, tuple(hb.step_lines()))
        for s, hb in hbs.items()
    }


def dynamic_walk(trigger: int, lookup: Callable[[int], DynEntry | None], ras: list[int],
                 depth: int) -> tuple[list[int], list[int], int | None]:
    """Walk metadata from ``trigger`` using a private RAS. Returns (visited HBs, lines, missed pc or None).

    ``ras`` is a private copy and is consumed by the walk.
    """
    visited: list[int] = []
    lines: list[int] = []
    cur = trigger
    for _ in range(depth):
        e = lookup(cur)
        if e is None:
            return visited, lines, cur
        visited.append(cur)
        lines.extend(e.lines)
        if e.hb_type == "call":
            ras.append(e.return_address)
            cur = e.next_hb
        elif e.hb_type == "other":
            cur = e.next_hb
        else:
            cur = ras.pop() if ras else None
        if cur is None:
            break
    return visited, lines, None


def simulate_dynamic(trace: Trace, hb_metadata: dict[int, DynEntry],
                     cache_cfg: CacheConfig | None = None, dru_cfg: DRUConfig | None = None,
                     record_events: bool = False, log_walks: bool = False) -> SimReport:
    """Dynamic runahead with a metadata cache; a miss stops the walk and issues a fill."""
    cache_cfg = cache_cfg or CacheConfig()
    dru_cfg = dru_cfg or DRUConfig(mode="dynamic")
    eng = Engine(cache_cfg, dru_cfg, record_events)
    eng.r.mode = "dynamic"
    cap = dru_cfg.metadata_cache_entries
    mdc: OrderedDict[int, DynEntry] = OrderedDict()
    if dru_cfg.warm_metadata_cache:
        for s in sorted(hb_metadata)[: cap if cap else None]:
            mdc[s] = hb_metadata[s]
    inflight: set[int] = set()
    shift = eng.shift
    ras = eng.ras
    r = eng.r
    latency = dru_cfg.metadata_load_latency
    walks: list | None = [] if log_walks else None

    def on_fill(pc: int) -> None:
        inflight.discard(pc)
        mdc[pc] = hb_metadata[pc]
        mdc.move_to_end(pc)
        if cap is not None and len(mdc) > cap:
            mdc.popitem(last=False)

    eng.on_fill = on_fill

    def lookup(pc: int):
        e = mdc.get(pc)
        if e is not None:
            mdc.move_to_end(pc)
        return e

    def on_commit(i, c, pc, target):
        if c == CALL or c == ICALL:
            ras.push(pc + 4)
        elif c == RETURN:
            ras.pop()
        else:
            return
        r.triggers += 1
        visited, lines, missed = dynamic_walk(target, lookup, ras.snapshot(),
                                              dru_cfg.runahead_depth)
        r.metadata_requests += len(visited) + (missed is not None)
        if missed is not None:
            r.metadata_misses += 1
            if missed in hb_metadata and missed not in inflight:
                inflight.add(missed)
                eng.schedule(eng.cycle + latency, None, "fill", missed)
        if walks is not None:
            walks.append((i, target, visited))
        seen = set()
        out = []
        for l in lines:
            l >>= shift
            if l not in seen:
                seen.add(l)
                out.append(l)
        eng.push_lines(out, "trigger")

    rep = _run(trace, eng, on_commit)
    rep.storage_bytes = dru_storage_bytes(dru_cfg) + 16 * (cap or 0)
    if walks is not None:
        rep.extra["walks"] = walks
    return rep


def run_oracle(trace: Trace, cache_cfg: CacheConfig | None = None, n: int = 100,
               record_events: bool = False) -> SimReport:
    """Prefetch into L2 the cacheline that will be fetched ``n`` instructions later."""
    cache_cfg = cache_cfg or CacheConfig()
    eng = Engine(cache_cfg, DRUConfig(mode="oracle"), record_events)
    if n <= 0:
        return _run(trace, eng)
    pcs = trace.pcs.tolist()
    shift = eng.shift
    lines = [p >> shift for p in pcs]
    total = len(lines)

    def on_commit(i, c, pc, target):
        j = i + n
        if j < total and lines[j] != lines[j - 1]:
            eng.prefetch(lines[j])

    rep = _run(trace, eng, on_commit)
    rep.extra["oracle_n"] = n
    return rep
