"""Record-and-replay baselines in hyperblock units: 50-HB RnR and 50-Unique-HB RnR."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .hyperblock import Hyperblock, segment
from .sim import CALL, ICALL, RETURN, CacheConfig, DRUConfig, Engine, SimReport, _run
from .ssra import select_cachelines
from .trace import Trace

LAST50 = "last50_hb"
UNIQUE50 = "unique50_hb"
VARIANTS = (LAST50, UNIQUE50)
MODE_ALIASES = {"rnr50": LAST50, "rnr-unique50": UNIQUE50, LAST50: LAST50, UNIQUE50: UNIQUE50}
BYTES_PER_HB = 8


@dataclass
class RnRState:
    """Recording state.  ``window`` is the number of HBs per recording."""

    variant: str
    window: int = 50
    recordings: dict[int, list[int]] = field(default_factory=dict)
    log: list[tuple[int, int, list[int]]] | None = None
    _recent: deque = field(default=None, repr=False)
    _recent_trig: deque = field(default=None, repr=False)
    _open: dict[int, tuple[int, list[int], set[int]]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown RnR variant {self.variant!r}")
        self._recent = deque(maxlen=self.window)
        self._recent_trig = deque(maxlen=self.window)

    def commit(self, pos: int, hb: int, is_trigger: bool) -> list[int] | None:
        """Process the ``pos``-th HB commit; returns the replayed HB list, if any."""
        replay = self.recordings.get(hb) if is_trigger else None
        if self.variant == LAST50:
            self._recent.append(hb)
            self._recent_trig.append((pos, is_trigger))
            if len(self._recent) == self.window:
                opos, otrig = self._recent_trig[0]
                if otrig:
                    rec = list(self._recent)
                    self.recordings[self._recent[0]] = rec
                    if self.log is not None:
                        self.log.append((opos, self._recent[0], rec))
        else:
            done = []
            for t, (opos, lst, seen) in self._open.items():
                if hb not in seen:
                    seen.add(hb)
                    lst.append(hb)
                    if len(lst) == self.window:
                        done.append(t)
            for t in done:
                opos, lst, _ = self._open.pop(t)
                self.recordings[t] = lst
                if self.log is not None:
                    self.log.append((opos, t, lst))
            # one open window per trigger HB; a recurrence keeps the older window
            if is_trigger and hb not in self._open:
                self._open[hb] = (pos, [], set())
        return replay


def rnr_storage_report(state: RnRState) -> int:
    """Bytes of recorded HB lists at 8 bytes per recorded HB."""
    return sum(len(v) for v in state.recordings.values()) * BYTES_PER_HB


def hb_commits(trace: Trace, hbs: dict[int, Hyperblock]) -> list[tuple[int, int]]:
    """(instruction index, hb start) for every HB instance."""
    return [(i, s) for i, s, _ in segment(trace, hbs)]


def trigger_flags(trace: Trace, commits: list[tuple[int, int]]) -> list[bool]:
    """A commit is a trigger when the preceding instruction was a call or return."""
    cls = trace.columns()[2]
    return [i > 0 and cls[i - 1] in (CALL, ICALL, RETURN) for i, _ in commits]


def replay_lines(recording: list[int], hbs: dict[int, Hyperblock], cap: int | None,
                 line_shift: int) -> list[int]:
    seq = [l for h in recording for l in hbs[h].cachelines]
    lines = select_cachelines(seq, cap) if cap else list(dict.fromkeys(seq))
    return [l >> line_shift for l in lines]


def rnr_simulate(trace: Trace, hbs: dict[int, Hyperblock], variant: str,
                 cache_cfg: CacheConfig | None = None, dru_cfg: DRUConfig | None = None,
                 replay_cap: int | None = 16, window: int = 50,
                 log_predictions: bool = False) -> SimReport:
    """Replay recordings on trigger-HB commits through the same cache model as DEER.

    Replays bypass metadata latency (recordings are on chip) and share the
    prefetch buffer and issue bandwidth.  ``replay_cap=None`` replays whole lists.
    """
    variant = MODE_ALIASES.get(variant, variant)
    cache_cfg = cache_cfg or CacheConfig()
    mode = "rnr50" if variant == LAST50 else "rnr-unique50"
    dru_cfg = dru_cfg or DRUConfig(mode=mode)
    eng = Engine(cache_cfg, dru_cfg)
    eng.r.mode = mode
    state = RnRState(variant, window)
    commits = hb_commits(trace, hbs)
    trig = trigger_flags(trace, commits)
    # commit k is processed when the instruction before it retires
    at: dict[int, int] = {i - 1: k for k, (i, _) in enumerate(commits) if i > 0}
    r = eng.r
    shift = eng.shift
    predictions: list | None = [] if log_predictions else None
    line_cache: dict[int, tuple[list[int], list[int]]] = {}

    def on_commit(i, c, pc, target):
        k = at.get(i)
        if k is None:
            return
        idx, hb = commits[k]
        rec = state.commit(k, hb, trig[k])
        if not trig[k]:
            return
        r.triggers += 1
        r.metadata_requests += 1
        if rec is None:
            r.metadata_misses += 1
            return
        if predictions is not None:
            predictions.append((idx, hb, list(rec)))
        cached = line_cache.get(hb)
        if cached is None or cached[0] is not rec:
            cached = (rec, replay_lines(rec, hbs, replay_cap, shift))
            line_cache[hb] = cached
        eng.push_lines(cached[1], "replay")

    rep = _run(trace, eng, on_commit)
    rep.storage_bytes = rnr_storage_report(state)
    rep.extra["recordings"] = len(state.recordings)
    if predictions is not None:
        rep.extra["predictions"] = predictions
    return rep
