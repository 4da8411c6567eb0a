"""Evaluation metrics: repeat distance, IOU path accuracy, effective depth, comparisons."""

from __future__ import annotations

import bisect
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .hyperblock import Hyperblock
from .sim import CALL, ICALL, RETURN, SimReport
from .ssra import SSRAChain
from .trace import Trace

# A prediction: (instruction index where the trigger HB starts, steps), where each
# step is (cachelines of one runahead step, dynamic instructions it covers).
Steps = list[tuple[list[int], int]]
Prediction = tuple[int, Steps]


# -- repeat distance -----------------------------------------------------------

@dataclass
class RepeatDistance:
    samples: np.ndarray
    pcs: np.ndarray  # PC of each sample

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        """(sorted distinct distances, cumulative fraction of samples <= distance)."""
        if not len(self.samples):
            return np.array([], dtype=np.int64), np.array([])
        vals, counts = np.unique(self.samples, return_counts=True)
        return vals, np.cumsum(counts) / len(self.samples)

    def fraction_above(self, threshold: int) -> float:
        return float(np.mean(self.samples > threshold)) if len(self.samples) else 0.0


def repeat_distance(trace: Trace) -> RepeatDistance:
    """Distinct PCs executed between consecutive occurrences of each PC.

    Uses a Fenwick tree over positions marking the latest occurrence of every PC:
    the distance for an occurrence at ``i`` whose previous one is at ``p`` is the
    number of marked positions strictly between ``p`` and ``i``.
    """
    pcs = trace.pcs.tolist()
    n = len(pcs)
    tree = [0] * (n + 1)
    last: dict[int, int] = {}
    samples: list[int] = []
    sample_pcs: list[int] = []
    marked = 0
    for i, pc in enumerate(pcs):
        p = last.get(pc)
        if p is not None:
            # prefix(p) = marks at positions <= p
            s = 0
            j = p + 1
            while j > 0:
                s += tree[j]
                j -= j & -j
            # positions in (p, i) carry marks; position p is pc's own mark
            samples.append(marked - s)
            sample_pcs.append(pc)
            j = p + 1
            while j <= n:
                tree[j] -= 1
                j += j & -j
            marked -= 1
        last[pc] = i
        j = i + 1
        while j <= n:
            tree[j] += 1
            j += j & -j
        marked += 1
    return RepeatDistance(np.array(samples, dtype=np.int64), np.array(sample_pcs, dtype=np.uint64))


# -- predictions ---------------------------------------------------------------

def trigger_instances(trace: Trace) -> list[tuple[int, int]]:
    """(index of the first instruction after a call/return, its pc)."""
    pcs, _, cls = trace.columns()
    return [(i + 1, pcs[i + 1]) for i in range(len(pcs) - 1)
            if cls[i] in (CALL, ICALL, RETURN)]


def ssra_predictions(trace: Trace, chains: dict[int, SSRAChain]) -> list[Prediction]:
    out = []
    for i, pc in trigger_instances(trace):
        ch = chains.get(pc)
        if ch is not None and ch.steps:
            out.append((i, ch.steps))
    return out


def hb_steps(hb_list: list[int], hbs: dict[int, Hyperblock]) -> Steps:
    return [(hbs[h].cachelines, hbs[h].n_insts) for h in hb_list]


def rnr_predictions(report: SimReport, hbs: dict[int, Hyperblock], variant: str) -> list[Prediction]:
    """Predictions logged by ``rnr_simulate(..., log_predictions=True)``.

    Unique-HB recordings start after the trigger, so the trigger HB is prepended.
    """
    out = []
    for idx, hb, rec in report.extra["predictions"]:
        lst = rec if variant in ("last50_hb", "rnr50") else [hb] + rec
        out.append((idx, hb_steps(lst, hbs)))
    return out


def predicted_set(steps: Steps, n_insts: int | None = None) -> set[int]:
    """Unique predicted lines, stopping once ``n_insts`` dynamic instructions are covered."""
    limit = n_insts if n_insts is not None else sum(n for _, n in steps)
    out: set[int] = set()
    covered = 0
    for lines, n in steps:
        if covered >= limit:
            break
        out.update(lines)
        covered += n
    return out


class LineRuns:
    """Trace compressed to runs of consecutive PCs within one cacheline."""

    def __init__(self, trace: Trace):
        pcs = trace.pcs.tolist()
        shift = trace.meta.line_shift
        isize = trace.meta.instruction_size
        self.starts: list[int] = []
        self.lines: list[int] = []
        self.lens: list[int] = []
        self.first_pc: list[int] = []
        prev = None
        for i, pc in enumerate(pcs):
            if prev is not None and pc == prev + isize and pc >> shift == prev >> shift:
                self.lens[-1] += 1
            else:
                self.starts.append(i)
                self.lines.append((pc >> shift) << shift)
                self.lens.append(1)
                self.first_pc.append(pc)
            prev = pc
        self.n = len(pcs)
        self.isize = isize

    def run_at(self, i: int) -> int:
        return bisect.bisect_right(self.starts, i) - 1

    def window(self, i: int, k: int) -> tuple[int, int, set[int], list[int]]:
        """Maximal execution window from ``i`` touching at most ``k`` unique lines.

        Returns (dynamic length, static distinct PCs, first ``k`` unique lines as a
        set, the same lines in order).
        """
        r = self.run_at(i)
        off = i - self.starts[r]
        seen: list[int] = []
        seen_set: set[int] = set()
        masks: dict[int, int] = {}
        dyn = 0
        nr = len(self.starts)
        isize = self.isize
        while r < nr:
            line = self.lines[r]
            if line not in seen_set:
                if len(seen) == k:
                    break
                seen_set.add(line)
                seen.append(line)
            first = self.first_pc[r] + off * isize
            ln = self.lens[r] - off
            a = (first - line) // isize
            masks[line] = masks.get(line, 0) | (((1 << ln) - 1) << a)
            dyn += ln
            off = 0
            r += 1
        static = sum(bin(m).count("1") for m in masks.values())
        return dyn, static, seen_set, seen


@dataclass
class AccuracyReport:
    ious: list[float] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    empty_predictions: int = 0

    def summary(self) -> dict:
        if not self.ious:
            return {"count": 0, "empty_predictions": self.empty_predictions}
        a = np.asarray(self.ious)
        q1, med, q3 = np.percentile(a, [25, 50, 75])
        return {
            "count": len(a), "min": float(a.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(a.max()), "mean": float(a.mean()),
            "empty_predictions": self.empty_predictions,
        }

    @property
    def mean(self) -> float:
        return float(np.mean(self.ious)) if self.ious else 0.0


def iou(a: set, b: set) -> float:
    u = a | b
    return len(a & b) / len(u) if u else 1.0


def iou_accuracy(trace: Trace, predictions: list[Prediction], n_insts: int | None = None,
                 runs: LineRuns | None = None) -> AccuracyReport:
    """IOU of predicted vs executed unique lines for each trigger instance.

    The executed set holds the first ``|S_Pr|`` unique lines fetched from the
    trigger onward.  ``n_insts`` bounds the prediction (default: its own span).
    """
    runs = runs or LineRuns(trace)
    rep = AccuracyReport()
    for i, steps in predictions:
        pr = predicted_set(steps, n_insts)
        if not pr:
            rep.empty_predictions += 1
            continue
        _, _, ex, _ = runs.window(i, len(pr))
        rep.ious.append(iou(pr, ex))
        rep.indices.append(i)
    return rep


@dataclass
class DepthReport:
    dynamic_insts: float
    static_insts: float
    cycles_skipped_ratio: float
    accurate_triggers: int
    total_triggers: int

    def to_json(self) -> dict:
        return self.__dict__.copy()


def effective_depth(trace: Trace, predictions: list[Prediction], accuracy_floor: float = 0.6,
                    runs: LineRuns | None = None) -> DepthReport:
    """Average executed span of accurate predictions, dynamically and statically.

    For each prediction with IOU above ``accuracy_floor`` the span is the longest
    execution window from the trigger touching no more unique lines than were
    predicted; dynamic depth counts its instructions, static depth its distinct
    PCs.  The ratio is total dynamic over total static.
    """
    runs = runs or LineRuns(trace)
    dyn_sum = stat_sum = 0
    good = 0
    for i, steps in predictions:
        pr = predicted_set(steps)
        if not pr:
            continue
        dyn, stat, ex, _ = runs.window(i, len(pr))
        if iou(pr, ex) <= accuracy_floor:
            continue
        good += 1
        dyn_sum += dyn
        stat_sum += stat
    if not good:
        return DepthReport(0.0, 0.0, 0.0, 0, len(predictions))
    return DepthReport(dyn_sum / good, stat_sum / good, dyn_sum / stat_sum, good, len(predictions))


def divergence_rate(trace: Trace, chains: dict[int, SSRAChain], hb_sequence: list[tuple[int, int]]
                    ) -> float:
    """Fraction of triggers whose executed HB sequence leaves the predicted chain.

    Approximation: the first predicted HB that differs from the executed HB at the
    same position counts as one divergence.
    """
    starts = [s for _, s in hb_sequence]
    pos = {idx: k for k, (idx, _) in enumerate(hb_sequence)}
    total = diverged = 0
    for i, pc in trigger_instances(trace):
        ch = chains.get(pc)
        k = pos.get(i)
        if ch is None or k is None or not ch.hbs:
            continue
        total += 1
        actual = starts[k:k + len(ch.hbs)]
        if actual != ch.hbs[:len(actual)]:
            diverged += 1
    return diverged / total if total else 0.0


# -- report comparison -----------------------------------------------------------

class ConfigMismatch(ValueError):
    pass


def _comparable(cfg: dict) -> tuple:
    return json.dumps(cfg.get("cache", {}), sort_keys=True),


def reduction(baseline: int, candidate: int) -> float:
    return (baseline - candidate) / baseline if baseline else 0.0


def compare_report(baseline: SimReport | dict, *candidates: SimReport | dict,
                   check_config: bool = True) -> list[dict]:
    """Miss-rate reduction of each candidate against ``baseline`` (same trace and caches)."""
    reps = [r if isinstance(r, SimReport) else SimReport.from_json(r)
            for r in (baseline, *candidates)]
    if not candidates:
        raise ValueError("compare_report needs a baseline and at least one candidate")
    base = reps[0]
    rows = []
    for r in reps:
        if check_config and (r.trace_name != base.trace_name
                             or r.instructions != base.instructions
                             or _comparable(r.config) != _comparable(base.config)):
            raise ConfigMismatch(f"report {r.mode!r} was run on a different trace or cache config")
        rows.append({
            "mode": r.mode,
            "trace": r.trace_name,
            "l2_misses": r.l2_misses,
            "l2_miss_rate": r.l2_miss_rate,
            "reduction": reduction(base.l2_misses, r.l2_misses),
            "prefetches": r.prefetches_issued,
            "useful": r.breakdown.useful,
            "storage_bytes": r.storage_bytes,
        })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def plot_rows(rows: list[dict], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([r["mode"] for r in rows], [100 * r["reduction"] for r in rows])
    ax.set_ylabel("L2 I-miss reduction (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
