"""Synthetic workload generator.

Builds a random program (functions made of straight runs, if-diamonds, loops
and calls arranged in call-depth levels), lays it out in a code footprint and
interprets it to produce a committed-instruction trace.  Function 0 is a
dispatcher that indirectly calls level-1 handlers forever; with a single
function the program is that function alone and halts when it returns.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field, fields

from .trace import IClass, Trace, TraceMeta, pack_flags

CODE_BASE = 0x400000
ISIZE = 4


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class SynthWorkloadSpec:
    function_count: int = 64
    mean_function_size: int = 120
    call_fanout: tuple[int, int] = (1, 3)
    max_call_depth: int = 6
    loop_iterations: tuple[int, int] = (2, 8)
    branch_bias: float = 0.8
    code_footprint: int = 256 * 1024
    target_trace_length: int = 100_000
    rng_seed: int = 1
    if_rate: float = 0.25
    loop_rate: float = 0.1
    indirect_rate: float = 0.1
    handler_skew: float = 0.0
    level_skew: float = 1.0
    name: str = "synthetic"

    def __post_init__(self):
        self.call_fanout = tuple(self.call_fanout)
        self.loop_iterations = tuple(self.loop_iterations)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.branch_bias <= 1.0:
            raise ValueError(f"branch_bias {self.branch_bias} outside [0, 1]")
        if self.function_count < 1:
            raise ValueError("function_count must be >= 1")
        if self.mean_function_size < 4:
            raise ValueError("mean_function_size must be >= 4")
        lo, hi = self.call_fanout
        if lo < 0 or hi < lo:
            raise ValueError(f"bad call_fanout {self.call_fanout}")
        lo, hi = self.loop_iterations
        if lo < 1 or hi < lo:
            raise ValueError(f"bad loop_iterations {self.loop_iterations}")
        if self.max_call_depth < 1:
            raise ValueError("max_call_depth must be >= 1")
        if self.target_trace_length < 1:
            raise ValueError("target_trace_length must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthWorkloadSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown workload keys: {sorted(unknown)}")
        return cls(**d)


# Instruction templates: (kind, target, payload)
#   other: ("o", None, None)
#   if branch: ("if", target, taken_prob)
#   loop back-branch: ("loop", target, None)
#   jump: ("j", target, None)
#   call: ("call", None, (targets, weights)) -- targets resolved after layout
#   return: ("ret", None, None)


@dataclass
class _Function:
    index: int
    level: int
    size_hint: int
    callees: list[int] = field(default_factory=list)
    code: list = field(default_factory=list)
    entry: int = 0
    loop_heads: list[int] = field(default_factory=list)


class _BodyBuilder:
    def __init__(self, rng: random.Random, spec: SynthWorkloadSpec, callees: list[int], budget: int):
        self.rng = rng
        self.spec = spec
        self.callees = callees
        self.budget = budget
        self.code: list = []
        self.loop_heads: list[int] = []  # code offsets

    def emit(self, item):
        self.code.append(item)

    def run(self, n):
        for _ in range(n):
            self.emit(("o", None, None))

    def call(self, site_callees):
        rng, spec = self.rng, self.spec
        if len(site_callees) > 1 and rng.random() < spec.indirect_rate:
            k = min(len(site_callees), rng.randint(2, 3))
            targets = rng.sample(site_callees, k)
            weights = [spec.branch_bias] + [(1 - spec.branch_bias) / (k - 1)] * (k - 1)
        else:
            targets = [rng.choice(site_callees)]
            weights = [1.0]
        self.emit(("call", None, (targets, weights)))

    def block(self, size, calls, depth=0):
        """Emit roughly ``size`` instructions containing ``calls`` call sites."""
        rng, spec = self.rng, self.spec
        call_slots = sorted(rng.randrange(max(size, 1)) for _ in range(calls))
        emitted = 0
        while emitted < size or call_slots:
            if call_slots and call_slots[0] <= emitted:
                call_slots.pop(0)
                self.call(self.callees)
                emitted += 1
                continue
            remaining = size - emitted
            r = rng.random()
            if depth < 2 and remaining >= 12 and r < spec.loop_rate:
                body = rng.randint(4, max(4, min(remaining // 2, 40)))
                head = len(self.code)
                self.loop_heads.append(head)
                inner_calls = 0
                if call_slots and call_slots[0] < emitted + body:
                    call_slots.pop(0)
                    inner_calls = 1
                self.block(body - 1, inner_calls, depth + 1)
                self.emit(("loop", head, None))
                emitted += body
            elif remaining >= 6 and r < spec.loop_rate + spec.if_rate:
                then_len = rng.randint(2, max(2, min(remaining - 2, 12)))
                p_skip = spec.branch_bias if rng.random() < 0.5 else 1.0 - spec.branch_bias
                slot = len(self.code)
                self.emit(None)
                self.run(then_len)
                self.code[slot] = ("if", len(self.code), p_skip)
                emitted += then_len + 1
            else:
                n = min(remaining, rng.randint(2, 8)) if remaining > 0 else 0
                if n == 0:
                    # calls left but no size budget: place them now
                    continue
                self.run(n)
                emitted += n


def _build_program(spec: SynthWorkloadSpec) -> list[_Function]:
    rng = random.Random(spec.rng_seed)
    n = spec.function_count
    funcs: list[_Function] = []
    depth = min(spec.max_call_depth, max(n - 1, 0))
    for i in range(n):
        if i == 0:
            level = 0
        else:
            # more functions at deeper levels: level k weight ~ k ** level_skew
            weights = [k ** spec.level_skew for k in range(1, depth + 1)]
            level = rng.choices(range(1, depth + 1), weights=weights)[0] if depth else 0
        size = max(8, int(round(spec.mean_function_size * rng.uniform(0.5, 1.5))))
        funcs.append(_Function(i, level, size))
    if n > 1:
        # every level 1..depth must exist for call chains to reach max depth
        for lvl in range(1, depth + 1):
            if not any(f.level == lvl for f in funcs[1:]):
                candidates = [f for f in funcs[1:] if sum(g.level == f.level for g in funcs) > 1]
                if candidates:
                    rng.choice(candidates).level = lvl
    by_level: dict[int, list[int]] = {}
    for f in funcs:
        by_level.setdefault(f.level, []).append(f.index)

    for f in funcs:
        if f.index == 0:
            continue
        deeper = [g for lvl, idx in by_level.items() if lvl > f.level for g in idx]
        if not deeper:
            continue
        lo, hi = spec.call_fanout
        k = rng.randint(lo, hi)
        # prefer the next level so chains reach full depth
        nxt = by_level.get(f.level + 1, [])
        f.callees = [rng.choice(nxt) if nxt and rng.random() < 0.7 else rng.choice(deeper)
                     for _ in range(k)]

    for f in funcs:
        b = _BodyBuilder(rng, spec, f.callees, f.size_hint)
        if f.index == 0 and n > 1:
            handlers = by_level.get(1, [])
            b.run(3)
            if spec.handler_skew > 0:
                weights = [1.0 / (r + 1) ** spec.handler_skew for r in range(len(handlers))]
            else:
                weights = [1.0] * len(handlers)
            b.emit(("call", None, (handlers, weights)))
            b.run(2)
            b.emit(("j", 0, None))
        else:
            b.block(f.size_hint - 1, len(f.callees))
            b.emit(("ret", None, None))
        f.code = b.code
        f.loop_heads = b.loop_heads
    return funcs


def _layout(spec: SynthWorkloadSpec, funcs: list[_Function]) -> None:
    rng = random.Random(spec.rng_seed ^ 0x5EED)
    total = sum(len(f.code) for f in funcs) * ISIZE
    if total > spec.code_footprint:
        raise InfeasibleSpecError(
            f"program needs {total} bytes but code_footprint is {spec.code_footprint}"
        )
    slack = spec.code_footprint - total
    order = list(range(len(funcs)))
    rng.shuffle(order)
    cuts = sorted(rng.randrange(slack // ISIZE + 1) for _ in order)
    addr = CODE_BASE
    prev_cut = 0
    for idx, cut in zip(order, cuts):
        addr += (cut - prev_cut) * ISIZE
        prev_cut = cut
        funcs[idx].entry = addr
        addr += len(funcs[idx].code) * ISIZE


@dataclass
class GroundTruth:
    functions: list[dict]

    def to_json(self) -> str:
        return json.dumps({"functions": self.functions}, indent=1)


def ground_truth(spec: SynthWorkloadSpec) -> GroundTruth:
    """Function boundaries and loop headers of the generated program (tests only)."""
    funcs = _build_program(spec)
    _layout(spec, funcs)
    return GroundTruth([
        {
            "index": f.index,
            "entry": f.entry,
            "end": f.entry + len(f.code) * ISIZE,
            "level": f.level,
            "loop_headers": [f.entry + h * ISIZE for h in f.loop_heads],
        }
        for f in funcs
    ])


def generate_synthetic(spec: SynthWorkloadSpec) -> Trace:
    """Deterministically generate a trace for ``spec``."""
    spec.validate()
    funcs = _build_program(spec)
    _layout(spec, funcs)
    rng = random.Random(spec.rng_seed * 7919 + 17)
    limit = spec.target_trace_length

    pcs: list[int] = []
    targets: list[int] = []
    flags: list[int] = []
    f_other = pack_flags(IClass.OTHER, False, False)

    # call stack frames: (function, return code offset, loop counters)
    stack: list[tuple[_Function, int, dict]] = []
    fn = funcs[0]
    off = 0
    loops: dict[int, int] = {}
    while len(pcs) < limit:
        kind, tgt, payload = fn.code[off]
        pc = fn.entry + off * ISIZE
        pcs.append(pc)
        if kind == "o":
            targets.append(0)
            flags.append(f_other)
            off += 1
        elif kind == "if":
            taken = rng.random() < payload
            targets.append(fn.entry + tgt * ISIZE)
            flags.append(pack_flags(IClass.COND, taken, True))
            off = tgt if taken else off + 1
        elif kind == "loop":
            left = loops.get(off)
            if left is None:
                lo, hi = spec.loop_iterations
                left = rng.randint(lo, hi) - 1
            taken = left > 0
            if taken:
                loops[off] = left - 1
            else:
                loops.pop(off, None)
            targets.append(fn.entry + tgt * ISIZE)
            flags.append(pack_flags(IClass.COND, taken, True))
            off = tgt if taken else off + 1
        elif kind == "j":
            targets.append(fn.entry + tgt * ISIZE)
            flags.append(pack_flags(IClass.UNCOND, True, True))
            off = tgt
        elif kind == "call":
            cands, weights = payload
            callee = funcs[rng.choices(cands, weights=weights)[0] if len(cands) > 1 else cands[0]]
            iclass = IClass.INDIRECT_CALL if len(cands) > 1 else IClass.CALL
            targets.append(callee.entry)
            flags.append(pack_flags(iclass, True, True))
            stack.append((fn, off + 1, loops))
            fn, off, loops = callee, 0, {}
        else:  # ret
            if not stack:
                targets.append(pc + ISIZE)
                flags.append(pack_flags(IClass.RETURN, True, True))
                break
            caller, roff, rloops = stack.pop()
            targets.append(caller.entry + roff * ISIZE)
            flags.append(pack_flags(IClass.RETURN, True, True))
            fn, off, loops = caller, roff, rloops

    if len(pcs) < 0.9 * limit:
        raise InfeasibleSpecError(
            f"program halts after {len(pcs)} instructions (< 90% of {limit})"
        )
    return Trace(pcs, targets, flags, TraceMeta(spec.name, ISIZE, 64, 0))


def spec_to_dict(spec: SynthWorkloadSpec) -> dict:
    d = asdict(spec)
    d["call_fanout"] = list(spec.call_fanout)
    d["loop_iterations"] = list(spec.loop_iterations)
    return d
