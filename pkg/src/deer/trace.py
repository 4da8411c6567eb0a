"""Committed-instruction trace format.

A trace file is little-endian: a header (magic ``DEER``, version, instruction
size, log2 cacheline size, name, record count) followed by fixed 17-byte
records ``(pc u64, target u64, flags u8)``.  Flag bits 0-2 hold the
instruction class, bit 3 the taken flag and bit 4 marks a present target.
The record sequence number is implicit (its index).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"DEER"
VERSION = 1

FLAG_ICLASS_MASK = 0x07
FLAG_TAKEN = 0x08
FLAG_TARGET = 0x10

RECORD_DTYPE = np.dtype([("pc", "<u8"), ("target", "<u8"), ("flags", "u1")])
RECORD_SIZE = RECORD_DTYPE.itemsize  # 17, numpy packs structured dtypes


class IClass(enum.IntEnum):
    OTHER = 0
    CALL = 1
    RETURN = 2
    COND = 3
    UNCOND = 4
    INDIRECT_CALL = 5

    @property
    def is_control(self) -> bool:
        return self is not IClass.OTHER

    @property
    def is_call(self) -> bool:
        return self in (IClass.CALL, IClass.INDIRECT_CALL)


CALL_CLASSES = frozenset((int(IClass.CALL), int(IClass.INDIRECT_CALL)))


class TraceFormatError(ValueError):
    """Raised for malformed trace files; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TraceInvariantError(ValueError):
    """A record violates the InstructionRecord invariants."""

    def __init__(self, message: str, index: int):
        super().__init__(f"record {index}: {message}")
        self.index = index


@dataclass(frozen=True, slots=True)
class InstructionRecord:
    seq: int
    pc: int
    iclass: IClass
    target: int | None = None
    taken: bool = False


@dataclass(frozen=True)
class TraceMeta:
    name: str = "trace"
    instruction_size: int = 4
    cacheline_size: int = 64
    instruction_count: int = 0

    def __post_init__(self):
        cl = self.cacheline_size
        if cl < self.instruction_size or cl & (cl - 1):
            raise ValueError(f"cacheline_size {cl} must be a power of two >= instruction size")

    @property
    def line_shift(self) -> int:
        return self.cacheline_size.bit_length() - 1


def pack_flags(iclass: int, taken: bool, has_target: bool) -> int:
    return (int(iclass) & FLAG_ICLASS_MASK) | (FLAG_TAKEN if taken else 0) | (
        FLAG_TARGET if has_target else 0
    )


class Trace:
    """An immutable committed-instruction trace held as parallel arrays."""

    def __init__(self, pcs, targets, flags, meta: TraceMeta | None = None):
        self.pcs = np.asarray(pcs, dtype=np.uint64)
        self.targets = np.asarray(targets, dtype=np.uint64)
        self.flags = np.asarray(flags, dtype=np.uint8)
        if not (len(self.pcs) == len(self.targets) == len(self.flags)):
            raise ValueError("pcs, targets and flags must have equal length")
        meta = meta or TraceMeta()
        if meta.instruction_count != len(self.pcs):
            meta = TraceMeta(meta.name, meta.instruction_size, meta.cacheline_size, len(self.pcs))
        self.meta = meta
        for arr in (self.pcs, self.targets, self.flags):
            arr.flags.writeable = False

    @classmethod
    def from_records(cls, records: Iterable[InstructionRecord], meta: TraceMeta | None = None,
                     validate: bool = True) -> "Trace":
        pcs, targets, flags = [], [], []
        isize = meta.instruction_size if meta else 4
        last_seq = None
        for i, r in enumerate(records):
            if validate:
                if last_seq is not None and r.seq <= last_seq:
                    raise TraceInvariantError(f"seq {r.seq} not greater than {last_seq}", i)
                check_record(r, i, isize)
            last_seq = r.seq
            pcs.append(r.pc)
            targets.append(r.target or 0)
            flags.append(pack_flags(r.iclass, r.taken, r.target is not None))
        return cls(pcs, targets, flags, meta)

    def __len__(self) -> int:
        return len(self.pcs)

    def record(self, i: int) -> InstructionRecord:
        f = int(self.flags[i])
        has_target = bool(f & FLAG_TARGET)
        return InstructionRecord(
            seq=i,
            pc=int(self.pcs[i]),
            iclass=IClass(f & FLAG_ICLASS_MASK),
            target=int(self.targets[i]) if has_target else None,
            taken=bool(f & FLAG_TAKEN),
        )

    def __iter__(self) -> Iterator[InstructionRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def __getitem__(self, i: int) -> InstructionRecord:
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.record(i)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.meta == other.meta
            and np.array_equal(self.pcs, other.pcs)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.flags, other.flags)
        )

    def iclasses(self) -> np.ndarray:
        return self.flags & FLAG_ICLASS_MASK

    def columns(self) -> tuple[list[int], list[int], list[int]]:
        """Plain Python lists (pc, target, iclass) for hot simulation loops."""
        return self.pcs.tolist(), self.targets.tolist(), self.iclasses().tolist()

    def slice(self, start: int, stop: int) -> "Trace":
        m = self.meta
        return Trace(self.pcs[start:stop], self.targets[start:stop], self.flags[start:stop],
                     TraceMeta(m.name, m.instruction_size, m.cacheline_size, 0))

    def unique_lines(self) -> int:
        return len(np.unique(self.pcs >> np.uint64(self.meta.line_shift)))


def check_record(r: InstructionRecord, index: int, instruction_size: int = 4) -> None:
    try:
        iclass = IClass(r.iclass)
    except ValueError:
        raise TraceInvariantError(f"unknown iclass {r.iclass!r}", index) from None
    if r.pc % instruction_size:
        raise TraceInvariantError(f"pc {r.pc:#x} not aligned", index)
    if iclass is IClass.OTHER:
        if r.target is not None:
            raise TraceInvariantError("iclass=other must not carry a target", index)
    else:
        if r.target is None:
            raise TraceInvariantError(f"{iclass.name.lower()} requires a target", index)
        if r.target % instruction_size:
            raise TraceInvariantError(f"target {r.target:#x} not aligned", index)


_HEAD = struct.Struct("<4sHBBH")


def _encode_header(meta: TraceMeta, count: int) -> bytes:
    name = meta.name.encode("utf-8")
    return (
        _HEAD.pack(MAGIC, VERSION, meta.instruction_size, meta.line_shift, len(name))
        + name
        + struct.pack("<Q", count)
    )


def write_trace(trace: Trace | Iterable[InstructionRecord], path: str | PathLike,
                meta: TraceMeta | None = None) -> None:
    """Write a trace; invariant violations are refused before anything is written."""
    if not isinstance(trace, Trace):
        trace = Trace.from_records(trace, meta)
    else:
        _validate_arrays(trace)
    arr = np.empty(len(trace), dtype=RECORD_DTYPE)
    arr["pc"] = trace.pcs
    arr["target"] = trace.targets
    arr["flags"] = trace.flags
    with open(path, "wb") as fh:
        fh.write(_encode_header(trace.meta, len(trace)))
        fh.write(arr.tobytes())


def _validate_arrays(trace: Trace) -> None:
    isize = trace.meta.instruction_size
    cls = trace.iclasses()
    bad = np.nonzero(cls > IClass.INDIRECT_CALL)[0]
    if len(bad):
        raise TraceInvariantError(f"unknown iclass {int(cls[bad[0]])}", int(bad[0]))
    has_t = (trace.flags & FLAG_TARGET) != 0
    bad = np.nonzero(has_t != (cls != IClass.OTHER))[0]
    if len(bad):
        i = int(bad[0])
        msg = "iclass=other must not carry a target" if cls[i] == 0 else "missing target"
        raise TraceInvariantError(msg, i)
    bad = np.nonzero((trace.pcs % np.uint64(isize)) | (trace.targets % np.uint64(isize)))[0]
    if len(bad):
        raise TraceInvariantError("unaligned pc or target", int(bad[0]))


def read_trace(path: str | PathLike) -> Trace:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_trace(data)


def decode_trace(data: bytes) -> Trace:
    if len(data) < _HEAD.size:
        raise TraceFormatError("truncated header", len(data))
    magic, version, isize, cl_log2, name_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}", 4)
    if isize == 0:
        raise TraceFormatError("instruction size 0", 6)
    off = _HEAD.size
    if len(data) < off + name_len + 8:
        raise TraceFormatError("truncated header", len(data))
    try:
        name = data[off:off + name_len].decode("utf-8")
    except UnicodeDecodeError:
        raise TraceFormatError("name is not UTF-8", off) from None
    off += name_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    body = len(data) - off
    if body < count * RECORD_SIZE:
        whole = body // RECORD_SIZE
        raise TraceFormatError(f"truncated record {whole} of {count}", off + whole * RECORD_SIZE)
    if body > count * RECORD_SIZE:
        raise TraceFormatError("trailing bytes after last record", off + count * RECORD_SIZE)
    try:
        meta = TraceMeta(name, isize, 1 << cl_log2, count)
    except ValueError as exc:
        raise TraceFormatError(str(exc), 7) from None
    arr = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=off)
    trace = Trace(arr["pc"].copy(), arr["target"].copy(), arr["flags"].copy(), meta)
    try:
        _validate_arrays(trace)
    except TraceInvariantError as exc:
        raise TraceFormatError(str(exc), off + exc.index * RECORD_SIZE) from None
    return trace


def line_of(pc: int, line_size: int = 64) -> int:
    """Cacheline-aligned address containing ``pc``."""
    return pc & ~(line_size - 1)


class TraceBuilder:
    """Incremental construction of hand-made traces (tests, fixtures).

    >>> b = TraceBuilder()
    >>> b.straight(0x1000, 3).call(0x100c, 0x2000)
    """

    def __init__(self, name: str = "hand", instruction_size: int = 4):
        self.name = name
        self.isize = instruction_size
        self.pcs: list[int] = []
        self.targets: list[int] = []
        self.flags: list[int] = []

    def _add(self, pc, iclass, target=None, taken=False):
        self.pcs.append(pc)
        self.targets.append(target or 0)
        self.flags.append(pack_flags(iclass, taken, target is not None))
        return self

    def straight(self, pc: int, n: int):
        for k in range(n):
            self._add(pc + k * self.isize, IClass.OTHER)
        return self

    def call(self, pc: int, target: int, indirect: bool = False):
        return self._add(pc, IClass.INDIRECT_CALL if indirect else IClass.CALL, target, True)

    def ret(self, pc: int, target: int):
        return self._add(pc, IClass.RETURN, target, True)

    def cond(self, pc: int, target: int, taken: bool):
        return self._add(pc, IClass.COND, target, taken)

    def jump(self, pc: int, target: int):
        return self._add(pc, IClass.UNCOND, target, True)

    def extend(self, other: "TraceBuilder"):
        self.pcs += other.pcs
        self.targets += other.targets
        self.flags += other.flags
        return self

    def build(self) -> Trace:
        return Trace(self.pcs, self.targets, self.flags, TraceMeta(self.name, self.isize, 64, 0))
