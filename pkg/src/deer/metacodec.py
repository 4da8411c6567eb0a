"""Bit-exact 16-byte hyperblock metadata entries and the hashed metadata table.

Entry layout: two little-endian 64-bit groups.  Within a group::

    bits  0-29  full-region base (address bits 9-38)
    bits 30-37  bitmap of the full region (bit i = cacheline i of the region)
    bits 38-42  delta1, signed, in 512-byte regions relative to the full base
    bits 43-50  bitmap1
    bits 51-55  delta2, signed
    bits 56-63  bitmap2

Address bits 39 and up are taken from the HB PC.  A region is 512 bytes
(8 lines of 64 bytes).  A group with an all-zero bitmap field is unused.

Table hashing: ``mix64`` is the splitmix64 finalizer.  With seed ``s`` and
``B`` buckets (a power of two), a key ``k`` may live in bucket
``mix64(k ^ s) & (B-1)`` or ``mix64(k ^ s ^ 0x9E3779B97F4A7C15) & (B-1)``.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from os import PathLike

REGION_SHIFT = 9
REGION_BYTES = 1 << REGION_SHIFT
LINE_SHIFT = 6
LINES_PER_REGION = REGION_BYTES >> LINE_SHIFT
BASE_BITS = 30
UPPER_SHIFT = REGION_SHIFT + BASE_BITS  # 39
DELTA_MIN, DELTA_MAX = -16, 15
MAX_REGIONS = 6
MAX_LINES = MAX_REGIONS * LINES_PER_REGION
ENTRY_BYTES = 16

MASK64 = (1 << 64) - 1


class EncodingError(ValueError):
    def __init__(self, message: str, cacheline: int):
        super().__init__(f"{message}: cacheline {cacheline:#x}")
        self.cacheline = cacheline


class RegionOverflow(EncodingError):
    pass


class DeltaOverflow(EncodingError):
    pass


class UpperBitsMismatch(EncodingError):
    pass


@dataclass(frozen=True)
class MetadataEntry:
    data: bytes

    def __post_init__(self):
        if len(self.data) != ENTRY_BYTES:
            raise ValueError(f"metadata entry must be {ENTRY_BYTES} bytes, got {len(self.data)}")

    @property
    def groups(self) -> tuple[int, int]:
        return struct.unpack("<QQ", self.data)

    @classmethod
    def from_groups(cls, g1: int, g2: int) -> "MetadataEntry":
        return cls(struct.pack("<QQ", g1, g2))

    @classmethod
    def empty(cls) -> "MetadataEntry":
        return cls(bytes(ENTRY_BYTES))


def _pack_group(base: int, bitmap: int, deltas: list[tuple[int, int]]) -> int:
    word = (base & ((1 << BASE_BITS) - 1)) | (bitmap << 30)
    for slot, (delta, bm) in enumerate(deltas):
        shift = 38 + slot * 13
        word |= ((delta & 0x1F) << shift) | (bm << (shift + 5))
    return word


def _unpack_group(word: int) -> list[tuple[int, int]]:
    """[(region offset from base, bitmap)] for the three region slots."""
    base = word & ((1 << BASE_BITS) - 1)
    out = [(base, (word >> 30) & 0xFF)]
    for slot in range(2):
        shift = 38 + slot * 13
        d = (word >> shift) & 0x1F
        if d & 0x10:
            d -= 32
        out.append((base + d, (word >> (shift + 5)) & 0xFF))
    return out


def _fit_group(regions: list[int]) -> tuple[int, list[int]] | None:
    """Choose a base among ``regions`` with every other within the delta range."""
    for base in regions:
        others = [r for r in regions if r != base]
        if all(DELTA_MIN <= r - base <= DELTA_MAX for r in others):
            return base, others
    return None


def _partitions(n: int):
    idx = list(range(n))
    if n <= 3:
        yield idx, []
    for k in range(min(n, 3), max(n - 3, 1) - 1, -1):
        for g1 in itertools.combinations(idx, k):
            if 0 not in g1:
                continue
            g2 = [i for i in idx if i not in g1]
            if len(g2) <= 3 and g2:
                yield list(g1), g2


def encode_entry(hb_pc: int, cachelines) -> MetadataEntry:
    """Encode a set of 64-byte-aligned cacheline addresses for ``hb_pc``."""
    upper = hb_pc >> UPPER_SHIFT
    by_region: dict[int, int] = {}
    for line in sorted(set(cachelines)):
        if line & ((1 << LINE_SHIFT) - 1):
            raise ValueError(f"cacheline {line:#x} is not 64-byte aligned")
        if line >> UPPER_SHIFT != upper:
            raise UpperBitsMismatch("upper address bits differ from the HB PC", line)
        region = (line >> REGION_SHIFT) & ((1 << BASE_BITS) - 1)
        by_region[region] = by_region.get(region, 0) | (1 << ((line >> LINE_SHIFT) & 7))
    regions = sorted(by_region)
    if not regions:
        return MetadataEntry.empty()
    if len(regions) > MAX_REGIONS:
        raise RegionOverflow(f"needs {len(regions)} regions, max {MAX_REGIONS}",
                             _region_line(upper, regions[MAX_REGIONS]))
    for g1, g2 in _partitions(len(regions)):
        words = []
        for group in (g1, g2):
            if not group:
                words.append(0)
                continue
            fit = _fit_group([regions[i] for i in group])
            if fit is None:
                break
            base, others = fit
            words.append(_pack_group(base, by_region[base],
                                     [(r - base, by_region[r]) for r in others]))
        else:
            return MetadataEntry.from_groups(*words)
    raise DeltaOverflow("regions too far apart for two delta groups",
                        _region_line(upper, regions[-1]))


def _region_line(upper: int, region: int) -> int:
    return (upper << UPPER_SHIFT) | (region << REGION_SHIFT)


def decode_entry(entry: MetadataEntry, hb_pc: int) -> list[int]:
    """Cachelines sorted by (group, region slot, bit index)."""
    upper = (hb_pc >> UPPER_SHIFT) << UPPER_SHIFT
    out = []
    for word in entry.groups:
        for region, bitmap in _unpack_group(word):
            if not bitmap:
                continue
            region &= (1 << BASE_BITS) - 1
            for bit in range(LINES_PER_REGION):
                if bitmap >> bit & 1:
                    out.append(upper | (region << REGION_SHIFT) | (bit << LINE_SHIFT))
    return out


def encode_lossy(hb_pc: int, cachelines: list[int]) -> tuple[MetadataEntry, int]:
    """Encode, dropping earliest-in-chain lines until encodable; returns (entry, drops)."""
    lines = list(dict.fromkeys(cachelines))
    upper = hb_pc >> UPPER_SHIFT
    kept = [l for l in lines if l >> UPPER_SHIFT == upper]
    dropped = len(lines) - len(kept)
    while True:
        try:
            return encode_entry(hb_pc, kept), dropped
        except (RegionOverflow, DeltaOverflow):
            kept = kept[1:]
            dropped += 1


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


ALT_SALT = 0x9E3779B97F4A7C15
TABLE_MAGIC = b"DRHB"
TABLE_VERSION = 1
_TABLE_HEAD = struct.Struct("<4sHQQ")
_SLOT = struct.Struct("<Q16s")


class InsertionFailure(RuntimeError):
    pass


@dataclass
class HashConfig:
    seed: int = 0x5EED_DEE5
    max_kicks: int = 500
    max_regrows: int = 3


class MetadataTable:
    """Two-choice cuckoo table of 16-byte entries keyed by HB start PC."""

    def __init__(self, bucket_count: int, seed: int, base_address: int = 0x7F00_0000_0000):
        if bucket_count & (bucket_count - 1) or bucket_count < 1:
            raise ValueError("bucket_count must be a power of two")
        self.bucket_count = bucket_count
        self.seed = seed
        self.base_address = base_address  # the HBT_PTR register value
        self.keys = [0] * bucket_count
        self.entries: list[MetadataEntry | None] = [None] * bucket_count
        self.probes = 0

    def buckets(self, key: int) -> tuple[int, int]:
        m = self.bucket_count - 1
        return mix64(key ^ self.seed) & m, mix64(key ^ self.seed ^ ALT_SALT) & m

    def entry_address(self, key: int) -> int:
        return self.base_address + self.buckets(key)[0] * ENTRY_BYTES

    def _insert(self, key: int, entry: MetadataEntry, max_kicks: int) -> bool:
        b1, b2 = self.buckets(key)
        for b in (b1, b2):
            if self.keys[b] in (0, key):
                self.keys[b], self.entries[b] = key, entry
                return True
        b = b1
        for _ in range(max_kicks):
            key, self.keys[b] = self.keys[b], key
            entry, self.entries[b] = self.entries[b], entry
            c1, c2 = self.buckets(key)
            b = c2 if b == c1 else c1
            if self.keys[b] == 0:
                self.keys[b], self.entries[b] = key, entry
                return True
        self._homeless = (key, entry)
        return False

    def lookup(self, hb_pc: int) -> MetadataEntry | None:
        for b in self.buckets(hb_pc):
            self.probes += 1
            if self.keys[b] == hb_pc:
                return self.entries[b]
        return None

    def __contains__(self, hb_pc: int) -> bool:
        return any(self.keys[b] == hb_pc for b in self.buckets(hb_pc))

    def items(self):
        for k, e in zip(self.keys, self.entries):
            if k:
                yield k, e

    @property
    def occupancy(self) -> int:
        return sum(1 for k in self.keys if k)

    @property
    def memory_bytes(self) -> int:
        """In-memory footprint of the entry array (keys are a file-format artifact)."""
        return self.bucket_count * ENTRY_BYTES

    def to_bytes(self) -> bytes:
        parts = [_TABLE_HEAD.pack(TABLE_MAGIC, TABLE_VERSION, self.bucket_count, self.seed)]
        empty = bytes(ENTRY_BYTES)
        for k, e in zip(self.keys, self.entries):
            parts.append(_SLOT.pack(k, e.data if e is not None else empty))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MetadataTable":
        if len(data) < _TABLE_HEAD.size:
            raise ValueError("truncated metadata header")
        magic, version, buckets, seed = _TABLE_HEAD.unpack_from(data, 0)
        if magic != TABLE_MAGIC:
            raise ValueError(f"bad metadata magic {magic!r}")
        if version != TABLE_VERSION:
            raise ValueError(f"unsupported metadata version {version}")
        need = _TABLE_HEAD.size + buckets * _SLOT.size
        if len(data) != need:
            raise ValueError(f"metadata file size {len(data)} != expected {need}")
        t = cls(buckets, seed)
        off = _TABLE_HEAD.size
        for i in range(buckets):
            k, e = _SLOT.unpack_from(data, off + i * _SLOT.size)
            if k:
                t.keys[i] = k
                t.entries[i] = MetadataEntry(e)
        return t


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


def table_build(entries: dict[int, MetadataEntry], hash_config: HashConfig | None = None
                ) -> MetadataTable:
    """Build a table with at most 50% load; regrow up to ``max_regrows`` times."""
    hc = hash_config or HashConfig()
    if 0 in entries:
        raise ValueError("HB pc 0 is reserved for empty slots")
    buckets = max(_next_pow2(2 * len(entries)), 2)
    for _ in range(hc.max_regrows + 1):
        t = MetadataTable(buckets, hc.seed)
        if all(t._insert(k, e, hc.max_kicks) for k, e in sorted(entries.items())):
            return t
        buckets *= 2
    raise InsertionFailure(f"could not place {len(entries)} entries after {hc.max_regrows} regrows")


def table_lookup(table: MetadataTable, hb_pc: int) -> MetadataEntry | None:
    return table.lookup(hb_pc)


def write_table(table: MetadataTable, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(table.to_bytes())


def read_table(path: str | PathLike) -> MetadataTable:
    with open(path, "rb") as fh:
        return MetadataTable.from_bytes(fh.read())
