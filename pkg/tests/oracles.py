"""Independent brute-force oracles shared by the unit and acceptance tests."""

from deer.hyperblock import HBType


def repeat_oracle(pcs):
    """Distinct PCs between consecutive occurrences, by direct set scan."""
    out = []
    for i, pc in enumerate(pcs):
        for p in range(i - 1, -1, -1):
            if pcs[p] == pc:
                out.append(len(set(pcs[p + 1:i])))
                break
    return out


def pred_set_oracle(steps, limit=None):
    limit = sum(n for _, n in steps) if limit is None else limit
    out, covered = set(), 0
    for lines, n in steps:
        if covered >= limit:
            break
        out |= set(lines)
        covered += n
    return out


def executed_lines(pcs, i, k):
    """First ``k`` unique cachelines fetched from instruction ``i`` on."""
    seen = []
    for pc in pcs[i:]:
        line = pc & ~63
        if line not in seen:
            if len(seen) == k:
                break
            seen.append(line)
    return set(seen)


def depth_oracle(pcs, i, k):
    """(instructions, distinct PCs) of the longest run from ``i`` within ``k`` lines."""
    seen, dyn, static = set(), 0, set()
    for pc in pcs[i:]:
        line = pc & ~63
        if line not in seen:
            if len(seen) == k:
                break
            seen.add(line)
        dyn += 1
        static.add(pc)
    return dyn, len(static)


class RefHierarchy:
    """List-based two-level LRU model replaying recorded ("d"/"p", line) events."""

    def __init__(self, cfg):
        self.l1 = [[] for _ in range(cfg.l1i_size // (64 * cfg.l1i_assoc))]
        self.l2 = [[] for _ in range(cfg.l2_size // (64 * cfg.l2_assoc))]
        self.a1, self.a2 = cfg.l1i_assoc, cfg.l2_assoc
        self.seen = set()
        self.unused = {}
        self.c = dict(l1_misses=0, l2_misses=0, cold=0, noncold=0, hit_redundant=0,
                      useful_cold=0, useful_noncold=0, evicted_without_use=0)

    @staticmethod
    def _touch(sets, line):
        s = sets[line % len(sets)]
        if line in s:
            s.remove(line)
            s.append(line)
            return True
        return False

    def _put(self, sets, assoc, line):
        s = sets[line % len(sets)]
        s.append(line)
        return s.pop(0) if len(s) > assoc else None

    def _l2_fill(self, line):
        ev = self._put(self.l2, self.a2, line)
        if ev is not None and ev in self.unused:
            del self.unused[ev]
            self.c["evicted_without_use"] += 1

    def demand(self, line):
        if self._touch(self.l1, line):
            return
        self.c["l1_misses"] += 1
        if self._touch(self.l2, line):
            if line in self.unused:
                self.c["useful_cold" if self.unused.pop(line) else "useful_noncold"] += 1
        else:
            self.c["l2_misses"] += 1
            self.c["noncold" if line in self.seen else "cold"] += 1
            self.seen.add(line)
            self._l2_fill(line)
        self._put(self.l1, self.a1, line)

    def prefetch(self, line):
        if line in self.l2[line % len(self.l2)]:
            self.c["hit_redundant"] += 1
            return
        self.unused[line] = line not in self.seen
        self.seen.add(line)
        self._l2_fill(line)

    def replay(self, events):
        last = None
        for kind, line in events:
            if kind == "p":
                self.prefetch(line)
            elif line != last:
                self.demand(line)
                last = line
        return self


SENTINEL = 0xDEAD_0000_0000


def oracle_walk(trigger, hbs, depth):
    """Independent walker over HB fields with a RAS pre-seeded by unknowable entries.

    Stops right after the first return that would need a pre-trigger entry.
    """
    ras = [SENTINEL + 4 * k for k in range(depth + 1)]
    seeded = len(ras)
    out = []
    cur = trigger
    while cur in hbs and len(out) < depth:
        hb = hbs[cur]
        out.append(cur)
        if hb.skip == "recursion" or hb.hb_type is HBType.OTHER:
            cur = hb.next_hb
        elif hb.hb_type is HBType.CALL:
            ras.append(hb.return_address)
            cur = hb.next_hb
        else:
            if len(ras) <= seeded:
                break
            cur = ras.pop()
    return out
