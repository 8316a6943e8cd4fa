"""Configurable TLB hierarchy.

Levels probe in order; a serial multi-size level pays one level-latency per
page size probed, in predictor-ranked order. Behind the levels sit three
optional structures consulted on an overall miss: a FIFO prefetch buffer, TLB
entries parked in the data caches, and a DRAM-resident software TLB.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import LINE, PAGE_SIZES, SIZE_NAMES, mix64
from .memhier import KIND_TLB, MemoryHierarchy

STATIC_ORDER = ("4K", "2M", "1G")


@dataclass
class TlbEntry:
    asid: int
    vpn: int          # page number in this entry's size
    size: int         # bytes
    pfn: int          # 4 KiB frame units; page base = pfn * 4096
    origin: str = "walk"  # walk | prefetch | range

    def key(self) -> tuple[int, int, int]:
        return (self.asid, self.vpn, self.size)

    def covers(self, va: int) -> bool:
        return self.vpn == va // self.size

    def translate(self, va: int) -> int:
        return self.pfn * 4096 + (va - self.vpn * self.size)

    def vrange(self) -> tuple[int, int]:
        return self.vpn * self.size, (self.vpn + 1) * self.size


@dataclass(frozen=True)
class TlbOutcome:
    path: str | None  # level name, prefetch, victima, pomtlb, or None on miss
    latency: int
    entry: TlbEntry | None


class SizePredictor:
    """2-bit counter per VA region (va >> 30) arbitrating 4K-vs-2M probe order."""

    def __init__(self, table_entries: int):
        self.table_entries = table_entries
        self.counters = bytearray(table_entries)

    def _idx(self, va: int) -> int:
        return mix64(va >> 30) % self.table_entries

    def rank(self, va: int) -> tuple[str, ...]:
        if self.counters[self._idx(va)] >= 2:
            return ("2M", "4K", "1G")
        return STATIC_ORDER

    def update(self, va: int, size: int) -> None:
        i = self._idx(va)
        c = self.counters[i]
        self.counters[i] = min(3, c + 1) if size == PAGE_SIZES["2M"] else max(0, c - 1)


class _Level:
    def __init__(self, cfg: dict):
        self.name = cfg["name"]
        self.entries = cfg["entries"]
        self.assoc = cfg["assoc"]
        self.latency = cfg["latency"]
        self.sizes = tuple(PAGE_SIZES[s] for s in cfg["sizes"])
        self.serial = cfg["probe"] == "serial"
        self.sets = max(1, self.entries // self.assoc)
        self.data: list[dict[tuple[int, int, int], TlbEntry]] = [dict() for _ in range(self.sets)]

    def _set(self, asid: int, vpn: int) -> dict:
        return self.data[mix64(asid ^ vpn) % self.sets]

    def probe(self, pid: int, va: int, order: tuple[str, ...]) -> tuple[int, TlbEntry | None]:
        sizes = [PAGE_SIZES[s] for s in order if PAGE_SIZES[s] in self.sizes]
        if self.serial:
            cost = 0
            for size in sizes:
                cost += self.latency
                vpn = va // size
                s = self._set(pid, vpn)
                hit = s.get((pid, vpn, size))
                if hit is not None:
                    del s[hit.key()]
                    s[hit.key()] = hit  # LRU bump
                    return cost, hit
            return cost, None
        for size in sizes:
            vpn = va // size
            s = self._set(pid, vpn)
            hit = s.get((pid, vpn, size))
            if hit is not None:
                del s[hit.key()]
                s[hit.key()] = hit
                return self.latency, hit
        return self.latency, None

    def insert(self, entry: TlbEntry) -> TlbEntry | None:
        """Upsert; returns the LRU victim if the set overflowed."""
        s = self._set(entry.asid, entry.vpn)
        s.pop(entry.key(), None)
        victim = None
        if len(s) >= self.assoc:
            victim = s.pop(next(iter(s)))
        s[entry.key()] = entry
        return victim

    def invalidate(self, pid: int, base: int, length: int) -> int:
        count = 0
        for s in self.data:
            doomed = [
                k for k, e in s.items()
                if e.asid == pid and e.vrange()[0] < base + length and base < e.vrange()[1]
            ]
            for k in doomed:
                del s[k]
            count += len(doomed)
        return count

    def contains(self, pid: int, vpn: int, size: int) -> bool:
        return (pid, vpn, size) in self._set(pid, vpn)


class _PrefetchBuffer:
    """Fully associative FIFO for entries brought in by the prefetcher."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.slots: dict[tuple[int, int, int], TlbEntry] = {}

    def insert(self, entry: TlbEntry) -> None:
        if entry.key() in self.slots:
            return
        if len(self.slots) >= self.capacity:
            del self.slots[next(iter(self.slots))]
        self.slots[entry.key()] = entry

    def take(self, pid: int, va: int, order: tuple[str, ...]) -> TlbEntry | None:
        for name in order:
            size = PAGE_SIZES[name]
            entry = self.slots.pop((pid, va // size, size), None)
            if entry is not None:
                return entry
        return None

    def invalidate(self, pid: int, base: int, length: int) -> int:
        doomed = [
            k for k, e in self.slots.items()
            if e.asid == pid and e.vrange()[0] < base + length and base < e.vrange()[1]
        ]
        for k in doomed:
            del self.slots[k]
        return len(doomed)


class TlbHierarchy:
    def __init__(self, tlb_cfg: dict, memhier: MemoryHierarchy,
                 pomtlb_base: int | None = None, victima_base: int | None = None):
        self.levels = [_Level(lc) for lc in tlb_cfg["levels"]]
        self.shootdown_cycles = tlb_cfg["shootdown_cycles"]

        pred = tlb_cfg["predictor"]
        self.predictor = SizePredictor(pred["table_entries"]) if pred["enabled"] else None

        self.memhier = memhier
        self.prefetch_capacity = tlb_cfg["prefetch"]["entries"]
        self.prefetch = _PrefetchBuffer(self.prefetch_capacity) if self.prefetch_capacity else None

        vic = tlb_cfg["victima"]
        self.victima_enabled = vic["enabled"]
        self.victima_lines = vic["capacity_lines"]
        self.victima_base = victima_base if victima_base is not None else 1 << 50
        self.victima_store: dict[int, TlbEntry] = {}
        if self.victima_enabled:
            memhier.add_region(self.victima_base, self.victima_lines * LINE)

        pom = tlb_cfg["pomtlb"]
        self.pomtlb_enabled = pom["enabled"]
        self.pomtlb_entries = pom["entries"]
        self.pomtlb_base = pomtlb_base if pomtlb_base is not None else 0
        self.pomtlb_store: dict[int, tuple[int, int, int]] = {}  # slot -> (asid, vpn4k, pfn)

        self.stats = {
            "levels": {
                lvl.name: {"hits": {"4K": 0, "2M": 0, "1G": 0}, "misses": 0}
                for lvl in self.levels
            },
            "prefetch_hits": 0,
            "prefetch_fills": 0,
            "victima_hits": 0,
            "victima_writes": 0,
            "pomtlb_hits": 0,
            "pomtlb_misses": 0,
            "shootdowns": 0,
            "invalidated": 0,
        }

    # -- probe order -----------------------------------------------------------

    def probe_order(self, va: int) -> tuple[str, ...]:
        if self.predictor is not None:
            return self.predictor.rank(va)
        return STATIC_ORDER

    def note_resolved(self, va: int, size: int) -> None:
        if self.predictor is not None:
            self.predictor.update(va, size)

    # -- software TLB ----------------------------------------------------------

    def _pomtlb_line(self, slot: int) -> int:
        return self.pomtlb_base + (slot * 16 // LINE) * LINE

    def software_tlb_lookup(self, pid: int, va: int) -> tuple[int, TlbEntry | None]:
        vpn4k = va // 4096
        slot = mix64(pid ^ vpn4k) % self.pomtlb_entries
        out = self.memhier.access(self._pomtlb_line(slot), KIND_TLB)
        rec = self.pomtlb_store.get(slot)
        if rec is not None and rec[0] == pid and rec[1] == vpn4k:
            return out.latency, TlbEntry(pid, vpn4k, 4096, rec[2])
        return out.latency, None

    def software_tlb_fill(self, pid: int, vpn4k: int, pfn: int) -> None:
        """Written on walk completion, off the critical path."""
        slot = mix64(pid ^ vpn4k) % self.pomtlb_entries
        self.pomtlb_store[slot] = (pid, vpn4k, pfn)
        self.memhier.access(self._pomtlb_line(slot), KIND_TLB, write=True)

    # -- cache-stored victims ----------------------------------------------------

    def _victima_addr(self, asid: int, vpn: int) -> int:
        return self.victima_base + (mix64(asid ^ vpn) % self.victima_lines) * LINE

    def _victima_write(self, entry: TlbEntry) -> None:
        addr = self._victima_addr(entry.asid, entry.vpn)
        self.victima_store[addr] = entry
        self.memhier.access(addr, KIND_TLB, write=True)
        self.stats["victima_writes"] += 1

    def _victima_probe(self, pid: int, va: int, order: tuple[str, ...]
                       ) -> tuple[int, TlbEntry | None]:
        latency = 0
        for name in order:
            size = PAGE_SIZES[name]
            vpn = va // size
            addr = self._victima_addr(pid, vpn)
            rec = self.victima_store.get(addr)
            if rec is None or rec.asid != pid or rec.vpn != vpn or rec.size != size:
                continue
            out = self.memhier.probe_cached(addr, KIND_TLB)
            if out is not None:
                return latency + out.latency, rec
            # Fell out of the caches: gone for good, probe cost still paid.
            latency += self.memhier.cache_probe_cost()
            del self.victima_store[addr]
        return latency, None

    # -- main operations -----------------------------------------------------------

    def lookup(self, pid: int, va: int, order: tuple[str, ...] | None = None) -> TlbOutcome:
        order = order or self.probe_order(va)
        latency = 0
        for idx, level in enumerate(self.levels):
            cost, entry = level.probe(pid, va, order)
            latency += cost
            if entry is not None:
                self.stats["levels"][level.name]["hits"][SIZE_NAMES[entry.size]] += 1
                if idx > 0:
                    self.fill(pid, entry)
                return TlbOutcome(level.name, latency, entry)
            self.stats["levels"][level.name]["misses"] += 1
        if self.prefetch is not None:
            entry = self.prefetch.take(pid, va, order)
            if entry is not None:
                self.stats["prefetch_hits"] += 1
                self.fill(pid, entry)
                return TlbOutcome("prefetch", latency, entry)
        if self.victima_enabled:
            cost, entry = self._victima_probe(pid, va, order)
            latency += cost
            if entry is not None:
                self.stats["victima_hits"] += 1
                self.fill(pid, entry)
                return TlbOutcome("victima", latency, entry)
        if self.pomtlb_enabled:
            cost, entry = self.software_tlb_lookup(pid, va)
            latency += cost
            if entry is not None:
                self.stats["pomtlb_hits"] += 1
                self.fill(pid, entry)
                return TlbOutcome("pomtlb", latency, entry)
            self.stats["pomtlb_misses"] += 1
        return TlbOutcome(None, latency, None)

    def fill(self, pid: int, entry: TlbEntry, prefetch: bool = False) -> None:
        if prefetch:
            if self.prefetch is not None:
                self.prefetch.insert(entry)
                self.stats["prefetch_fills"] += 1
            return
        victim = entry
        inserted = False
        for level in self.levels:
            if victim.size not in level.sizes:
                continue
            inserted = True
            victim = level.insert(victim)
            if victim is None:
                return
        if inserted and self.victima_enabled:
            self._victima_write(victim)

    def contains(self, pid: int, va: int) -> bool:
        """Metadata check (no cost): is any translation for va resident?"""
        for name in STATIC_ORDER:
            size = PAGE_SIZES[name]
            vpn = va // size
            for level in self.levels:
                if size in level.sizes and level.contains(pid, vpn, size):
                    return True
            if self.prefetch is not None and (pid, vpn, size) in self.prefetch.slots:
                return True
        return False

    def invalidate_region(self, pid: int, base: int, length: int) -> int:
        """Drop all of pid's entries overlapping [base, base+len) everywhere."""
        count = 0
        for level in self.levels:
            count += level.invalidate(pid, base, length)
        if self.prefetch is not None:
            count += self.prefetch.invalidate(pid, base, length)
        if self.pomtlb_enabled:
            doomed = [
                slot for slot, (asid, vpn4k, _) in self.pomtlb_store.items()
                if asid == pid and base <= vpn4k * 4096 < base + length
            ]
            for slot in doomed:
                del self.pomtlb_store[slot]
            count += len(doomed)
        stale = [
            addr for addr, e in self.victima_store.items()
            if e.asid == pid and e.vrange()[0] < base + length and base < e.vrange()[1]
        ]
        for addr in stale:
            del self.victima_store[addr]
        self.stats["shootdowns"] += 1
        self.stats["invalidated"] += count
        return count
