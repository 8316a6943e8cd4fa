"""Translation paths consulted between TLB miss and page-table walk.

Direct segments (one base/limit/offset per process), range translation (many
offsets behind a small fully-associative range TLB and an in-memory sorted
table), a hashed restrictive segment eliminating walks for resident pages,
and the intermediate-address mode that defers physical translation to LLC
misses.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import PAGE_2M, VmsimError, mix64
from .memhier import KIND_PTE, MemoryHierarchy
from .memmgr import BuddyAllocator

RANGE_ENTRY_BYTES = 32  # vbase, vlimit, offset, pad
SEGMENT_CHECK_CYCLES = 1

# Intermediate addresses live high so they never alias physical lines.
INTERMEDIATE_BASE = 1 << 40


class NoVma(VmsimError):
    pass


class RestSegConflict(VmsimError):
    pass


@dataclass
class RangeEntry:
    vbase: int
    vlimit: int
    offset: int

    def covers(self, va: int) -> bool:
        return self.vbase <= va < self.vlimit


class DirectSegments:
    def __init__(self):
        self.segments: dict[int, tuple[int, int, int]] = {}  # pid -> (base, limit, offset)

    def set_segment(self, pid: int, base: int, limit: int, offset: int) -> None:
        self.segments[pid] = (base, limit, offset)

    def clear(self, pid: int) -> None:
        self.segments.pop(pid, None)

    def has(self, pid: int) -> bool:
        return pid in self.segments

    def translate(self, pid: int, va: int) -> tuple[int, int | None]:
        """Returns (check_cycles, pa or None)."""
        seg = self.segments.get(pid)
        if seg is None:
            return 0, None
        base, limit, offset = seg
        if base <= va < limit:
            return SEGMENT_CHECK_CYCLES, va + offset
        return SEGMENT_CHECK_CYCLES, None


class _EntryArray:
    """Sorted 32-byte entries backed by lazily allocated frames."""

    def __init__(self, mm: BuddyAllocator, owner: str):
        self.mm = mm
        self.owner = owner
        self.frames: list[int] = []

    def entry_pa(self, index: int) -> int:
        byte = index * RANGE_ENTRY_BYTES
        frame_idx = byte // 4096
        while frame_idx >= len(self.frames):
            self.frames.append(self.mm.alloc_block(0, owner=self.owner))
        return self.frames[frame_idx] * 4096 + byte % 4096

    def bytes(self) -> int:
        return len(self.frames) * 4096


def _binary_search(memhier: MemoryHierarchy, array: _EntryArray, keys: list[int],
                   va: int, accesses: list[int]) -> tuple[int, int]:
    """ceil(log2 n) probe reads plus one verify read; returns (index, cycles)."""
    n = len(keys)
    latency = 0
    lo, hi = 0, n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        pa = array.entry_pa(mid)
        out = memhier.access(pa, KIND_PTE)
        accesses.append(pa)
        latency += out.latency
        if keys[mid] <= va:
            lo = mid
        else:
            hi = mid
    pa = array.entry_pa(lo)
    out = memhier.access(pa, KIND_PTE)
    accesses.append(pa)
    latency += out.latency
    return lo, latency


class RangeSubsystem:
    def __init__(self, cfg: dict, memhier: MemoryHierarchy, mm: BuddyAllocator):
        self.memhier = memhier
        self.mm = mm
        self.rtlb_entries = cfg["rtlb"]["entries"]
        self.rtlb_latency = cfg["rtlb"]["latency"]
        self.rtlb: dict[tuple[int, int], RangeEntry] = {}
        self.tables: dict[int, list[RangeEntry]] = {}
        self.arrays: dict[int, _EntryArray] = {}
        self.stats = {"rtlb_hits": 0, "table_hits": 0, "misses": 0, "added": 0, "removed": 0}

    def count(self, pid: int) -> int:
        return len(self.tables.get(pid, []))

    def add_range(self, pid: int, vbase: int, vlimit: int, offset: int) -> list[int]:
        if vbase % 4096 or vlimit % 4096 or vbase >= vlimit:
            raise VmsimError(f"bad range [{vbase:#x}, {vlimit:#x})")
        table = self.tables.setdefault(pid, [])
        array = self.arrays.setdefault(pid, _EntryArray(self.mm, f"ranges:{pid}"))
        for entry in table:
            if entry.vbase < vlimit and vbase < entry.vlimit:
                raise VmsimError(f"range [{vbase:#x}, {vlimit:#x}) overlaps an existing one")
        entry = RangeEntry(vbase, vlimit, offset)
        idx = 0
        while idx < len(table) and table[idx].vbase < vbase:
            idx += 1
        table.insert(idx, entry)
        self.stats["added"] += 1
        return [array.entry_pa(idx)]

    def remove_region(self, pid: int, base: int, length: int) -> int:
        table = self.tables.get(pid, [])
        doomed = [e for e in table if e.vbase < base + length and base < e.vlimit]
        for entry in doomed:
            table.remove(entry)
        for key in [k for k, e in self.rtlb.items() if k[0] == pid and e in doomed]:
            del self.rtlb[key]
        self.stats["removed"] += len(doomed)
        return len(doomed)

    def lookup(self, pid: int, va: int) -> tuple[int, int | None, str | None, list[int]]:
        """Returns (cycles, pa or None, source, accesses)."""
        latency = self.rtlb_latency
        for key, entry in self.rtlb.items():
            if key[0] == pid and entry.covers(va):
                del self.rtlb[key]  # LRU bump
                self.rtlb[key] = entry
                self.stats["rtlb_hits"] += 1
                return latency, va + entry.offset, "rtlb", []
        table = self.tables.get(pid, [])
        if not table:
            return latency, None, None, []
        accesses: list[int] = []
        array = self.arrays[pid]
        keys = [e.vbase for e in table]
        idx, walk_cycles = _binary_search(self.memhier, array, keys, va, accesses)
        latency += walk_cycles
        entry = table[idx]
        if entry.covers(va):
            self._rtlb_fill(pid, entry)
            self.stats["table_hits"] += 1
            return latency, va + entry.offset, "rtable", accesses
        self.stats["misses"] += 1
        return latency, None, None, accesses

    def _rtlb_fill(self, pid: int, entry: RangeEntry) -> None:
        key = (pid, entry.vbase)
        self.rtlb.pop(key, None)
        if len(self.rtlb) >= self.rtlb_entries:
            del self.rtlb[next(iter(self.rtlb))]
        self.rtlb[key] = entry

    def footprint(self, pid: int) -> int:
        array = self.arrays.get(pid)
        return array.bytes() if array else 0


class RestSeg:
    def __init__(self, cfg: dict, memhier: MemoryHierarchy, base: int):
        self.memhier = memhier
        self.sets = cfg["sets"]
        self.ways = cfg["ways"]
        self.base = base
        self.tags_base = base + self.sets * self.ways * 4096
        self.members: dict[int, list[tuple[int, int] | None]] = {}
        self.stats = {"hits": 0, "misses": 0, "fills": 0}

    def frames(self) -> int:
        """Total frames of the data region plus the tag lines."""
        tag_frames = (self.sets * 64 + 4095) // 4096
        return self.sets * self.ways + tag_frames

    def set_of(self, pid: int, vpn4k: int) -> int:
        return mix64(pid ^ vpn4k) % self.sets

    def _tags_pa(self, set_idx: int) -> int:
        return self.tags_base + set_idx * 64

    def translate(self, pid: int, va: int) -> tuple[int, int | None, list[int]]:
        """One membership-tag access; hit location is computed, not walked."""
        vpn4k = va // 4096
        set_idx = self.set_of(pid, vpn4k)
        pa_tags = self._tags_pa(set_idx)
        out = self.memhier.access(pa_tags, KIND_PTE)
        ways = self.members.get(set_idx)
        if ways:
            for w, occupant in enumerate(ways):
                if occupant == (pid, vpn4k):
                    self.stats["hits"] += 1
                    pa = self.base + (set_idx * self.ways + w) * 4096 + va % 4096
                    return out.latency, pa, [pa_tags]
        self.stats["misses"] += 1
        return out.latency, None, [pa_tags]

    def free_way(self, pid: int, vpn4k: int) -> tuple[int, int] | None:
        set_idx = self.set_of(pid, vpn4k)
        ways = self.members.setdefault(set_idx, [None] * self.ways)
        for w, occupant in enumerate(ways):
            if occupant is None:
                return set_idx, w
        return None

    def fill(self, pid: int, vpn4k: int, set_idx: int, way: int) -> list[int]:
        if set_idx != self.set_of(pid, vpn4k):
            raise RestSegConflict(f"vpn {vpn4k:#x} does not hash to set {set_idx}")
        ways = self.members.setdefault(set_idx, [None] * self.ways)
        if not 0 <= way < self.ways or ways[way] is not None:
            raise RestSegConflict(f"way {way} of set {set_idx} is not free")
        ways[way] = (pid, vpn4k)
        self.stats["fills"] += 1
        return [self._tags_pa(set_idx)]

    def remove_region(self, pid: int, base: int, length: int) -> int:
        count = 0
        lo = base // 4096
        hi = (base + length + 4095) // 4096
        for set_idx, ways in self.members.items():
            for w, occupant in enumerate(ways):
                if occupant is not None and occupant[0] == pid and lo <= occupant[1] < hi:
                    ways[w] = None
                    count += 1
        return count


class IntermediateSpace:
    """Front translation from VA to intermediate addresses via VMA offsets."""

    def __init__(self, cfg: dict, memhier: MemoryHierarchy, mm: BuddyAllocator):
        self.memhier = memhier
        self.mm = mm
        self.vma_tlb_entries = cfg["vma_tlb"]["entries"]
        self.vma_tlb_latency = cfg["vma_tlb"]["latency"]
        self.vma_tlb: dict[tuple[int, int], tuple[int, int, int]] = {}
        self.vmas: dict[int, list[tuple[int, int, int]]] = {}  # (vbase, len, ibase)
        self.arrays: dict[int, _EntryArray] = {}
        self.bump = INTERMEDIATE_BASE
        self.stats = {"vma_tlb_hits": 0, "vma_walks": 0, "vmas": 0}

    def on_alloc(self, pid: int, base: int, length: int) -> int:
        ibase = self.bump
        self.bump += (length + PAGE_2M - 1) // PAGE_2M * PAGE_2M
        table = self.vmas.setdefault(pid, [])
        idx = 0
        while idx < len(table) and table[idx][0] < base:
            idx += 1
        table.insert(idx, (base, length, ibase))
        self.arrays.setdefault(pid, _EntryArray(self.mm, f"vma:{pid}"))
        self.stats["vmas"] += 1
        return ibase

    def on_free(self, pid: int, base: int, length: int) -> None:
        table = self.vmas.get(pid, [])
        self.vmas[pid] = [v for v in table if not (v[0] == base and v[1] == length)]
        for key in [k for k, v in self.vma_tlb.items() if k == (pid, base)]:
            del self.vma_tlb[key]

    def front_translate(self, pid: int, va: int) -> tuple[int, int, list[int]]:
        """Returns (ia, cycles, accesses)."""
        latency = self.vma_tlb_latency
        for key, (vbase, length, ibase) in self.vma_tlb.items():
            if key[0] == pid and vbase <= va < vbase + length:
                del self.vma_tlb[key]
                self.vma_tlb[key] = (vbase, length, ibase)
                self.stats["vma_tlb_hits"] += 1
                return ibase + (va - vbase), latency, []
        table = self.vmas.get(pid, [])
        if not table:
            raise NoVma(f"no vma covers 0x{va:x} for pid {pid}")
        accesses: list[int] = []
        array = self.arrays[pid]
        keys = [v[0] for v in table]
        idx, walk_cycles = _binary_search(self.memhier, array, keys, va, accesses)
        latency += walk_cycles
        vbase, length, ibase = table[idx]
        if not vbase <= va < vbase + length:
            raise NoVma(f"no vma covers 0x{va:x} for pid {pid}")
        self.stats["vma_walks"] += 1
        key = (pid, vbase)
        self.vma_tlb.pop(key, None)
        if len(self.vma_tlb) >= self.vma_tlb_entries:
            del self.vma_tlb[next(iter(self.vma_tlb))]
        self.vma_tlb[key] = (vbase, length, ibase)
        return ibase + (va - vbase), latency, accesses

    def intermediate_extent(self) -> int:
        return self.bump - INTERMEDIATE_BASE
