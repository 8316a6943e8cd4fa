"""Physical-memory emulator: buddy allocator, fragmentation, THP reservations.

All translation structures, handler allocations, and reserved regions draw
from this single allocator, so page tables and software TLBs fragment memory
alongside data pages. Free lists are kept as per-order sets plus lazy
min-heaps so allocation is lowest-address-first and deterministic.
"""

from __future__ import annotations

import heapq
import json
import zlib
from dataclasses import dataclass, field

from .core import Rng, VmsimError

HUGE_ORDER = 9  # 2 MiB blocks


class OutOfMemory(VmsimError):
    pass


class DoubleFree(VmsimError):
    pass


class UnknownBlock(VmsimError):
    pass


class TargetUnreachable(VmsimError):
    pass


class ChecksumMismatch(VmsimError):
    pass


class SchemaVersionMismatch(VmsimError):
    pass


class CarveError(VmsimError):
    pass


@dataclass
class Reservation:
    pid: int
    region: int  # va >> 21
    block: int   # first pfn of the order-9 block
    touched: int = 0  # 512-bit bitmap

    def touched_count(self) -> int:
        return bin(self.touched).count("1")


@dataclass
class FragmentationReport:
    fmfi: float
    free_per_order: list[int] = field(default_factory=list)


class BuddyAllocator:
    def __init__(self, total_frames: int, max_order: int = 10):
        if total_frames < 1:
            raise ValueError("empty pool")
        self.total_frames = total_frames
        self.max_order = max_order
        self.free_sets: list[set[int]] = [set() for _ in range(max_order + 1)]
        self.heaps: list[list[int]] = [[] for _ in range(max_order + 1)]
        self.allocated: dict[int, tuple[int, str]] = {}
        self.pinned: set[int] = set()
        self.reservations: dict[tuple[int, int], Reservation] = {}
        self.break_events: list[dict] = []
        self.free_frames = 0
        self.free_frames_huge = 0  # frames inside free blocks of order >= HUGE_ORDER
        self._seed_free(0, total_frames)

    def _seed_free(self, start: int, count: int) -> None:
        pfn = start
        remaining = count
        while remaining:
            order = min(self.max_order, remaining.bit_length() - 1)
            while (pfn % (1 << order)) or (1 << order) > remaining:
                order -= 1
            self._add_free(pfn, order)
            pfn += 1 << order
            remaining -= 1 << order

    # -- free-list primitives -------------------------------------------------

    def _add_free(self, pfn: int, order: int) -> None:
        self.free_sets[order].add(pfn)
        heapq.heappush(self.heaps[order], pfn)
        self.free_frames += 1 << order
        if order >= HUGE_ORDER:
            self.free_frames_huge += 1 << order

    def _remove_free(self, pfn: int, order: int) -> None:
        self.free_sets[order].remove(pfn)  # heap entry goes stale
        self.free_frames -= 1 << order
        if order >= HUGE_ORDER:
            self.free_frames_huge -= 1 << order

    def _pop_lowest(self, order: int) -> int:
        heap, live = self.heaps[order], self.free_sets[order]
        while heap:
            pfn = heapq.heappop(heap)
            if pfn in live:
                live.remove(pfn)
                self.free_frames -= 1 << order
                if order >= HUGE_ORDER:
                    self.free_frames_huge -= 1 << order
                return pfn
        raise KeyError(f"no free block of order {order}")

    def _coalesce_in(self, pfn: int, order: int) -> None:
        while order < self.max_order:
            buddy = pfn ^ (1 << order)
            if buddy + (1 << order) <= self.total_frames and buddy in self.free_sets[order]:
                self._remove_free(buddy, order)
                pfn = min(pfn, buddy)
                order += 1
            else:
                break
        self._add_free(pfn, order)

    def _containing_free_block(self, frame: int) -> tuple[int, int] | None:
        for order in range(self.max_order + 1):
            start = frame & ~((1 << order) - 1)
            if start in self.free_sets[order]:
                return start, order
        return None

    # -- public allocation API ------------------------------------------------

    def alloc_block(self, order: int, owner: str = "anon") -> int:
        """Lowest-address free block of the smallest sufficient order.

        Under exhaustion, the least-touched THP reservation is broken and the
        allocation retried; breaks are appended to `break_events`.
        """
        if not 0 <= order <= self.max_order:
            raise ValueError(f"order {order} out of range")
        while True:
            for have in range(order, self.max_order + 1):
                if self.free_sets[have]:
                    pfn = self._pop_lowest(have)
                    while have > order:
                        have -= 1
                        self._add_free(pfn + (1 << have), have)
                    self.allocated[pfn] = (order, owner)
                    return pfn
            if not self._break_one_reservation():
                raise OutOfMemory(f"no free block of order >= {order}")

    def free_block(self, pfn: int, order: int) -> None:
        entry = self.allocated.get(pfn)
        if entry is not None and entry[0] == order:
            del self.allocated[pfn]
            self._coalesce_in(pfn, order)
            return
        for key, res in list(self.reservations.items()):
            if res.block == pfn and order == HUGE_ORDER:
                del self.reservations[key]
                self._coalesce_in(pfn, order)
                return
        if self._containing_free_block(pfn) is not None and entry is None:
            raise DoubleFree(f"block at pfn {pfn} is already free")
        raise UnknownBlock(f"no allocation of order {order} at pfn {pfn}")

    def alloc_contig(self, frames: int, owner: str = "anon") -> list[tuple[int, int]]:
        """Greedy largest-first cover of `frames`; blocks need not be adjacent.

        Rolls back and raises OutOfMemory if the full count cannot be covered.
        """
        if frames < 1:
            raise ValueError("frames must be positive")
        got: list[tuple[int, int]] = []
        remaining = frames
        try:
            while remaining:
                order = min(self.max_order, remaining.bit_length() - 1)
                while order >= 0:
                    try:
                        pfn = self.alloc_block(order, owner)
                        break
                    except OutOfMemory:
                        order -= 1
                if order < 0:
                    raise OutOfMemory(f"contiguous cover of {frames} frames failed")
                got.append((pfn, order))
                remaining -= 1 << order
        except OutOfMemory:
            for pfn, order in reversed(got):
                self.free_block(pfn, order)
            raise
        return got

    def carve_range(self, pfn: int, frames: int, owner: str) -> None:
        """Claim a specific frame range (must be entirely free); used to place
        configured structures (software TLB table, restrictive segment)."""
        end = pfn + frames
        if end > self.total_frames:
            raise CarveError(f"range [{pfn}, {end}) beyond pool")
        cursor = pfn
        while cursor < end:
            found = self._containing_free_block(cursor)
            if found is None:
                raise CarveError(f"frame {cursor} is not free")
            start, order = found
            self._remove_free(start, order)
            # Split recursively: pieces outside [pfn, end) return to the free
            # lists, pieces inside are registered as allocations.
            stack = [(start, order)]
            while stack:
                s, o = stack.pop()
                size = 1 << o
                if s >= end or s + size <= pfn:
                    self._coalesce_in(s, o)
                elif s >= pfn and s + size <= end:
                    self.allocated[s] = (o, owner)
                else:
                    half = 1 << (o - 1)
                    stack.append((s + half, o - 1))
                    stack.append((s, o - 1))
            cursor = start + (1 << order)

    # -- THP reservations ------------------------------------------------------

    def add_reservation(self, pid: int, region: int, block_pfn: int) -> Reservation:
        """Convert an allocated order-9 block into a reservation."""
        entry = self.allocated.get(block_pfn)
        if entry is None or entry[0] != HUGE_ORDER:
            raise UnknownBlock(f"no order-{HUGE_ORDER} allocation at pfn {block_pfn}")
        key = (pid, region)
        if key in self.reservations:
            raise VmsimError(f"region {region:#x} of pid {pid} already reserved")
        del self.allocated[block_pfn]
        res = Reservation(pid, region, block_pfn)
        self.reservations[key] = res
        return res

    def touch_reservation(self, pid: int, region: int, index: int) -> None:
        res = self.reservations.get((pid, region))
        if res is not None:
            res.touched |= 1 << index

    def find_reservation(self, pfn: int) -> Reservation | None:
        block = pfn & ~((1 << HUGE_ORDER) - 1)
        for res in self.reservations.values():
            if res.block == block:
                return res
        return None

    def complete_reservation(self, pid: int, region: int) -> None:
        """Promotion happened: the block becomes a plain allocation."""
        res = self.reservations.pop((pid, region), None)
        if res is None:
            raise UnknownBlock(f"no reservation for pid {pid} region {region:#x}")
        self.allocated[res.block] = (HUGE_ORDER, f"thp:{pid}")

    def _break_one_reservation(self) -> bool:
        if not self.reservations:
            return False
        key = min(
            self.reservations,
            key=lambda k: (self.reservations[k].touched_count(), self.reservations[k].block),
        )
        res = self.reservations.pop(key)
        kept = []
        for i in range(1 << HUGE_ORDER):
            pfn = res.block + i
            if res.touched >> i & 1:
                self.allocated[pfn] = (0, f"thp:{res.pid}")
                kept.append(pfn)
            else:
                self._coalesce_in(pfn, 0)
        self.break_events.append(
            {"pid": res.pid, "region": res.region, "block": res.block, "kept": kept}
        )
        return True

    def drain_break_events(self) -> list[dict]:
        events, self.break_events = self.break_events, []
        return events

    # -- fragmentation ----------------------------------------------------------

    def fmfi(self) -> float:
        """Fraction of free frames not sitting in huge-page-capable blocks."""
        if self.free_frames == 0:
            return 0.0
        return 1.0 - self.free_frames_huge / self.free_frames

    def fragmentation_report(self) -> FragmentationReport:
        return FragmentationReport(
            fmfi=self.fmfi(),
            free_per_order=[len(s) for s in self.free_sets],
        )

    def _free_held_run(self, held: list[int], held_set: set[int], rng: Rng) -> bool:
        """Free one held, order-9-aligned run of 512 frames (coalesces huge)."""
        regions = self.total_frames >> HUGE_ORDER
        if regions == 0:
            return False
        start = rng.below(regions)
        for i in range(regions):
            base = ((start + i) % regions) << HUGE_ORDER
            if all(f in held_set for f in range(base, base + (1 << HUGE_ORDER))):
                for f in range(base, base + (1 << HUGE_ORDER)):
                    self.free_block(f, 0)
                    held_set.remove(f)
                return True
        return False

    def fragment_to(self, target: float, seed: int, cap: int = 10_000_000) -> float:
        """Drive fmfi to within 0.02 of target, deterministically from seed.

        The pool is drained into held order-0 frames; the generator then
        frees rng-chosen aligned runs (growing huge-capable free space) and
        rng-chosen single frames (growing fragmented free space) until the
        metric lands inside the tolerance window. Frames still held at the
        end stay allocated (pinned) for the rest of the run.
        """
        if not 0.0 <= target <= 1.0:
            raise ValueError("target outside [0, 1]")
        rng = Rng(seed)
        achieved = self.fmfi()
        if abs(achieved - target) <= 0.02:
            return achieved
        held: list[int] = []
        held_set: set[int] = set()
        iterations = 0
        while self.free_frames and iterations < cap:
            pfn = self.alloc_block(0, owner="frag")
            held.append(pfn)
            held_set.add(pfn)
            iterations += 1
        achieved = self.fmfi()
        while iterations < cap:
            if abs(achieved - target) <= 0.02:
                break
            iterations += 1
            if achieved > target:
                # Too fragmented: open up one huge-capable run, or failing
                # that take fragmented frames back.
                if not self._free_held_run(held, held_set, rng):
                    if self.free_frames == 0:
                        break
                    pfn = self.alloc_block(0, owner="frag")
                    held.append(pfn)
                    held_set.add(pfn)
            else:
                # Not fragmented enough: scatter one held frame back.
                while held and held[-1] not in held_set:
                    held.pop()
                if not held:
                    break
                idx = rng.below(len(held))
                pfn = held[idx]
                held[idx], held[-1] = held[-1], held[idx]
                held.pop()
                if pfn not in held_set:
                    continue  # stale entry from a freed run
                held_set.remove(pfn)
                self.free_block(pfn, 0)
            achieved = self.fmfi()
        if abs(achieved - target) > 0.02:
            raise TargetUnreachable(
                f"fmfi {achieved:.4f} not within 0.02 of {target} after {iterations} iterations"
            )
        for pfn in held_set:
            del self.allocated[pfn]
            self.pinned.add(pfn)
        return achieved

    # -- snapshots ---------------------------------------------------------------

    def snapshot_save(self) -> bytes:
        if self.reservations:
            raise VmsimError("cannot snapshot while THP reservations are active")
        body = {
            "version": 1,
            "total_frames": self.total_frames,
            "free": [
                {"order": order, "pfn": pfn}
                for order in range(self.max_order + 1)
                for pfn in sorted(self.free_sets[order])
            ],
            "pinned": sorted(self.pinned),
            "allocated": [
                {"pfn": pfn, "order": self.allocated[pfn][0], "owner": self.allocated[pfn][1]}
                for pfn in sorted(self.allocated)
            ],
        }
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        body["crc32"] = zlib.crc32(canon.encode("utf-8"))
        return (json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")

    @classmethod
    def snapshot_load(cls, data: bytes, max_order: int = 10) -> "BuddyAllocator":
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ChecksumMismatch(f"snapshot unreadable: {exc}") from exc
        if not isinstance(doc, dict) or "crc32" not in doc:
            raise ChecksumMismatch("snapshot missing checksum")
        crc = doc.pop("crc32")
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        if zlib.crc32(canon.encode("utf-8")) != crc:
            raise ChecksumMismatch("snapshot checksum mismatch")
        if doc.get("version") != 1:
            raise SchemaVersionMismatch(f"snapshot version {doc.get('version')!r}")
        alloc = cls.__new__(cls)
        alloc.total_frames = doc["total_frames"]
        alloc.max_order = max_order
        alloc.free_sets = [set() for _ in range(max_order + 1)]
        alloc.heaps = [[] for _ in range(max_order + 1)]
        alloc.allocated = {}
        alloc.pinned = set(doc["pinned"])
        alloc.reservations = {}
        alloc.break_events = []
        alloc.free_frames = 0
        alloc.free_frames_huge = 0
        for item in doc["free"]:
            alloc._add_free(item["pfn"], item["order"])
        for item in doc["allocated"]:
            alloc.allocated[item["pfn"]] = (item["order"], item["owner"])
        return alloc

    # -- integrity ----------------------------------------------------------------

    def counts(self) -> dict[str, int]:
        allocated = sum(1 << order for order, _ in self.allocated.values())
        reserved = len(self.reservations) << HUGE_ORDER
        return {
            "free": self.free_frames,
            "allocated": allocated,
            "pinned": len(self.pinned),
            "reserved": reserved,
            "total": self.total_frames,
        }

    def audit(self) -> None:
        """Full structural check; raises on any inconsistency."""
        seen = [False] * self.total_frames

        def claim(start, count, what):
            for f in range(start, start + count):
                if f >= self.total_frames or seen[f]:
                    raise VmsimError(f"audit: frame {f} double-booked ({what})")
                seen[f] = True

        for order, live in enumerate(self.free_sets):
            for pfn in live:
                if pfn % (1 << order):
                    raise VmsimError(f"audit: free block {pfn} misaligned for order {order}")
                buddy = pfn ^ (1 << order)
                if order < self.max_order and buddy in self.free_sets[order]:
                    raise VmsimError(f"audit: buddies {pfn}/{buddy} both free at order {order}")
                claim(pfn, 1 << order, "free")
        for pfn, (order, _) in self.allocated.items():
            claim(pfn, 1 << order, "allocated")
        for res in self.reservations.values():
            claim(res.block, 1 << HUGE_ORDER, "reserved")
        for pfn in self.pinned:
            claim(pfn, 1, "pinned")
        if not all(seen):
            missing = seen.index(False)
            raise VmsimError(f"audit: frame {missing} unaccounted for")
