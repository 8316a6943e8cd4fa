"""Three-level cache + DRAM latency model.

Physically indexed, 64-byte lines, LRU per set, non-inclusive with
fill-everywhere. Every translation-induced and data access is charged here,
and each resident line carries the kind of the access that last touched it so
per-kind footprints can be reported.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import LINE, VmsimError

KIND_DATA = "data"
KIND_PTE = "pte"
KIND_TLB = "tlb_entry"
KIND_KERNEL = "kernel"

KINDS = (KIND_DATA, KIND_PTE, KIND_TLB, KIND_KERNEL)


class OutOfRange(VmsimError):
    pass


@dataclass(frozen=True)
class AccessOutcome:
    latency: int
    hit_level: str  # level name or "dram"


class _Level:
    __slots__ = ("name", "latency", "sets", "assoc", "lines", "kind_counts")

    def __init__(self, name: str, size: int, assoc: int, latency: int):
        self.name = name
        self.latency = latency
        self.assoc = assoc
        self.sets = size // (assoc * LINE)
        # One ordered dict per set: line_addr -> kind, oldest first.
        self.lines: list[dict[int, str]] = [dict() for _ in range(self.sets)]
        self.kind_counts = {k: 0 for k in KINDS}

    def set_of(self, line_addr: int) -> dict[int, str]:
        return self.lines[(line_addr // LINE) % self.sets]

    def touch(self, line_addr: int, kind: str) -> bool:
        """LRU-update the line if resident; retags it with `kind`."""
        s = self.set_of(line_addr)
        old = s.pop(line_addr, None)
        if old is None:
            return False
        self.kind_counts[old] -= 1
        self.kind_counts[kind] += 1
        s[line_addr] = kind
        return True

    def fill(self, line_addr: int, kind: str) -> None:
        s = self.set_of(line_addr)
        old = s.pop(line_addr, None)
        if old is not None:
            self.kind_counts[old] -= 1
        elif len(s) >= self.assoc:
            victim = next(iter(s))
            self.kind_counts[s.pop(victim)] -= 1
        s[line_addr] = kind
        self.kind_counts[kind] += 1

    def resident(self, line_addr: int) -> bool:
        return line_addr in self.set_of(line_addr)


class MemoryHierarchy:
    """Owns the cache levels and the DRAM latency; single simulation only."""

    def __init__(self, mem_cfg: dict, phys_bytes: int):
        self.levels = [
            _Level("l1", mem_cfg["l1"]["size"], mem_cfg["l1"]["assoc"], mem_cfg["l1"]["latency"]),
            _Level("l2", mem_cfg["l2"]["size"], mem_cfg["l2"]["assoc"], mem_cfg["l2"]["latency"]),
            _Level("llc", mem_cfg["llc"]["size"], mem_cfg["llc"]["assoc"], mem_cfg["llc"]["latency"]),
        ]
        self.dram_latency = mem_cfg["dram"]["latency"]
        self.phys_bytes = phys_bytes
        self.regions: list[tuple[int, int]] = []
        self.stats = {
            "accesses": 0,
            "hits": {lvl.name: 0 for lvl in self.levels},
            "dram_fetches": 0,
            "by_kind": {k: 0 for k in KINDS},
        }

    def add_region(self, base: int, size: int) -> None:
        """Register a synthetic address region (outside physical memory)."""
        self.regions.append((base, size))

    def _check(self, pa: int) -> None:
        if 0 <= pa < self.phys_bytes:
            return
        for base, size in self.regions:
            if base <= pa < base + size:
                return
        raise OutOfRange(f"address 0x{pa:x} outside physical memory and all regions")

    def _probe(self, line: int, kind: str) -> tuple[int | None, int]:
        """Probe levels in order; on a hit the line refills the upper levels."""
        latency = 0
        for i, lvl in enumerate(self.levels):
            latency += lvl.latency
            if lvl.touch(line, kind):
                self.stats["hits"][lvl.name] += 1
                for upper in self.levels[:i]:
                    upper.fill(line, kind)
                return i, latency
        return None, latency

    def access(self, pa: int, kind: str, write: bool = False) -> AccessOutcome:
        """Probe L1->L2->LLC; full miss adds DRAM latency and fills everywhere."""
        self._check(pa)
        line = pa - pa % LINE
        self.stats["accesses"] += 1
        self.stats["by_kind"][kind] += 1
        hit, latency = self._probe(line, kind)
        if hit is not None:
            return AccessOutcome(latency, self.levels[hit].name)
        latency += self.dram_latency
        self.stats["dram_fetches"] += 1
        for lvl in self.levels:
            lvl.fill(line, kind)
        return AccessOutcome(latency, "dram")

    def probe_cached(self, pa: int, kind: str) -> AccessOutcome | None:
        """Cache-only probe: hit behaves like access(); a full miss charges the
        cache probes but does not fetch from DRAM and does not fill."""
        self._check(pa)
        line = pa - pa % LINE
        self.stats["accesses"] += 1
        self.stats["by_kind"][kind] += 1
        hit, latency = self._probe(line, kind)
        if hit is not None:
            return AccessOutcome(latency, self.levels[hit].name)
        return None

    def cache_probe_cost(self) -> int:
        return sum(lvl.latency for lvl in self.levels)

    def access_with_resolver(self, addr: int, kind: str, resolver, write: bool = False
                             ) -> tuple[AccessOutcome, int]:
        """Access where a full miss first resolves the address (intermediate
        mode: translation happens past the LLC). Returns (outcome,
        resolver_cycles); outcome.latency includes resolver_cycles."""
        self._check(addr)
        line = addr - addr % LINE
        self.stats["accesses"] += 1
        self.stats["by_kind"][kind] += 1
        hit, latency = self._probe(line, kind)
        if hit is not None:
            return AccessOutcome(latency, self.levels[hit].name), 0
        resolver_cycles = resolver(addr)
        latency += resolver_cycles + self.dram_latency
        self.stats["dram_fetches"] += 1
        for lvl in self.levels:
            lvl.fill(line, kind)
        return AccessOutcome(latency, "dram"), resolver_cycles

    def footprint(self, kind: str) -> dict[str, int]:
        """Resident lines of one kind at each level, right now."""
        return {lvl.name: lvl.kind_counts[kind] for lvl in self.levels}

    def total_resident(self) -> dict[str, int]:
        return {lvl.name: sum(lvl.kind_counts.values()) for lvl in self.levels}

    def reset(self) -> None:
        for lvl in self.levels:
            lvl.lines = [dict() for _ in range(lvl.sets)]
            lvl.kind_counts = {k: 0 for k in KINDS}
