"""Pluggable page-table designs behind one walk/map/promote contract.

Four kinds: a 4-level radix tree with page-walk caches, a clustered hash
table with linear probing, an elastic cuckoo hash table with gradual
resizing, and a compact single-probe hash table with a small overflow stash.
A nested wrapper composes any two kinds into a guest/host MMU with a nested
TLB.

Table storage comes from the memory manager; walk probes go through the
memory hierarchy. `map`/`unmap`/`promote` mutate structures silently and
return the physical lines they wrote so the caller can charge them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import PAGE_SIZES, SIZE_NAMES, Pte, VmsimError, mix64, split_radix_indices
from .memhier import KIND_PTE, MemoryHierarchy
from .memmgr import BuddyAllocator

PAGE_4K = PAGE_SIZES["4K"]
PAGE_2M = PAGE_SIZES["2M"]
PAGE_1G = PAGE_SIZES["1G"]

CLUSTER = 8  # PTEs per 64-byte line
STASH_CLUSTERS = 16


class WalkError(VmsimError):
    """Structural inconsistency (conflicting mapping, corrupt geometry)."""


class MisalignedPromotion(VmsimError):
    pass


@dataclass(frozen=True)
class NotPresent:
    vpn: int        # 4 KiB page number of the faulting address
    size_hint: str = "4K"


@dataclass
class WalkResult:
    pte: Pte | None
    accesses: list[int] = field(default_factory=list)  # PAs probed, kind=pte
    latency: int = 0
    fault: NotPresent | None = None


class SetAssocCache:
    """Small LRU set-associative cache keyed by integers (PWCs, nested TLB)."""

    def __init__(self, entries: int, assoc: int, latency: int):
        self.latency = latency
        self.assoc = assoc
        self.sets = max(1, entries // assoc)
        self.data: list[dict[int, int]] = [dict() for _ in range(self.sets)]

    def _set(self, key: int) -> dict[int, int]:
        return self.data[mix64(key) % self.sets]

    def get(self, key: int) -> int | None:
        s = self._set(key)
        value = s.pop(key, None)
        if value is None:
            return None
        s[key] = value
        return value

    def put(self, key: int, value: int) -> None:
        s = self._set(key)
        s.pop(key, None)
        if len(s) >= self.assoc:
            del s[next(iter(s))]
        s[key] = value

    def drop(self, key: int) -> None:
        self._set(key).pop(key, None)


class BasePageTable:
    kind = "?"

    def __init__(self, memhier: MemoryHierarchy, mm: BuddyAllocator):
        self.memhier = memhier
        self.mm = mm
        # Nested composition points this at the host translation step.
        self.access_hook = None

    def _probe(self, pa: int, accesses: list[int]) -> int:
        latency = 0
        if self.access_hook is not None:
            pa, hook_latency = self.access_hook(pa, accesses)
            latency += hook_latency
        out = self.memhier.access(pa, KIND_PTE)
        accesses.append(pa)
        return latency + out.latency

    # Subclasses: ensure / walk / map / unmap / promote / footprint / read4k


# ---------------------------------------------------------------------------
# Radix

_LEAF_LEVEL = {PAGE_1G: 1, PAGE_2M: 2, PAGE_4K: 3}
_LEVEL_SIZE = {1: PAGE_1G, 2: PAGE_2M, 3: PAGE_4K}


class RadixTable(BasePageTable):
    kind = "radix"

    def __init__(self, memhier, mm, pwc_cfg: dict | None = None):
        super().__init__(memhier, mm)
        self.roots: dict[int, int] = {}
        self.tables: dict[int, dict[int, object]] = {}  # frame -> {index: entry}
        self.frames: dict[int, list[int]] = {}           # pid -> owned frames
        self.pwc_enabled = bool(pwc_cfg and pwc_cfg.get("enabled", False))
        if self.pwc_enabled:
            # Deepest prefix first: pwc[0] keys (i4,i3,i2), then (i4,i3), then (i4,).
            self.pwcs = [
                SetAssocCache(pwc_cfg["l2"]["entries"], pwc_cfg["l2"]["assoc"], pwc_cfg["l2"]["latency"]),
                SetAssocCache(pwc_cfg["l3"]["entries"], pwc_cfg["l3"]["assoc"], pwc_cfg["l3"]["latency"]),
                SetAssocCache(pwc_cfg["l4"]["entries"], pwc_cfg["l4"]["assoc"], pwc_cfg["l4"]["latency"]),
            ]

    def _new_table(self, pid: int) -> int:
        frame = self.mm.alloc_block(0, owner=f"pt:{pid}")
        self.tables[frame] = {}
        self.frames[pid].append(frame)
        return frame

    def ensure(self, pid: int) -> None:
        if pid not in self.roots:
            self.frames.setdefault(pid, [])
            self.roots[pid] = self._new_table(pid)

    @staticmethod
    def _pwc_key(pid: int, idx: tuple[int, ...]) -> int:
        packed = 0
        for part in idx:
            packed = (packed << 9) | part
        return (pid << 27) | packed

    def walk(self, pid: int, va: int, order=None) -> WalkResult:
        self.ensure(pid)
        i4, i3, i2, i1, _ = split_radix_indices(va)
        indices = (i4, i3, i2, i1)
        result = WalkResult(pte=None)
        start = 0
        frame = self.roots[pid]
        if self.pwc_enabled:
            prefixes = ((i4, i3, i2), (i4, i3), (i4,))
            for depth, (cache, prefix) in enumerate(zip(self.pwcs, prefixes)):
                result.latency += cache.latency
                hit = cache.get(self._pwc_key(pid, prefix))
                if hit is not None:
                    start = 3 - depth
                    frame = hit
                    break
        walked: list[tuple[int, int]] = []  # (level, child frame) for PWC refill
        for level in range(start, 4):
            pa = frame * 4096 + indices[level] * 8
            result.latency += self._probe(pa, result.accesses)
            entry = self.tables[frame].get(indices[level])
            if entry is None:
                result.fault = NotPresent(va // PAGE_4K)
                return result
            tag, payload = entry
            if tag == "leaf":
                pte: Pte = payload
                if not pte.present or _LEAF_LEVEL[pte.size] != level:
                    result.fault = NotPresent(va // PAGE_4K)
                    return result
                self._refill_pwcs(pid, indices, walked)
                result.pte = pte
                return result
            frame = payload
            walked.append((level, frame))
        result.fault = NotPresent(va // PAGE_4K)
        return result

    def _refill_pwcs(self, pid: int, indices, walked) -> None:
        if not self.pwc_enabled:
            return
        for level, child in walked:
            # Entry read at `level` yields the table for level+1.
            depth = 3 - (level + 1)  # 0 -> pwc over (i4,i3,i2), etc.
            if 0 <= depth <= 2:
                prefix = indices[: 3 - depth]
                self.pwcs[depth].put(self._pwc_key(pid, tuple(prefix)), child)

    def _descend(self, pid: int, indices, leaf_level: int, writes: list[int]) -> int:
        frame = self.roots[pid]
        for level in range(leaf_level):
            entry = self.tables[frame].get(indices[level])
            if entry is None:
                child = self._new_table(pid)
                self.tables[frame][indices[level]] = ("table", child)
                writes.append(frame * 4096 + indices[level] * 8)
                frame = child
            elif entry[0] == "table":
                frame = entry[1]
            else:
                raise WalkError(f"mapping conflict at level {level}")
        return frame

    def map(self, pid: int, vpn: int, pte: Pte) -> list[int]:
        self.ensure(pid)
        leaf_level = _LEAF_LEVEL[pte.size]
        va = vpn * pte.size
        i4, i3, i2, i1, _ = split_radix_indices(va)
        indices = (i4, i3, i2, i1)
        writes: list[int] = []
        frame = self._descend(pid, indices, leaf_level, writes)
        slot = indices[leaf_level]
        existing = self.tables[frame].get(slot)
        if existing is not None and existing[0] == "table":
            raise WalkError("mapping conflict: interior table in the way")
        self.tables[frame][slot] = ("leaf", pte)
        writes.append(frame * 4096 + slot * 8)
        return writes

    def unmap(self, pid: int, vpn: int, size: int) -> list[int]:
        self.ensure(pid)
        leaf_level = _LEAF_LEVEL[size]
        va = vpn * size
        i4, i3, i2, i1, _ = split_radix_indices(va)
        indices = (i4, i3, i2, i1)
        frame = self.roots[pid]
        for level in range(leaf_level):
            entry = self.tables[frame].get(indices[level])
            if entry is None or entry[0] != "table":
                raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")
            frame = entry[1]
        slot = indices[leaf_level]
        entry = self.tables[frame].get(slot)
        if entry is None or entry[0] != "leaf":
            raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")
        del self.tables[frame][slot]
        return [frame * 4096 + slot * 8]

    def promote(self, pid: int, va_2m: int, pfn_block: int) -> list[int]:
        if va_2m % PAGE_2M or pfn_block % 512:
            raise MisalignedPromotion("promotion target misaligned")
        self.ensure(pid)
        vpn4k_base = va_2m // PAGE_4K
        i4, i3, i2, i1, _ = split_radix_indices(va_2m)
        indices = (i4, i3, i2, i1)
        writes: list[int] = []
        l2_frame = self._descend(pid, indices, 2, writes)
        entry = self.tables[l2_frame].get(i2)
        l1_frame = None
        if entry is not None:
            if entry[0] == "leaf":
                raise WalkError("promotion over an existing large mapping")
            l1_frame = entry[1]
            table = self.tables[l1_frame]
            for i in range(512):
                sub = table.get((vpn4k_base + i) & 0x1FF)
                if sub is None:
                    continue
                if sub[0] != "leaf" or sub[1].pfn != pfn_block + i:
                    raise MisalignedPromotion(
                        f"page {i} of region 0x{va_2m:x} maps outside the block"
                    )
        self.tables[l2_frame][i2] = ("leaf", Pte(pfn=pfn_block, size=PAGE_2M))
        writes.append(l2_frame * 4096 + i2 * 8)
        if l1_frame is not None:
            del self.tables[l1_frame]
            self.frames[pid].remove(l1_frame)
            self.mm.free_block(l1_frame, 0)
            if self.pwc_enabled:
                # The deepest walk cache held a pointer to the freed table.
                self.pwcs[0].drop(self._pwc_key(pid, (i4, i3, i2)))
        return writes

    def footprint(self, pid: int) -> int:
        return 4096 * len(self.frames.get(pid, []))

    def read4k(self, pid: int, vpn4k: int) -> tuple[Pte, int] | None:
        root = self.roots.get(pid)
        if root is None:
            return None
        va = vpn4k * PAGE_4K
        i4, i3, i2, i1, _ = split_radix_indices(va)
        indices = (i4, i3, i2, i1)
        frame = root
        for level in range(4):
            entry = self.tables[frame].get(indices[level])
            if entry is None:
                return None
            tag, payload = entry
            if tag == "leaf":
                pte: Pte = payload
                if not pte.present or _LEAF_LEVEL[pte.size] != level:
                    return None
                offset_pages = vpn4k - (va // pte.size) * (pte.size // PAGE_4K)
                return pte, pte.pfn + offset_pages
            frame = payload
        return None


# ---------------------------------------------------------------------------
# Hashed kinds: shared cluster plumbing

class _Cluster:
    __slots__ = ("tag", "ptes")

    def __init__(self, tag: int):
        self.tag = tag
        self.ptes: list[Pte | None] = [None] * CLUSTER

    def live(self) -> int:
        return sum(1 for p in self.ptes if p is not None)


_TOMBSTONE = "tombstone"


class _HashArray:
    """An array of cluster lines backed by buddy blocks (greedy cover)."""

    def __init__(self, mm: BuddyAllocator, buckets: int, salt: int, owner: str):
        self.mm = mm
        self.buckets = buckets
        self.salt = salt
        self.owner = owner
        frames_needed = max(1, buckets * 64 // 4096)
        self.blocks = mm.alloc_contig(frames_needed, owner=owner)
        self.frames: list[int] = []
        for pfn, order in self.blocks:
            self.frames.extend(range(pfn, pfn + (1 << order)))
        self.slots: list = [None] * buckets

    def line_pa(self, slot: int) -> int:
        byte = slot * 64
        return self.frames[byte // 4096] * 4096 + byte % 4096

    def home(self, tag: int) -> int:
        return mix64(tag ^ self.salt) % self.buckets

    def release(self) -> None:
        for pfn, order in self.blocks:
            self.mm.free_block(pfn, order)

    def bytes(self) -> int:
        return len(self.frames) * 4096


class ClusteredHashTable(BasePageTable):
    """Open addressing with linear probing; one cluster of 8 PTEs per line."""

    kind = "clustered"

    def __init__(self, memhier, mm, buckets: int, load_threshold: float = 0.75):
        super().__init__(memhier, mm)
        self.buckets_4k = buckets
        self.buckets_2m = max(64, buckets >> 3)
        self.load_threshold = load_threshold
        self.tables: dict[tuple[int, int], dict] = {}  # (pid, size) -> state

    def _state(self, pid: int, size: int, create: bool = False) -> dict | None:
        key = (pid, size)
        state = self.tables.get(key)
        if state is None and create:
            buckets = self.buckets_4k if size == PAGE_4K else self.buckets_2m
            state = {"array": _HashArray(self.mm, buckets, 0, f"pt:{pid}"), "count": 0}
            self.tables[key] = state
        return state

    def ensure(self, pid: int) -> None:
        self._state(pid, PAGE_4K, create=True)

    def _chain(self, array: _HashArray, tag: int):
        h = array.home(tag)
        for i in range(array.buckets):
            yield (h + i) % array.buckets

    def _lookup_size(self, state: dict, vpn: int, result: WalkResult) -> Pte | None | str:
        """Returns a Pte on hit, None on authoritative miss, "cont" if the
        whole chain was exhausted."""
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        for slot in self._chain(array, tag):
            result.latency += self._probe(array.line_pa(slot), result.accesses)
            cluster = array.slots[slot]
            if cluster is None:
                return None
            if cluster is _TOMBSTONE:
                continue
            if cluster.tag == tag:
                return cluster.ptes[vpn % CLUSTER]
        return "cont"

    def walk(self, pid: int, va: int, order=None) -> WalkResult:
        self.ensure(pid)
        result = WalkResult(pte=None)
        for name in (order or ("4K", "2M")):
            size = PAGE_SIZES.get(name)
            if size not in (PAGE_4K, PAGE_2M):
                continue
            state = self.tables.get((pid, size))
            if state is None or state["count"] == 0:
                continue
            found = self._lookup_size(state, va // size, result)
            if isinstance(found, Pte) and found.present:
                result.pte = found
                return result
        result.fault = NotPresent(va // PAGE_4K)
        return result

    def _find_or_place(self, state: dict, tag: int, writes: list[int]) -> _Cluster:
        array: _HashArray = state["array"]
        first_hole = None
        for slot in self._chain(array, tag):
            cluster = array.slots[slot]
            if cluster is _TOMBSTONE:
                if first_hole is None:
                    first_hole = slot
                continue
            if cluster is None:
                if first_hole is None:
                    first_hole = slot
                break
            if cluster.tag == tag:
                return cluster
        if first_hole is None:
            raise WalkError("clustered table full")
        cluster = _Cluster(tag)
        array.slots[first_hole] = cluster
        state["count"] += 1
        if state["count"] / array.buckets > self.load_threshold:
            writes.extend(self._resize(state))
        return cluster

    def _resize(self, state: dict) -> list[int]:
        old: _HashArray = state["array"]
        new = _HashArray(self.mm, old.buckets * 2, old.salt, old.owner)
        writes = []
        for cluster in old.slots:
            if cluster is None or cluster is _TOMBSTONE:
                continue
            for slot in self._chain(new, cluster.tag):
                if new.slots[slot] is None:
                    new.slots[slot] = cluster
                    writes.append(new.line_pa(slot))
                    break
        state["array"] = new
        old.release()
        return writes

    def map(self, pid: int, vpn: int, pte: Pte) -> list[int]:
        self.ensure(pid)
        state = self._state(pid, pte.size, create=True)
        writes: list[int] = []
        cluster = self._find_or_place(state, vpn // CLUSTER, writes)
        cluster.ptes[vpn % CLUSTER] = pte
        # Locate the cluster's current slot for the line write.
        array: _HashArray = state["array"]
        for slot in self._chain(array, vpn // CLUSTER):
            if array.slots[slot] is cluster:
                writes.append(array.line_pa(slot))
                break
        return writes

    def _remove(self, state: dict, vpn: int) -> list[int]:
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        for slot in self._chain(array, tag):
            cluster = array.slots[slot]
            if cluster is None:
                break
            if cluster is _TOMBSTONE or cluster.tag != tag:
                continue
            if cluster.ptes[vpn % CLUSTER] is None:
                break
            cluster.ptes[vpn % CLUSTER] = None
            if cluster.live() == 0:
                array.slots[slot] = _TOMBSTONE
                state["count"] -= 1
            return [array.line_pa(slot)]
        raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")

    def unmap(self, pid: int, vpn: int, size: int) -> list[int]:
        state = self.tables.get((pid, size))
        if state is None:
            raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")
        return self._remove(state, vpn)

    def promote(self, pid: int, va_2m: int, pfn_block: int) -> list[int]:
        return _hash_promote(self, pid, va_2m, pfn_block)

    def footprint(self, pid: int) -> int:
        return sum(
            state["array"].bytes()
            for (p, _), state in self.tables.items()
            if p == pid
        )

    def read4k(self, pid: int, vpn4k: int) -> tuple[Pte, int] | None:
        return _hash_read4k(self, pid, vpn4k)

    def _peek(self, pid: int, vpn: int, size: int) -> Pte | None:
        state = self.tables.get((pid, size))
        if state is None or state["count"] == 0:
            return None
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        for slot in self._chain(array, tag):
            cluster = array.slots[slot]
            if cluster is None:
                return None
            if cluster is _TOMBSTONE or cluster.tag != tag:
                continue
            return cluster.ptes[vpn % CLUSTER]
        return None

    def _drop_cluster(self, pid: int, tag: int, size: int) -> int | None:
        state = self.tables.get((pid, size))
        if state is None or state["count"] == 0:
            return None
        array: _HashArray = state["array"]
        for slot in self._chain(array, tag):
            cluster = array.slots[slot]
            if cluster is None:
                return None
            if cluster is _TOMBSTONE or cluster.tag != tag:
                continue
            array.slots[slot] = _TOMBSTONE
            state["count"] -= 1
            return array.line_pa(slot)
        return None


def _hash_read4k(table, pid: int, vpn4k: int) -> tuple[Pte, int] | None:
    pte = table._peek(pid, vpn4k // 512, PAGE_2M)
    if pte is not None and pte.present:
        return pte, pte.pfn + vpn4k % 512
    pte = table._peek(pid, vpn4k, PAGE_4K)
    if pte is not None and pte.present:
        return pte, pte.pfn
    return None


def _hash_promote(table, pid: int, va_2m: int, pfn_block: int) -> list[int]:
    if va_2m % PAGE_2M or pfn_block % 512:
        raise MisalignedPromotion("promotion target misaligned")
    table.ensure(pid)
    vpn4k_base = va_2m // PAGE_4K
    for i in range(512):
        pte = table._peek(pid, vpn4k_base + i, PAGE_4K)
        if pte is not None and pte.present and pte.pfn != pfn_block + i:
            raise MisalignedPromotion(
                f"page {i} of region 0x{va_2m:x} maps outside the block"
            )
    writes: list[int] = []
    base_tag = vpn4k_base // CLUSTER
    for tag in range(base_tag, base_tag + 512 // CLUSTER):
        line = table._drop_cluster(pid, tag, PAGE_4K)
        if line is not None:
            writes.append(line)
    writes.extend(table.map(pid, va_2m // PAGE_2M, Pte(pfn=pfn_block, size=PAGE_2M)))
    return writes


# ---------------------------------------------------------------------------
# Elastic cuckoo

class _CuckooWay:
    def __init__(self, mm, buckets: int, salt: int, owner: str):
        self.array = _HashArray(mm, buckets, salt, owner)

    @property
    def buckets(self):
        return self.array.buckets


class ElasticCuckooTable(BasePageTable):
    kind = "cuckoo"

    MIGRATE_PER_INSERT = 8

    def __init__(self, memhier, mm, buckets: int, ways: int = 2,
                 threshold: float = 0.6, kick_limit: int = 32,
                 parallel: bool = False, seed: int = 0):
        super().__init__(memhier, mm)
        self.init_buckets_4k = buckets
        self.init_buckets_2m = max(64, buckets >> 3)
        self.ways = ways
        self.threshold = threshold
        self.kick_limit = kick_limit
        self.parallel = parallel
        self.seed = seed
        self.tables: dict[tuple[int, int], dict] = {}

    def _salt(self, way: int, generation: int) -> int:
        return mix64(self.seed ^ (generation << 8) ^ way)

    def _state(self, pid: int, size: int, create: bool = False) -> dict | None:
        key = (pid, size)
        state = self.tables.get(key)
        if state is None and create:
            buckets = self.init_buckets_4k if size == PAGE_4K else self.init_buckets_2m
            state = {
                "ways": [
                    _HashArray(self.mm, buckets, self._salt(w, 0), f"pt:{pid}")
                    for w in range(self.ways)
                ],
                "old": None,        # list of _HashArray during migration
                "ptr": (0, 0),      # (way, slot) migration cursor
                "generation": 0,
                "count": 0,
            }
            self.tables[key] = state
        return state

    def ensure(self, pid: int) -> None:
        self._state(pid, PAGE_4K, create=True)

    # -- migration ------------------------------------------------------------

    def _resizing(self, state) -> bool:
        return state["old"] is not None

    def _start_resize(self, state: dict, writes: list[int]) -> None:
        if self._resizing(state):
            self._finish_migration(state, writes)
        state["old"] = state["ways"]
        state["generation"] += 1
        gen = state["generation"]
        owner = state["old"][0].owner
        state["ways"] = [
            _HashArray(self.mm, state["old"][w].buckets * 2, self._salt(w, gen), owner)
            for w in range(self.ways)
        ]
        state["ptr"] = (0, 0)

    def _migrate_some(self, state: dict, writes: list[int], quota: int) -> None:
        way, slot = state["ptr"]
        olds = state["old"]
        moved = 0
        while way < self.ways and moved < quota:
            array = olds[way]
            if slot >= array.buckets:
                way += 1
                slot = 0
                continue
            cluster = array.slots[slot]
            if cluster is not None:
                array.slots[slot] = None
                self._place_new(state, cluster, writes)
                moved += 1
            slot += 1
        state["ptr"] = (way, slot)
        if way >= self.ways:
            self._finish_migration(state, writes)

    def _finish_migration(self, state: dict, writes: list[int]) -> None:
        way, slot = state["ptr"]
        olds = state["old"]
        if olds is None:
            return
        while way < self.ways:
            array = olds[way]
            while slot < array.buckets:
                cluster = array.slots[slot]
                if cluster is not None:
                    array.slots[slot] = None
                    self._place_new(state, cluster, writes)
                slot += 1
            way += 1
            slot = 0
        for array in olds:
            array.release()
        state["old"] = None
        state["ptr"] = (0, 0)

    def _place_new(self, state: dict, cluster: _Cluster, writes: list[int]) -> None:
        """Cuckoo placement into the current (new, if migrating) arrays."""
        arrays = state["ways"]
        current = cluster
        way = 0
        for _ in range(self.kick_limit):
            array = arrays[way]
            slot = array.home(current.tag)
            occupant = array.slots[slot]
            array.slots[slot] = current
            writes.append(array.line_pa(slot))
            if occupant is None:
                return
            current = occupant
            way = (way + 1) % self.ways
        # Kick limit: grow and retry (not an error).
        self._start_resize(state, writes)
        self._finish_migration(state, writes)
        self._place_new(state, current, writes)

    # -- lookup ----------------------------------------------------------------

    def _locations(self, state: dict, way: int, tag: int) -> list[tuple[_HashArray, int]]:
        new: _HashArray = state["ways"][way]
        if not self._resizing(state):
            return [(new, new.home(tag))]
        old: _HashArray = state["old"][way]
        s_old = old.home(tag)
        mway, mslot = state["ptr"]
        migrated = (way < mway) or (way == mway and s_old < mslot)
        if migrated:
            return [(new, new.home(tag))]
        return [(old, s_old), (new, new.home(tag))]

    def _lookup_size(self, state: dict, vpn: int, result: WalkResult) -> Pte | None:
        tag = vpn // CLUSTER
        hit = None
        if self.parallel:
            best = 0
            for way in range(self.ways):
                for array, slot in self._locations(state, way, tag):
                    sub: list[int] = []
                    lat = self._probe(array.line_pa(slot), sub)
                    result.accesses.extend(sub)
                    best = max(best, lat)
                    cluster = array.slots[slot]
                    if cluster is not None and cluster is not _TOMBSTONE and cluster.tag == tag:
                        hit = cluster.ptes[vpn % CLUSTER] if hit is None else hit
            result.latency += best
            return hit
        for way in range(self.ways):
            for array, slot in self._locations(state, way, tag):
                result.latency += self._probe(array.line_pa(slot), result.accesses)
                cluster = array.slots[slot]
                if cluster is not None and cluster.tag == tag:
                    return cluster.ptes[vpn % CLUSTER]
        return None

    def walk(self, pid: int, va: int, order=None) -> WalkResult:
        self.ensure(pid)
        result = WalkResult(pte=None)
        for name in (order or ("4K", "2M")):
            size = PAGE_SIZES.get(name)
            if size not in (PAGE_4K, PAGE_2M):
                continue
            state = self.tables.get((pid, size))
            if state is None or state["count"] == 0:
                continue
            pte = self._lookup_size(state, va // size, result)
            if pte is not None and pte.present:
                result.pte = pte
                return result
        result.fault = NotPresent(va // PAGE_4K)
        return result

    # -- mutation ----------------------------------------------------------------

    def _find_cluster(self, state: dict, tag: int) -> _Cluster | None:
        for way in range(self.ways):
            for array, slot in self._locations(state, way, tag):
                cluster = array.slots[slot]
                if cluster is not None and cluster.tag == tag:
                    return cluster
        return None

    def _live_capacity(self, state: dict) -> int:
        return sum(array.buckets for array in state["ways"])

    def map(self, pid: int, vpn: int, pte: Pte) -> list[int]:
        self.ensure(pid)
        state = self._state(pid, pte.size, create=True)
        writes: list[int] = []
        tag = vpn // CLUSTER
        if self._resizing(state):
            self._migrate_some(state, writes, self.MIGRATE_PER_INSERT)
        cluster = self._find_cluster(state, tag)
        if cluster is None:
            state["count"] += 1
            if not self._resizing(state) and \
                    state["count"] / self._live_capacity(state) > self.threshold:
                self._start_resize(state, writes)
            cluster = _Cluster(tag)
            self._place_new(state, cluster, writes)
        cluster.ptes[vpn % CLUSTER] = pte
        placed = self._cluster_line(state, cluster)
        if placed is not None:
            writes.append(placed)
        return writes

    def _cluster_line(self, state: dict, cluster: _Cluster) -> int | None:
        for way in range(self.ways):
            for array, slot in self._locations(state, way, cluster.tag):
                if array.slots[slot] is cluster:
                    return array.line_pa(slot)
        return None

    def unmap(self, pid: int, vpn: int, size: int) -> list[int]:
        state = self.tables.get((pid, size))
        if state is None:
            raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")
        tag = vpn // CLUSTER
        for way in range(self.ways):
            for array, slot in self._locations(state, way, tag):
                cluster = array.slots[slot]
                if cluster is not None and cluster.tag == tag:
                    if cluster.ptes[vpn % CLUSTER] is None:
                        break
                    cluster.ptes[vpn % CLUSTER] = None
                    if cluster.live() == 0:
                        array.slots[slot] = None
                        state["count"] -= 1
                    return [array.line_pa(slot)]
        raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")

    def promote(self, pid: int, va_2m: int, pfn_block: int) -> list[int]:
        return _hash_promote(self, pid, va_2m, pfn_block)

    def footprint(self, pid: int) -> int:
        total = 0
        for (p, _), state in self.tables.items():
            if p != pid:
                continue
            total += sum(a.bytes() for a in state["ways"])
            if state["old"] is not None:
                total += sum(a.bytes() for a in state["old"])
        return total

    def read4k(self, pid: int, vpn4k: int) -> tuple[Pte, int] | None:
        return _hash_read4k(self, pid, vpn4k)

    def _peek(self, pid: int, vpn: int, size: int) -> Pte | None:
        state = self.tables.get((pid, size))
        if state is None or state["count"] == 0:
            return None
        cluster = self._find_cluster(state, vpn // CLUSTER)
        if cluster is None:
            return None
        return cluster.ptes[vpn % CLUSTER]

    def _drop_cluster(self, pid: int, tag: int, size: int) -> int | None:
        state = self.tables.get((pid, size))
        if state is None or state["count"] == 0:
            return None
        for way in range(self.ways):
            for array, slot in self._locations(state, way, tag):
                cluster = array.slots[slot]
                if cluster is not None and cluster.tag == tag:
                    array.slots[slot] = None
                    state["count"] -= 1
                    return array.line_pa(slot)
        return None


# ---------------------------------------------------------------------------
# Compact single-probe table with overflow stash

class CompactHashTable(BasePageTable):
    kind = "compact"

    def __init__(self, memhier, mm, buckets: int):
        super().__init__(memhier, mm)
        self.init_buckets_4k = buckets
        self.init_buckets_2m = max(64, buckets >> 3)
        self.tables: dict[tuple[int, int], dict] = {}

    def _state(self, pid: int, size: int, create: bool = False) -> dict | None:
        key = (pid, size)
        state = self.tables.get(key)
        if state is None and create:
            buckets = self.init_buckets_4k if size == PAGE_4K else self.init_buckets_2m
            stash_frame = self.mm.alloc_block(0, owner=f"pt:{pid}")
            state = {
                "array": _HashArray(self.mm, buckets, 0, f"pt:{pid}"),
                "stash": {},  # tag -> _Cluster, at most STASH_CLUSTERS
                "stash_frame": stash_frame,
                "count": 0,
            }
            self.tables[key] = state
        return state

    def ensure(self, pid: int) -> None:
        self._state(pid, PAGE_4K, create=True)

    def _lookup_size(self, state: dict, vpn: int, result: WalkResult) -> Pte | None:
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        slot = array.home(tag)
        result.latency += self._probe(array.line_pa(slot), result.accesses)
        cluster = array.slots[slot]
        if cluster is None:
            return None
        if cluster.tag == tag:
            return cluster.ptes[vpn % CLUSTER]
        # Tag mismatch: one probe of the stash frame.
        stash_pa = state["stash_frame"] * 4096 + (tag % STASH_CLUSTERS) * 64
        result.latency += self._probe(stash_pa, result.accesses)
        hit = state["stash"].get(tag)
        if hit is not None:
            return hit.ptes[vpn % CLUSTER]
        return None

    def walk(self, pid: int, va: int, order=None) -> WalkResult:
        self.ensure(pid)
        result = WalkResult(pte=None)
        for name in (order or ("4K", "2M")):
            size = PAGE_SIZES.get(name)
            if size not in (PAGE_4K, PAGE_2M):
                continue
            state = self.tables.get((pid, size))
            if state is None or state["count"] == 0:
                continue
            pte = self._lookup_size(state, va // size, result)
            if pte is not None and pte.present:
                result.pte = pte
                return result
        result.fault = NotPresent(va // PAGE_4K)
        return result

    def _resize(self, state: dict) -> list[int]:
        """Double the array and re-place everything, draining the stash."""
        old: _HashArray = state["array"]
        clusters = [c for c in old.slots if c is not None]
        clusters += [state["stash"][t] for t in sorted(state["stash"])]
        state["stash"] = {}
        new = _HashArray(self.mm, old.buckets * 2, 0, old.owner)
        writes = []
        for cluster in clusters:
            slot = new.home(cluster.tag)
            if new.slots[slot] is None:
                new.slots[slot] = cluster
                writes.append(new.line_pa(slot))
            else:
                state["stash"][cluster.tag] = cluster
                writes.append(state["stash_frame"] * 4096 + (cluster.tag % STASH_CLUSTERS) * 64)
        state["array"] = new
        old.release()
        if len(state["stash"]) > STASH_CLUSTERS:
            writes.extend(self._resize(state))
        return writes

    def map(self, pid: int, vpn: int, pte: Pte) -> list[int]:
        self.ensure(pid)
        state = self._state(pid, pte.size, create=True)
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        writes: list[int] = []
        slot = array.home(tag)
        cluster = array.slots[slot]
        if cluster is not None and cluster.tag == tag:
            cluster.ptes[vpn % CLUSTER] = pte
            writes.append(array.line_pa(slot))
            return writes
        stashed = state["stash"].get(tag)
        if stashed is not None:
            stashed.ptes[vpn % CLUSTER] = pte
            writes.append(state["stash_frame"] * 4096 + (tag % STASH_CLUSTERS) * 64)
            return writes
        fresh = _Cluster(tag)
        fresh.ptes[vpn % CLUSTER] = pte
        state["count"] += 1
        if cluster is None:
            array.slots[slot] = fresh
            writes.append(array.line_pa(slot))
            return writes
        state["stash"][tag] = fresh
        writes.append(state["stash_frame"] * 4096 + (tag % STASH_CLUSTERS) * 64)
        if len(state["stash"]) > STASH_CLUSTERS:
            writes.extend(self._resize(state))
        return writes

    def _refill_home(self, state: dict, slot: int) -> list[int]:
        """A home slot emptied; pull back a stashed cluster that hashes to it
        so the single-probe lookup can still reach it."""
        array: _HashArray = state["array"]
        candidates = sorted(t for t in state["stash"] if array.home(t) == slot)
        if not candidates:
            return []
        array.slots[slot] = state["stash"].pop(candidates[0])
        return [array.line_pa(slot)]

    def unmap(self, pid: int, vpn: int, size: int) -> list[int]:
        state = self.tables.get((pid, size))
        if state is None:
            raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        slot = array.home(tag)
        cluster = array.slots[slot]
        if cluster is not None and cluster.tag == tag and cluster.ptes[vpn % CLUSTER] is not None:
            cluster.ptes[vpn % CLUSTER] = None
            writes = [array.line_pa(slot)]
            if cluster.live() == 0:
                array.slots[slot] = None
                state["count"] -= 1
                writes.extend(self._refill_home(state, slot))
            return writes
        stashed = state["stash"].get(tag)
        if stashed is not None and stashed.ptes[vpn % CLUSTER] is not None:
            stashed.ptes[vpn % CLUSTER] = None
            if stashed.live() == 0:
                del state["stash"][tag]
                state["count"] -= 1
            return [state["stash_frame"] * 4096 + (tag % STASH_CLUSTERS) * 64]
        raise WalkError(f"unmap: no mapping for vpn {vpn:#x}")

    def promote(self, pid: int, va_2m: int, pfn_block: int) -> list[int]:
        return _hash_promote(self, pid, va_2m, pfn_block)

    def footprint(self, pid: int) -> int:
        total = 0
        for (p, _), state in self.tables.items():
            if p == pid:
                total += state["array"].bytes() + 4096
        return total

    def read4k(self, pid: int, vpn4k: int) -> tuple[Pte, int] | None:
        return _hash_read4k(self, pid, vpn4k)

    def _peek(self, pid: int, vpn: int, size: int) -> Pte | None:
        state = self.tables.get((pid, size))
        if state is None or state["count"] == 0:
            return None
        array: _HashArray = state["array"]
        tag = vpn // CLUSTER
        cluster = array.slots[array.home(tag)]
        if cluster is not None and cluster.tag == tag:
            return cluster.ptes[vpn % CLUSTER]
        stashed = state["stash"].get(tag)
        if stashed is not None:
            return stashed.ptes[vpn % CLUSTER]
        return None

    def _drop_cluster(self, pid: int, tag: int, size: int) -> int | None:
        state = self.tables.get((pid, size))
        if state is None or state["count"] == 0:
            return None
        array: _HashArray = state["array"]
        slot = array.home(tag)
        cluster = array.slots[slot]
        if cluster is not None and cluster.tag == tag:
            array.slots[slot] = None
            state["count"] -= 1
            self._refill_home(state, slot)
            return array.line_pa(slot)
        if tag in state["stash"]:
            del state["stash"][tag]
            state["count"] -= 1
            return state["stash_frame"] * 4096 + (tag % STASH_CLUSTERS) * 64
        return None


# ---------------------------------------------------------------------------
# Nested (two-dimensional) composition

HOST_PID = 0


class NestedTable(BasePageTable):
    kind = "nested"

    def __init__(self, memhier, mm, guest: BasePageTable, host: BasePageTable,
                 ntlb_cfg: dict):
        super().__init__(memhier, mm)
        self.guest = guest
        self.host = host
        self.ntlb = SetAssocCache(ntlb_cfg["entries"], ntlb_cfg["assoc"], ntlb_cfg["latency"])
        self.guest.access_hook = self._host_translate
        self.host.ensure(HOST_PID)

    def _host_translate(self, gpa: int, accesses: list[int]) -> tuple[int, int]:
        """Translate a guest-physical access before it touches memory."""
        gfn = gpa // 4096
        latency = self.ntlb.latency
        hfn = self.ntlb.get(gfn)
        if hfn is None:
            hr = self.host.walk(HOST_PID, gpa)
            accesses.extend(hr.accesses)
            latency += hr.latency
            if hr.fault is not None:
                raise WalkError(f"host mapping missing for guest frame {gfn}")
            hfn = hr.pte.pfn + (gfn - (gpa // hr.pte.size) * (hr.pte.size // 4096))
            self.ntlb.put(gfn, hfn)
        return hfn * 4096 + gpa % 4096, latency

    def translate_data(self, gpa: int) -> tuple[int, list[int], int]:
        """Host-translate the final data address; returns (hpa, accesses, cycles)."""
        accesses: list[int] = []
        hpa, latency = self._host_translate(gpa, accesses)
        return hpa, accesses, latency

    def _ensure_host_frame(self, gfn: int, writes: list[int]) -> None:
        if self.host.read4k(HOST_PID, gfn) is None:
            writes.extend(self.host.map(HOST_PID, gfn, Pte(pfn=gfn)))

    def ensure(self, pid: int) -> None:
        known = getattr(self.guest, "roots", None)
        fresh = pid not in known if known is not None else (pid, PAGE_4K) not in self.guest.tables
        self.guest.ensure(pid)
        if fresh:
            writes: list[int] = []
            for frame in self._guest_frames(pid):
                self._ensure_host_frame(frame, writes)

    def _guest_frames(self, pid: int) -> list[int]:
        if isinstance(self.guest, RadixTable):
            return list(self.guest.frames.get(pid, []))
        frames = []
        for (p, _), state in self.guest.tables.items():
            if p != pid:
                continue
            if "array" in state:
                frames.extend(state["array"].frames)
                if "stash_frame" in state:
                    frames.append(state["stash_frame"])
            else:
                for array in state["ways"] + (state["old"] or []):
                    frames.extend(array.frames)
        return frames

    def walk(self, pid: int, va: int, order=None) -> WalkResult:
        self.ensure(pid)
        return self.guest.walk(pid, va, order)

    def map(self, pid: int, vpn: int, pte: Pte) -> list[int]:
        self.ensure(pid)
        if isinstance(self.guest, RadixTable):
            owned = self.guest.frames[pid]
            mark = len(owned)
            writes = self.guest.map(pid, vpn, pte)
            fresh = owned[mark:]
        else:
            before = set(self._guest_frames(pid))
            writes = self.guest.map(pid, vpn, pte)
            fresh = [f for f in self._guest_frames(pid) if f not in before]
        for frame in fresh:
            self._ensure_host_frame(frame, writes)
        for i in range(pte.size // 4096):
            self._ensure_host_frame(pte.pfn + i, writes)
        return writes

    def unmap(self, pid: int, vpn: int, size: int) -> list[int]:
        return self.guest.unmap(pid, vpn, size)

    def promote(self, pid: int, va_2m: int, pfn_block: int) -> list[int]:
        writes = self.guest.promote(pid, va_2m, pfn_block)
        for i in range(512):
            self._ensure_host_frame(pfn_block + i, writes)
        return writes

    def footprint(self, pid: int) -> int:
        return self.guest.footprint(pid)

    def host_footprint(self) -> int:
        return self.host.footprint(HOST_PID)

    def read4k(self, pid: int, vpn4k: int) -> tuple[Pte, int] | None:
        return self.guest.read4k(pid, vpn4k)


# ---------------------------------------------------------------------------

def _make_flat(kind: str, pt_cfg: dict, memhier, mm, seed: int) -> BasePageTable:
    if kind == "radix":
        return RadixTable(memhier, mm, pt_cfg["pwc"])
    if kind == "clustered":
        return ClusteredHashTable(memhier, mm, pt_cfg["buckets"])
    if kind == "cuckoo":
        cx = pt_cfg["cuckoo"]
        return ElasticCuckooTable(
            memhier, mm, pt_cfg["buckets"], ways=cx["ways"], threshold=cx["threshold"],
            kick_limit=cx["kick_limit"], parallel=cx["probe"] == "parallel", seed=seed,
        )
    if kind == "compact":
        return CompactHashTable(memhier, mm, pt_cfg["buckets"])
    raise ValueError(f"unknown page table kind {kind!r}")


def make_page_table(pt_cfg: dict, memhier: MemoryHierarchy, mm: BuddyAllocator,
                    seed: int = 0) -> BasePageTable:
    if pt_cfg["nested"]["enabled"]:
        guest = _make_flat(pt_cfg["nested"]["guest"], pt_cfg, memhier, mm, seed)
        host = _make_flat(pt_cfg["nested"]["host"], pt_cfg, memhier, mm, seed + 1)
        return NestedTable(memhier, mm, guest, host, pt_cfg["nested"]["ntlb"])
    return _make_flat(pt_cfg["kind"], pt_cfg, memhier, mm, seed)
