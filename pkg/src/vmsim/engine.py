"""Run orchestration: wires trace -> TLB -> altmap -> page table -> fault
service -> memory hierarchy, accumulates statistics, and emits reports.

Translation and data access are charged in order with no overlap, so every
cycle in the report can be re-derived from the per-event debug log.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import altmap as altmap_mod
from . import faultsvc
from .config import config_digest
from .core import PAGE_SIZES, Pte, VmsimError
from .memhier import KIND_DATA, KIND_KERNEL, MemoryHierarchy
from .memmgr import BuddyAllocator, OutOfMemory
from .pagetable import NestedTable, SetAssocCache, make_page_table
from .report import TIMESERIES_HEADER, canonical_json, timeseries_row
from .tlb import TlbEntry, TlbHierarchy
from .trace import AllocEvent, FreeEvent, MemEvent, TraceOrderError


class RunAbort(VmsimError):
    """Fatal run error; `code` follows the CLI exit-code contract."""

    def __init__(self, code: int, message: str, ordinal: int | None = None):
        super().__init__(message)
        self.code = code
        self.ordinal = ordinal


@dataclass
class _Vma:
    base: int
    length: int
    hint: str
    ibase: int | None = None


def _path_name(level_index: int) -> str:
    return f"l{level_index + 1}tlb"


class Simulation:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.mode = cfg["mode"]
        self.seed = cfg["seed"]

        self.mm = self._build_memmgr(cfg)
        phys_bytes = self.mm.total_frames * 4096
        self.memhier = MemoryHierarchy(cfg["mem"], phys_bytes)

        pomtlb_base = self._carve_pomtlb(cfg)
        restseg_base = self._carve_restseg(cfg)
        self._carve_config_segment(cfg)

        fragment = cfg["mm"]["fragment"]
        if fragment["target"] is not None:
            seed = fragment["seed"] if fragment["seed"] is not None else self.seed
            self.mm.fragment_to(fragment["target"], seed)
        self.fmfi_initial = self.mm.fmfi()

        self.tlb = TlbHierarchy(cfg["tlb"], self.memhier, pomtlb_base=pomtlb_base)

        self.pt = make_page_table(cfg["pt"], self.memhier, self.mm, seed=self.seed)
        self.nested = isinstance(self.pt, NestedTable)

        self.segments = altmap_mod.DirectSegments()
        self.segment_blocks: dict[int, tuple[int, int]] = {}  # pid -> (pfn, order)
        seg_cfg = cfg["altmap"]["segment"]
        if seg_cfg is not None:
            self.segments.set_segment(
                seg_cfg["pid"], seg_cfg["base"], seg_cfg["limit"], seg_cfg["offset"]
            )
        self.ranges = altmap_mod.RangeSubsystem(cfg["altmap"]["ranges"], self.memhier, self.mm)
        self.restseg = None
        if cfg["altmap"]["restseg"]["enabled"]:
            self.restseg = altmap_mod.RestSeg(cfg["altmap"]["restseg"], self.memhier, restseg_base)

        self.inter = None
        self.backside_tlb = None
        self.backside_pt = None
        if self.mode == "intermediate":
            self.inter = altmap_mod.IntermediateSpace(cfg["altmap"], self.memhier, self.mm)
            bt = cfg["altmap"]["backside"]["tlb"]
            self.backside_tlb = SetAssocCache(bt["entries"], bt["assoc"], bt["latency"])
            self.backside_pt = make_page_table(cfg["pt"], self.memhier, self.mm, seed=self.seed)
            # Intermediate lines are cached under their own (synthetic) addresses.
            self.memhier.add_region(altmap_mod.INTERMEDIATE_BASE, 1 << 46)

        handler_pt = self.backside_pt if self.mode == "intermediate" else self.pt
        self.port = faultsvc.QueryPort(self.mm, handler_pt)
        hello_extra = {
            "config_digest": config_digest(cfg),
            "mm": {
                "policy": cfg["mm"]["policy"],
                "promote_threshold": cfg["mm"]["thp"]["promote_threshold"],
                "max_order": cfg["mm"]["max_order"],
            },
            "restseg": {
                "enabled": self.restseg is not None,
                "sets": cfg["altmap"]["restseg"]["sets"],
                "ways": cfg["altmap"]["restseg"]["ways"],
            },
        }
        self.handler = faultsvc.open_session(
            cfg["fault"], cfg["mm"], self.port, hello_extra=hello_extra,
            restseg_geometry=(
                {"sets": self.restseg.sets, "ways": self.restseg.ways}
                if self.restseg is not None else None
            ),
            restseg_set_of=(self.restseg.set_of if self.restseg is not None else None),
        )

        self.vmas: dict[int, dict[int, _Vma]] = {}
        self.strict = cfg["trace"]["strict"]
        self.shootdown_cycles = cfg["tlb"]["shootdown_cycles"]
        self.sample_every = cfg["report"]["sample_every"]
        self.level_paths = {lvl.name: _path_name(i) for i, lvl in enumerate(self.tlb.levels)}

        self.total_cycles = 0
        self.next_request_id = 1
        self.ordinal = 0
        self.counters = {
            "events": 0, "mem": 0, "alloc": 0, "free": 0, "wild_accesses": 0,
            "walks": 0, "walk_mem_accesses": 0, "walk_retries": 0, "walk_cycles": 0,
            "minor_faults": 0, "handler_cycles": 0, "promotions": 0,
            "reservations_broken": 0, "segments_created": 0, "segment_fallbacks": 0,
            "backside_walks": 0, "backside_tlb_hits": 0,
        }
        self.paths = {
            "prefetch": 0, "victima": 0, "pomtlb": 0, "segment": 0,
            "range": 0, "restseg": 0, "walk": 0,
        }
        for i in range(len(self.tlb.levels)):
            self.paths[_path_name(i)] = 0
        self.walk_hist: dict[int, int] = {}
        self.debug_rows: list[str] | None = None
        self.timeseries_rows: list[str] | None = None

    # -- construction helpers ---------------------------------------------------

    @staticmethod
    def _build_memmgr(cfg: dict) -> BuddyAllocator:
        snap_path = cfg["mm"]["snapshot"]
        if snap_path:
            with open(snap_path, "rb") as fh:
                return BuddyAllocator.snapshot_load(fh.read(), max_order=cfg["mm"]["max_order"])
        return BuddyAllocator(cfg["mm"]["frames"], max_order=cfg["mm"]["max_order"])

    def _carve_top(self, frames: int, owner: str) -> int:
        base_frame = self.mm.total_frames - frames
        self.mm.carve_range(base_frame, frames, owner)
        return base_frame * 4096

    def _carve_pomtlb(self, cfg: dict) -> int | None:
        pom = cfg["tlb"]["pomtlb"]
        if not pom["enabled"]:
            return None
        frames = (pom["entries"] * 16 + 4095) // 4096
        if pom["base"] is not None:
            self.mm.carve_range(pom["base"] // 4096, frames, "pomtlb")
            return pom["base"]
        return self._carve_top(frames, "pomtlb")

    def _carve_restseg(self, cfg: dict) -> int | None:
        rs = cfg["altmap"]["restseg"]
        if not rs["enabled"]:
            return None
        tag_frames = (rs["sets"] * 64 + 4095) // 4096
        frames = rs["sets"] * rs["ways"] + tag_frames
        if rs["base"] is not None:
            self.mm.carve_range(rs["base"] // 4096, frames, "restseg")
            return rs["base"]
        return self._carve_top(frames, "restseg")

    def _carve_config_segment(self, cfg: dict) -> None:
        seg = cfg["altmap"]["segment"]
        if seg is None:
            return
        frames = (seg["limit"] - seg["base"]) // 4096
        self.mm.carve_range((seg["base"] + seg["offset"]) // 4096, frames, "segment")

    # -- fault plumbing ------------------------------------------------------------

    def _next_id(self) -> int:
        rid = self.next_request_id
        self.next_request_id += 1
        return rid

    def _send(self, req: faultsvc.FaultRequest, costs: dict) -> None:
        resp = self.handler.handle(req)
        costs["fault"] += resp.handler_cycles
        self.counters["handler_cycles"] += resp.handler_cycles
        pid = 0 if self.mode == "intermediate" else req.pid
        self._apply_actions(pid, resp.actions, costs)
        for pa in resp.touches:
            costs["fault"] += self.memhier.access(pa, KIND_KERNEL, write=True).latency

    def _apply_actions(self, pid: int, actions: list[dict], costs: dict) -> None:
        pt = self.backside_pt if self.mode == "intermediate" else self.pt
        writes: list[int] = []
        for action in actions:
            op = action.get("op")
            if op == "map":
                size = PAGE_SIZES[action["size"]]
                pfn, vpn = action["pfn"], action["vpn"]
                self.port.audit_map(pfn, size // 4096)
                writes.extend(pt.map(pid, vpn, Pte(pfn=pfn, size=size)))
                res = self.mm.reservations.get((pid, vpn >> 9)) if size == 4096 else None
                if res is not None and res.block <= pfn < res.block + 512:
                    self.mm.touch_reservation(pid, vpn >> 9, pfn - res.block)
            elif op == "unmap":
                writes.extend(pt.unmap(pid, action["vpn"], PAGE_SIZES[action["size"]]))
            elif op == "reserve":
                va_2m = int(action["va_2m"], 16)
                self.mm.add_reservation(pid, va_2m >> 21, action["pfn_block"])
            elif op == "promote":
                va_2m = int(action["va_2m"], 16)
                writes.extend(pt.promote(pid, va_2m, action["pfn_block"]))
                self.mm.complete_reservation(pid, va_2m >> 21)
                self.tlb.invalidate_region(pid, va_2m, PAGE_SIZES["2M"])
                costs["fault"] += self.shootdown_cycles
                self.counters["promotions"] += 1
            elif op == "fill_restseg":
                if self.restseg is None:
                    raise faultsvc.AuditViolation("fill_restseg without a restseg")
                writes.extend(self.restseg.fill(pid, action["vpn"], action["set"], action["way"]))
            elif op == "add_range":
                writes.extend(self.ranges.add_range(
                    pid, int(action["vbase"], 16), int(action["vlimit"], 16), action["offset"],
                ))
            elif op == "kill":
                raise faultsvc.KillRequested(action.get("reason", "killed by handler"))
            else:
                raise faultsvc.ProtocolError(f"unknown action op {op!r}")
        for pa in writes:
            costs["fault"] += self.memhier.access(pa, KIND_KERNEL, write=True).latency

    def _service_fault(self, pid: int, va: int, vpn: int, access: str, costs: dict) -> None:
        self.counters["minor_faults"] += 1
        req = faultsvc.FaultRequest(
            id=self._next_id(), context=faultsvc.CTX_FAULT,
            pid=0 if self.mode == "intermediate" else pid,
            cycle=self.total_cycles, va=va, vpn=vpn, access=access,
        )
        self._send(req, costs)

    # -- classic translation ---------------------------------------------------------

    def translate(self, pid: int, va: int, access: str) -> tuple[int, str, dict]:
        """Classic mode: returns (pa, path, cost components)."""
        costs = {"tlb": 0, "altmap": 0, "walk": 0, "fault": 0}
        order = self.tlb.probe_order(va)
        out = self.tlb.lookup(pid, va, order)
        costs["tlb"] = out.latency
        if out.entry is not None:
            path = self.level_paths.get(out.path, out.path)
            self.tlb.note_resolved(va, out.entry.size)
            return out.entry.translate(va), path, costs

        # The slow path runs at most twice: once before and once after the
        # fault handler has applied its actions (which may populate the page
        # table, the restrictive segment, or a range).
        walk_accesses = 0
        walked = False
        for attempt in (0, 1):
            cycles, pa = self.segments.translate(pid, va)
            costs["altmap"] += cycles
            if pa is not None:
                return pa, "segment", costs

            if self.ranges.count(pid) or self.ranges.rtlb:
                cycles, pa, _, _ = self.ranges.lookup(pid, va)
                costs["altmap"] += cycles
                if pa is not None:
                    return pa, "range", costs

            if self.restseg is not None:
                cycles, pa, _ = self.restseg.translate(pid, va)
                costs["altmap"] += cycles
                if pa is not None:
                    if walked:
                        self._note_walk_done(walk_accesses)
                    return pa, "restseg", costs

            result = self.pt.walk(pid, va, order)
            if not walked:
                self.counters["walks"] += 1
                walked = True
            costs["walk"] += result.latency
            walk_accesses += len(result.accesses)
            if result.fault is None:
                self._note_walk_done(walk_accesses)
                return self._finish_walk(pid, va, order, result.pte, costs), "walk", costs
            if attempt == 0:
                self._service_fault(pid, va, result.fault.vpn, access, costs)
                self.counters["walk_retries"] += 1
            else:
                raise RunAbort(3, f"fault at 0x{va:x} not resolved by the handler",
                               self.ordinal)
        raise AssertionError("unreachable")

    def _note_walk_done(self, accesses: int) -> None:
        self.counters["walk_mem_accesses"] += accesses
        self.walk_hist[accesses] = self.walk_hist.get(accesses, 0) + 1

    def _finish_walk(self, pid: int, va: int, order, pte: Pte, costs: dict) -> int:
        if self.nested:
            gpa = pte.pfn * 4096 + (va - (va // pte.size) * pte.size)
            pa, nested_accesses, cycles = self.pt.translate_data(gpa)
            costs["walk"] += cycles
            self.counters["walk_mem_accesses"] += len(nested_accesses)
        else:
            pa = pte.pfn * 4096 + (va - (va // pte.size) * pte.size)
        entry = TlbEntry(pid, va // pte.size, pte.size, pte.pfn)
        self.tlb.fill(pid, entry)
        self.tlb.note_resolved(va, pte.size)
        if self.tlb.pomtlb_enabled:
            vpn4k = va // 4096
            found = self.pt.read4k(pid, vpn4k)
            if found is not None:
                self.tlb.software_tlb_fill(pid, vpn4k, found[1])
        self._maybe_prefetch(pid, va, order)
        return pa

    def _maybe_prefetch(self, pid: int, va: int, order) -> None:
        if self.tlb.prefetch is None:
            return
        next_va = (va // 4096 + 1) * 4096
        if next_va >= 1 << 48 or self.tlb.contains(pid, next_va):
            return
        result = self.pt.walk(pid, next_va, order)  # off the critical path
        if result.fault is None:
            pte = result.pte
            entry = TlbEntry(pid, next_va // pte.size, pte.size, pte.pfn, origin="prefetch")
            self.tlb.fill(pid, entry, prefetch=True)

    # -- intermediate translation -------------------------------------------------

    def _backside_resolve(self, ia: int, costs: dict) -> int:
        ipn = ia // 4096
        cycles = self.backside_tlb.latency
        pfn = self.backside_tlb.get(ipn)
        if pfn is not None:
            self.counters["backside_tlb_hits"] += 1
            return cycles
        self.counters["backside_walks"] += 1
        result = self.backside_pt.walk(0, ia)
        cycles += result.latency
        self.counters["walks"] += 1
        accesses = len(result.accesses)
        if result.fault is not None:
            fault_costs = {"tlb": 0, "altmap": 0, "walk": 0, "fault": 0}
            self._service_fault(0, ia, ipn, "R", fault_costs)
            costs["fault"] += fault_costs["fault"]
            retry = self.backside_pt.walk(0, ia)
            cycles += retry.latency
            accesses += len(retry.accesses)
            self.counters["walk_retries"] += 1
            if retry.fault is not None:
                raise RunAbort(3, f"backside fault at 0x{ia:x} unresolved", self.ordinal)
            result = retry
        self.counters["walk_mem_accesses"] += accesses
        self.walk_hist[accesses] = self.walk_hist.get(accesses, 0) + 1
        self.backside_tlb.put(ipn, result.pte.pfn)
        return cycles

    # -- event processing ------------------------------------------------------------

    def _ensure_vma(self, pid: int, va: int, costs: dict) -> None:
        regions = self.vmas.setdefault(pid, {})
        for vma in regions.values():
            if vma.base <= va < vma.base + vma.length:
                return
        if self.strict:
            raise TraceOrderError(self.ordinal, f"access 0x{va:x} outside every vma")
        self.counters["wild_accesses"] += 1
        base = va - va % 4096
        self._do_alloc(pid, base, 4096, "none", costs)

    def _do_alloc(self, pid: int, base: int, length: int, hint: str, costs: dict) -> None:
        regions = self.vmas.setdefault(pid, {})
        for vma in regions.values():
            if vma.base < base + length and base < vma.base + vma.length:
                raise TraceOrderError(self.ordinal, "alloc overlaps an existing region")
        vma = _Vma(base, length, hint)
        regions[base] = vma
        handler_base = base
        if self.mode == "intermediate":
            vma.ibase = self.inter.on_alloc(pid, base, length)
            handler_base = vma.ibase
        req = faultsvc.FaultRequest(
            id=self._next_id(), context=faultsvc.CTX_VMA_ALLOC,
            pid=0 if self.mode == "intermediate" else pid,
            cycle=self.total_cycles, base=handler_base, length=length, hint=hint,
        )
        self._send(req, costs)
        if hint == "segment" and self.mode == "classic":
            self._carve_hint_segment(pid, base, length)

    def _carve_hint_segment(self, pid: int, base: int, length: int) -> None:
        if self.segments.has(pid):
            self.counters["segment_fallbacks"] += 1
            return
        frames = length // 4096
        order = max(0, (frames - 1).bit_length())
        if order > self.mm.max_order:
            self.counters["segment_fallbacks"] += 1
            return
        try:
            pfn = self.mm.alloc_block(order, owner=f"segment:{pid}")
        except OutOfMemory:
            self.counters["segment_fallbacks"] += 1
            return
        self.segments.set_segment(pid, base, base + length, pfn * 4096 - base)
        self.segment_blocks[pid] = (pfn, order)
        self.counters["segments_created"] += 1

    def _do_free(self, pid: int, base: int, length: int, costs: dict) -> None:
        regions = self.vmas.get(pid, {})
        vma = regions.get(base)
        if vma is None or vma.length != length:
            raise TraceOrderError(self.ordinal, "free does not match an allocated region")
        handler_base = vma.ibase if self.mode == "intermediate" else base
        req = faultsvc.FaultRequest(
            id=self._next_id(), context=faultsvc.CTX_VMA_FREE,
            pid=0 if self.mode == "intermediate" else pid,
            cycle=self.total_cycles, base=handler_base, length=length,
        )
        self._send(req, costs)
        if self.mode == "intermediate":
            self.inter.on_free(pid, base, length)
            lo, hi = vma.ibase // 4096, (vma.ibase + length) // 4096
            self.backside_tlb_drop(lo, hi)
        else:
            self.ranges.remove_region(pid, base, length)
            if self.restseg is not None:
                self.restseg.remove_region(pid, base, length)
            seg = self.segments.segments.get(pid)
            if seg is not None and seg[0] == base and seg[1] == base + length \
                    and pid in self.segment_blocks:
                pfn, order = self.segment_blocks.pop(pid)
                self.mm.free_block(pfn, order)
                self.segments.clear(pid)
            self.tlb.invalidate_region(pid, base, length)
            costs["fault"] += self.shootdown_cycles
        del regions[base]

    def backside_tlb_drop(self, lo_ipn: int, hi_ipn: int) -> None:
        for s in self.backside_tlb.data:
            for key in [k for k in s if lo_ipn <= k < hi_ipn]:
                del s[key]

    def process(self, event) -> None:
        self.ordinal += 1
        self.counters["events"] += 1
        costs = {"tlb": 0, "altmap": 0, "walk": 0, "fault": 0}
        data_cycles = 0
        kind = "?"
        path = ""
        if isinstance(event, MemEvent):
            kind = "m"
            self.counters["mem"] += 1
            self._ensure_vma(event.pid, event.va, costs)
            if self.mode == "intermediate":
                ia, front_cycles, _ = self.inter.front_translate(event.pid, event.va)
                costs["altmap"] += front_cycles
                out, _ = self.memhier.access_with_resolver(
                    ia, KIND_DATA, lambda addr: self._backside_resolve(addr, costs),
                    write=event.access == "W",
                )
                data_cycles = out.latency
                path = "front"
            else:
                pa, path, costs_t = self.translate(event.pid, event.va, event.access)
                for key, value in costs_t.items():
                    costs[key] += value
                data_cycles = self.memhier.access(
                    pa, KIND_DATA, write=event.access == "W"
                ).latency
            if path in self.paths:
                self.paths[path] += 1
            else:
                self.paths[path] = self.paths.get(path, 0) + 1
        elif isinstance(event, AllocEvent):
            kind = "a"
            self.counters["alloc"] += 1
            self._do_alloc(event.pid, event.base, event.length, event.hint, costs)
        elif isinstance(event, FreeEvent):
            kind = "f"
            self.counters["free"] += 1
            self._do_free(event.pid, event.base, event.length, costs)
        else:
            raise RunAbort(2, f"unknown event {event!r}", self.ordinal)

        event_cycles = sum(costs.values()) + data_cycles
        self.total_cycles += event_cycles
        self.counters["walk_cycles"] += costs["walk"]
        broken = self.mm.drain_break_events()
        self.counters["reservations_broken"] += len(broken)
        if self.debug_rows is not None:
            self.debug_rows.append(
                f"{self.ordinal},{kind},{path},{costs['tlb']},{costs['altmap']},"
                f"{costs['walk']},{costs['fault']},{data_cycles},{event_cycles}"
            )
        if self.timeseries_rows is not None and self.sample_every > 0 \
                and self.ordinal % self.sample_every == 0:
            self._sample()

    def _sample(self) -> None:
        mem = self.counters["mem"]
        first = self.tlb.levels[0].name
        l1 = self.tlb.stats["levels"][first]
        l1_hits = sum(l1["hits"].values())
        self.timeseries_rows.append(timeseries_row(
            self.ordinal, self.total_cycles, self.mm.fmfi(),
            l1_hits / mem if mem else 0.0,
            self.counters["walks"] / mem if mem else 0.0,
            self.counters["minor_faults"],
        ))

    # -- report -------------------------------------------------------------------

    def report(self) -> dict:
        footprints = {}
        if hasattr(self.pt, "roots"):
            pids = sorted(self.pt.roots)
        elif hasattr(self.pt, "tables"):
            pids = sorted({p for p, _ in self.pt.tables})
        else:
            pids = sorted(self.vmas)
        for pid in pids:
            footprints[str(pid)] = self.pt.footprint(pid)
        pt_section = {"kind": self.cfg["pt"]["kind"], "footprints": footprints}
        if self.nested:
            pt_section["kind"] = "nested"
            pt_section["host_footprint"] = self.pt.host_footprint()
        mem_stats = dict(self.memhier.stats)
        mem_stats["hits"] = dict(self.memhier.stats["hits"])
        mem_stats["by_kind"] = dict(self.memhier.stats["by_kind"])
        mem_stats["resident"] = self.memhier.total_resident()
        mem_stats["footprint_by_kind"] = {
            kind: self.memhier.footprint(kind)
            for kind in ("data", "pte", "tlb_entry", "kernel")
        }
        report = {
            "version": 1,
            "config": self.cfg,
            "events": {
                "total": self.counters["events"],
                "mem": self.counters["mem"],
                "alloc": self.counters["alloc"],
                "free": self.counters["free"],
                "wild_accesses": self.counters["wild_accesses"],
            },
            "total_cycles": self.total_cycles,
            "paths": dict(sorted(self.paths.items())),
            "tlb": self.tlb.stats,
            "walks": {
                "count": self.counters["walks"],
                "mem_accesses": self.counters["walk_mem_accesses"],
                "retries": self.counters["walk_retries"],
                "cycles": self.counters["walk_cycles"],
                "histogram": {str(k): v for k, v in sorted(self.walk_hist.items())},
            },
            "faults": {
                "minor": self.counters["minor_faults"],
                "handler_cycles": self.counters["handler_cycles"],
            },
            "pagetable": pt_section,
            "memhier": mem_stats,
            "altmap": {
                "ranges": dict(self.ranges.stats),
                "restseg": dict(self.restseg.stats) if self.restseg is not None else None,
                "vma": dict(self.inter.stats) if self.inter is not None else None,
                "backside": {
                    "walks": self.counters["backside_walks"],
                    "tlb_hits": self.counters["backside_tlb_hits"],
                },
                "segments": {
                    "created": self.counters["segments_created"],
                    "fallbacks": self.counters["segment_fallbacks"],
                },
            },
            "memmgr": {
                "fmfi_initial": self.fmfi_initial,
                "fmfi_final": self.mm.fmfi(),
                "counts": self.mm.counts(),
                "free_per_order": [len(s) for s in self.mm.free_sets],
                "promotions": self.counters["promotions"],
                "reservations_broken": self.counters["reservations_broken"],
            },
        }
        return report

    def close(self) -> None:
        self.handler.close()


def run(cfg: dict, events, debug_log: str | None = None,
        timeseries: str | None = None) -> dict:
    """Process an event iterable under cfg and return the report dict."""
    from .trace import MalformedLine

    sim = Simulation(cfg)
    debug_path = debug_log or cfg["report"]["debug_log"]
    ts_path = timeseries or cfg["report"]["timeseries"]
    if debug_path:
        sim.debug_rows = ["ordinal,kind,path,tlb,altmap,walk,fault,data,total"]
    if ts_path or sim.sample_every:
        sim.timeseries_rows = [TIMESERIES_HEADER]
    try:
        for event in events:
            sim.process(event)
    except RunAbort:
        raise
    except (TraceOrderError, MalformedLine) as exc:
        raise RunAbort(2, str(exc), getattr(exc, "ordinal", None)) from exc
    except faultsvc.KillRequested as exc:
        raise RunAbort(3, f"handler killed the run: {exc.reason}", sim.ordinal) from exc
    except VmsimError as exc:
        raise RunAbort(3, str(exc), sim.ordinal) from exc
    finally:
        sim.close()
    report = sim.report()
    if debug_path:
        with open(debug_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(sim.debug_rows) + "\n")
    if ts_path:
        with open(ts_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(sim.timeseries_rows) + "\n")
    return report


def write_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(report))
