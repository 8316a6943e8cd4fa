"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Criteria 9 and 10 (external handler equivalence and the plot
pipeline) live in the handler package's own test suite.
"""

import json
import os
import time

import pytest

from vmsim import cli, engine
from vmsim.config import default_config, validate_config
from vmsim.core import PAGE_SIZES, Pte, Rng
from vmsim.memmgr import BuddyAllocator, OutOfMemory
from vmsim.pagetable import (
    ClusteredHashTable,
    CompactHashTable,
    ElasticCuckooTable,
    NestedTable,
    RadixTable,
)
from vmsim.report import canonical_json
from vmsim.trace import MemEvent, parse_stream

from conftest import small_memhier

P4K = PAGE_SIZES["4K"]
P2M = PAGE_SIZES["2M"]

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "scenarios")


def ok(criterion: str, detail: str = "") -> None:
    print(f"\nACCEPTANCE {criterion}: PASS {detail}".rstrip())


def base_cfg(**kw):
    cfg = default_config()
    cfg["mm"]["frames"] = 1 << 18
    for dotted, value in kw.items():
        node = cfg
        parts = dotted.split("__")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return validate_config(cfg)


# -- criterion 1 -------------------------------------------------------------

def _make_kind(kind, mm, mh):
    if kind == "radix":
        return RadixTable(mh, mm, None)
    if kind == "clustered":
        return ClusteredHashTable(mh, mm, 64)
    if kind == "cuckoo":
        return ElasticCuckooTable(mh, mm, 64, threshold=0.5, seed=9)
    return CompactHashTable(mh, mm, 64)


def test_criterion_1_translation_oracle():
    """10^5 randomized structure ops agree with a flat reference map."""
    started = time.time()
    ops_per_kind = 25_000
    saw_mid_resize = False
    for kind in ("radix", "clustered", "cuckoo", "compact"):
        mm = BuddyAllocator(1 << 16)
        mh = small_memhier(phys_bytes=(1 << 16) * 4096)
        pt = _make_kind(kind, mm, mh)
        rng = Rng(0xACCE97 + sum(kind.encode()))
        flat = {}       # vpn4k -> pfn
        promoted = {}   # region -> block
        vpn_space = 1 << 13
        for _ in range(ops_per_kind):
            op = rng.below(100)
            if op < 40:
                vpn = rng.below(vpn_space)
                if vpn in flat or (vpn >> 9) in promoted:
                    continue
                try:
                    pfn = mm.alloc_block(0, owner="data")
                except OutOfMemory:
                    continue
                pt.map(1, vpn, Pte(pfn=pfn))
                flat[vpn] = pfn
            elif op < 55:
                if not flat:
                    continue
                keys = sorted(flat)
                vpn = keys[rng.below(len(keys))]
                pt.unmap(1, vpn, P4K)
                mm.free_block(flat.pop(vpn), 0)
            elif op < 60:
                region = rng.below(vpn_space >> 9)
                base_vpn = region << 9
                if region in promoted or any(
                    base_vpn <= v < base_vpn + 512 for v in flat
                ):
                    continue
                try:
                    block = mm.alloc_block(9, owner="data")
                except OutOfMemory:
                    continue
                for i in range(512):
                    pt.map(1, base_vpn + i, Pte(pfn=block + i))
                pt.promote(1, base_vpn * P4K, block)
                promoted[region] = block
            else:
                vpn = rng.below(vpn_space)
                if kind == "cuckoo" and pt.tables.get((1, P4K), {}).get("old"):
                    saw_mid_resize = True
                result = pt.walk(1, vpn * P4K + rng.below(4096))
                region = vpn >> 9
                if region in promoted:
                    assert result.fault is None and result.pte.size == P2M
                    assert result.pte.pfn == promoted[region]
                elif vpn in flat:
                    assert result.fault is None, f"{kind}: lost vpn {vpn:#x}"
                    assert result.pte.pfn == flat[vpn]
                else:
                    assert result.fault is not None, f"{kind}: ghost vpn {vpn:#x}"
        mm.audit()
    elapsed = time.time() - started
    assert saw_mid_resize, "cuckoo never walked mid-resize"
    assert elapsed < 60, f"took {elapsed:.1f}s"
    ok("criterion 1 (translation-structure oracle)",
       f"[4 kinds x {ops_per_kind} ops in {elapsed:.1f}s, mid-resize covered]")


# -- criterion 2 -------------------------------------------------------------

def _enumerate_2d(guest_cold: int, host_cold: int) -> int:
    total = 0
    for _ in range(guest_cold):
        total += host_cold + 1
    total += host_cold
    return total


def test_criterion_2_walk_access_counts():
    pwc = {
        "enabled": True,
        "l4": {"entries": 32, "assoc": 4, "latency": 1},
        "l3": {"entries": 32, "assoc": 4, "latency": 1},
        "l2": {"entries": 64, "assoc": 4, "latency": 1},
    }
    mm = BuddyAllocator(1 << 14)
    mh = small_memhier()
    pt = RadixTable(mh, mm, pwc)
    pt.map(1, 5, Pte(pfn=mm.alloc_block(0, owner="d")))
    assert len(pt.walk(1, 5 * P4K).accesses) == 4          # cold 4K
    assert len(pt.walk(1, 5 * P4K).accesses) == 1          # deepest PWC hit
    block = mm.alloc_block(9, owner="d")
    pt.map(1, 8, Pte(pfn=block, size=P2M))
    fresh = RadixTable(small_memhier(), BuddyAllocator(1 << 14), None)
    b2 = fresh.mm.alloc_block(9, owner="d")
    fresh.map(1, 8, Pte(pfn=b2, size=P2M))
    assert len(fresh.walk(1, 8 * P2M).accesses) == 3       # cold 2M

    mm2 = BuddyAllocator(1 << 16)
    mh2 = small_memhier(phys_bytes=(1 << 16) * 4096)
    nested = NestedTable(mh2, mm2, RadixTable(mh2, mm2, None),
                         RadixTable(mh2, mm2, None),
                         {"entries": 64, "assoc": 8, "latency": 1})
    nested.map(1, 5, Pte(pfn=mm2.alloc_block(0, owner="d")))
    from vmsim.pagetable import SetAssocCache

    nested.ntlb = SetAssocCache(64, 8, 1)  # everything cold again
    result = nested.walk(1, 5 * P4K)
    _, extra, _ = nested.translate_data(result.pte.pfn * 4096)
    cold = len(result.accesses) + len(extra)
    assert cold == _enumerate_2d(4, 4) == 24
    result = nested.walk(1, 5 * P4K)
    _, extra, _ = nested.translate_data(result.pte.pfn * 4096)
    warm = len(result.accesses) + len(extra)
    assert warm == 4
    ok("criterion 2 (walk access counts)",
       "[radix 4/3/1, nested cold 24, warm 4]")


# -- criterion 3 -------------------------------------------------------------

def test_criterion_3_buddy_and_fragmentation(tmp_path):
    started = time.time()
    # Randomized audit against a naive bitmap mirror.
    mm = BuddyAllocator(1 << 10)
    bitmap = [True] * (1 << 10)
    live = []
    rng = Rng(303)
    for _ in range(20_000):
        if rng.below(2) or not live:
            order = rng.below(5)
            try:
                pfn = mm.alloc_block(order)
            except OutOfMemory:
                continue
            for f in range(pfn, pfn + (1 << order)):
                assert bitmap[f], f"frame {f} double-allocated"
                bitmap[f] = False
            live.append((pfn, order))
        else:
            pfn, order = live.pop(rng.below(len(live)))
            mm.free_block(pfn, order)
            for f in range(pfn, pfn + (1 << order)):
                bitmap[f] = True
    mm.audit()
    assert mm.free_frames == sum(bitmap)

    achieved = {}
    for target in (0.3, 0.6, 0.9):
        pool = BuddyAllocator(1 << 18)
        achieved[target] = pool.fragment_to(target, seed=42)
        assert abs(achieved[target] - target) <= 0.02
        pool.audit()

    pool = BuddyAllocator(1 << 18)
    pool.fragment_to(0.9, seed=42)
    data = pool.snapshot_save()
    clone = BuddyAllocator.snapshot_load(data)
    assert clone.snapshot_save() == data
    assert clone.fmfi() == pool.fmfi()

    elapsed = time.time() - started
    assert elapsed < 120, f"took {elapsed:.1f}s"
    detail = ", ".join(f"{t}->{a:.4f}" for t, a in achieved.items())
    ok("criterion 3 (buddy/fragmentation)", f"[{detail}, {elapsed:.1f}s]")


# -- criterion 4 -------------------------------------------------------------

def _random_pages(count, span_pages, seed):
    rng = Rng(seed)
    pages = set()
    while len(pages) < count:
        pages.add(rng.below(span_pages))
    return sorted(pages)


def test_criterion_4_pagetable_footprints():
    span = (1 << 40) // 4096  # 1 TiB of virtual space
    pages = _random_pages(10_000, span, seed=77)

    footprints = {}
    for kind in ("radix", "clustered", "compact"):
        mm = BuddyAllocator(1 << 18)
        mh = small_memhier(phys_bytes=(1 << 18) * 4096)
        if kind == "radix":
            pt = RadixTable(mh, mm, None)
        elif kind == "clustered":
            pt = ClusteredHashTable(mh, mm, 32768)
        else:
            pt = CompactHashTable(mh, mm, 32768)
        for vpn in pages:
            pt.map(1, vpn, Pte(pfn=mm.alloc_block(0, owner="data")))
        footprints[kind] = pt.footprint(1)
        if kind == "compact":
            state = pt.tables[(1, P4K)]
            load = state["count"] / state["array"].buckets
            assert load <= 0.5, f"compact load {load:.3f}"
            single = 0
            for vpn in pages:
                result = pt.walk(1, vpn * P4K)
                assert result.fault is None
                if len(result.accesses) == 1:
                    single += 1
            fraction = single / len(pages)
            assert fraction >= 0.95, f"single-access fraction {fraction:.4f}"
        if kind == "radix":
            fp_pte = mh.footprint("pte")
            assert all(v == 0 for v in fp_pte.values())  # no walks yet
            for vpn in pages[:200]:
                pt.walk(1, vpn * P4K)
            fp_pte = mh.footprint("pte")
            assert any(v > 0 for v in fp_pte.values())
            assert all(v == 0 for v in mh.footprint("data").values())
            # Data traffic must never inflate the pte counters.
            before = mh.footprint("pte")
            for i in range(500):
                mh.access((1 << 20) + i * 64, "data")
            after = mh.footprint("pte")
            assert all(after[k] <= before[k] for k in after)
            assert any(v > 0 for v in mh.footprint("data").values())

    ratio = footprints["radix"] / footprints["clustered"]
    assert ratio >= 5, f"radix/clustered ratio {ratio:.2f}"
    ok("criterion 4 (page-table footprint case study)",
       f"[radix/clustered = {ratio:.1f}x, compact single-access >= 0.95]")


# -- criterion 5 -------------------------------------------------------------

def _eager_events():
    events = [f"A 1 0x40000000 {1024 * 4096}"]
    rng = Rng(99)
    for _ in range(4000):
        offset = rng.below(1024 * 4096 // 64) * 64
        events.append(f"M 1 R 0x{0x40000000 + offset:x}")
    return list(parse_stream(events))


def test_criterion_5_contiguity_schemes():
    cfg = base_cfg(**{"fault__handler": "inproc:eager", "mm__policy": "eager"})
    flat_report = engine.run(cfg, _eager_events())
    mem = flat_report["events"]["mem"]
    offset_paths = flat_report["paths"]["range"] + flat_report["paths"]["segment"]
    assert offset_paths / mem >= 0.99
    assert flat_report["walks"]["count"] == 0
    assert flat_report["walks"]["mem_accesses"] == 0
    flat_ranges = flat_report["altmap"]["ranges"]["added"]

    cfg = base_cfg(**{"fault__handler": "inproc:eager", "mm__policy": "eager"})
    cfg["mm"]["fragment"] = {"target": 0.9, "seed": 42}
    cfg = validate_config(cfg)
    frag_report = engine.run(cfg, _eager_events())
    frag_ranges = frag_report["altmap"]["ranges"]["added"]
    assert frag_ranges >= 10 * flat_ranges, f"{frag_ranges} vs {flat_ranges}"
    ok("criterion 5 (contiguity schemes)",
       f"[offset paths 100%, ranges {flat_ranges} -> {frag_ranges} under fmfi 0.9]")


# -- criterion 6 -------------------------------------------------------------

def _thp_events(count=65536):
    events = [f"A 1 0x40000000 {2 << 20}"]
    for i in range(count):
        events.append(f"M 1 W 0x{0x40000000 + (i * 64) % (2 << 20):x}")
    return list(parse_stream(events))


def test_criterion_6_thp_across_fragmentation(tmp_path):
    cfg = base_cfg(**{"fault__handler": "inproc:thp", "mm__policy": "thp_reserve"})
    events = _thp_events()
    report = engine.run(cfg, events)
    assert report["memmgr"]["promotions"] == 1
    # Promotion fires while servicing the first touch of the 512th page,
    # which is mem event number 511*64 + 1.
    post_promotion = 65536 - (511 * 64 + 1)
    hits_2m = sum(lvl["hits"]["2M"] for lvl in report["tlb"]["levels"].values())
    assert hits_2m / post_promotion >= 0.90, f"{hits_2m}/{post_promotion}"

    # All-order-0 pool: every other frame allocated, so no order-9 block can
    # ever form and the policy must fall back to plain 4K pages.
    pool = BuddyAllocator(1 << 18)
    held = [pool.alloc_block(0, owner="pin") for _ in range(1 << 18)]
    for pfn in held[::2]:
        pool.free_block(pfn, 0)
    assert pool.fmfi() == 1.0
    snap = tmp_path / "checkerboard.json"
    snap.write_bytes(pool.snapshot_save())
    cfg = base_cfg(**{"fault__handler": "inproc:thp", "mm__policy": "thp_reserve"})
    cfg["mm"]["snapshot"] = str(snap)
    cfg = validate_config(cfg)
    report = engine.run(cfg, events)
    assert report["memmgr"]["promotions"] == 0
    assert sum(lvl["hits"]["2M"] for lvl in report["tlb"]["levels"].values()) == 0
    assert report["faults"]["minor"] == 512  # pure 4K demand fallback
    ok("criterion 6 (reservation-based THP)",
       f"[2M hit share {hits_2m / post_promotion:.3f} at fmfi 0, 0 promotions at fmfi 1]")


# -- criterion 7 -------------------------------------------------------------

def test_criterion_7_minor_faults(tmp_path):
    rng = Rng(21)
    events = ["A 1 0x40000000 {}".format(256 * 4096)]
    touched = set()
    for _ in range(3000):
        offset = rng.below(256 * 4096 // 64) * 64
        touched.add(offset // 4096)
        events.append(f"M 1 R 0x{0x40000000 + offset:x}")
    parsed = list(parse_stream(events))

    report = engine.run(base_cfg(), parsed)
    assert report["faults"]["minor"] == len(touched)

    cfg = base_cfg(**{"fault__handler": "inproc:eager", "mm__policy": "eager"})
    report = engine.run(cfg, parsed)
    assert report["faults"]["minor"] == 0

    log = tmp_path / "debug.csv"
    report = engine.run(base_cfg(), parsed, debug_log=str(log))
    total = 0
    for row in log.read_text().strip().splitlines()[1:]:
        parts = row.split(",")
        components = list(map(int, parts[3:]))
        assert sum(components[:-1]) == components[-1]
        total += components[-1]
    assert total == report["total_cycles"]
    ok("criterion 7 (minor faults)",
       f"[demand faults == {len(touched)} distinct pages, eager == 0, cycles re-sum]")


# -- criterion 8 -------------------------------------------------------------

def _scenarios():
    names = sorted(
        name for name in os.listdir(SCENARIO_DIR) if name.endswith(".json")
    )
    return [(name, os.path.join(SCENARIO_DIR, name)) for name in names]


def test_criterion_8_determinism(tmp_path):
    import shutil

    outputs = {}
    for name, path in _scenarios():
        cfg = json.load(open(path))
        trace = os.path.join(SCENARIO_DIR, cfg["trace"]["file"])
        reports = []
        for attempt in (1, 2):
            out = tmp_path / f"{name}.{attempt}.json"
            code = cli.main(["run", "-c", path, "-t", trace, "-o", str(out)])
            assert code == 0, f"{name} failed"
            reports.append(out.read_bytes())
        assert reports[0] == reports[1], f"{name} not byte-identical"
        outputs[name] = reports[0]

    batch = tmp_path / "batch"
    batch.mkdir()
    shutil.copytree(os.path.join(SCENARIO_DIR, "traces"), batch / "traces")
    for name, path in _scenarios():
        shutil.copy(path, batch / name)
    assert cli.main(["run", "--batch", str(batch)]) == 0
    for name, _ in _scenarios():
        report = (batch / name.replace(".json", ".report.json")).read_bytes()
        assert report == outputs[name], f"batch {name} diverged"
    ok("criterion 8 (determinism)",
       f"[{len(outputs)} scenarios x2 runs + batch, all byte-identical]")
