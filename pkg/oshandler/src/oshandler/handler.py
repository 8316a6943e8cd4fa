"""External page-fault handler speaking vfault/1 over stdio or TCP.

Implements the demand4k and thp reference policies exactly as the
simulator's in-process handlers do (see the simulator's PROTOCOL.md),
including the eager bulk-mapping path for vma_alloc events that carry the
`eager` hint. Cost constants are fixed at base 1000 + 200 per extra action
so reports from either side of the protocol are bit-comparable; there are
deliberately no knobs to diverge.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys

PROTO = "vfault/1"
MASK64 = (1 << 64) - 1
BASE_CYCLES = 1000
PER_ACTION_CYCLES = 200


def mix64(x: int) -> int:
    """splitmix64 finalizer over seed x; matches the simulator's hash."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z


class ProtocolDied(Exception):
    pass


class _Region:
    __slots__ = ("block", "touched", "promoted", "broken", "no_reserve")

    def __init__(self):
        self.block = None
        self.touched = 0
        self.promoted = False
        self.broken = False
        self.no_reserve = False


class Handler:
    def __init__(self, policy: str, rfile, wfile):
        self.policy = policy
        self.rfile = rfile
        self.wfile = wfile
        self.next_query_id = 1
        self.promote_threshold = 1.0
        self.max_order = 10
        self.restseg = None  # {"sets": n, "ways": n} when enabled
        self.restseg_used: dict[int, set[int]] = {}
        self.restseg_pages: dict[int, dict[int, tuple[int, int]]] = {}
        self.mappings: dict[int, dict[int, int]] = {}
        self.regions: dict[tuple[int, int], _Region] = {}
        self.blocks: dict[tuple[int, int], list[tuple[int, int]]] = {}
        self.vmas: dict[int, dict[int, int]] = {}
        self.requests_served = 0

    # -- framing ---------------------------------------------------------------

    def _read(self) -> dict | None:
        line = self.rfile.readline()
        if not line:
            return None
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolDied(f"malformed line from simulator: {exc}") from exc
        if not isinstance(msg, dict):
            raise ProtocolDied("message is not an object")
        return msg

    def _write(self, msg: dict) -> None:
        self.wfile.write(json.dumps(msg, separators=(",", ":")) + "\n")
        self.wfile.flush()

    def _query(self, op: str, **fields) -> dict:
        qid = self.next_query_id
        self.next_query_id += 1
        msg = {"id": qid, "type": "query", "op": op}
        msg.update(fields)
        self._write(msg)
        reply = self._read()
        if reply is None or reply.get("re") != qid:
            raise ProtocolDied(f"no reply to query {qid}")
        for ev in reply.get("broken", ()):
            region = self.regions.get((ev["pid"], int(ev["va_2m"], 16) >> 21))
            if region is not None:
                region.broken = True
        return reply

    def _alloc(self, order: int) -> int | None:
        reply = self._query("alloc_block", order=order)
        return reply.get("pfn")

    def _free(self, pfn: int, order: int) -> None:
        self._query("free_block", pfn=pfn, order=order)

    # -- policies ----------------------------------------------------------------

    def _restseg_set(self, pid: int, vpn: int) -> int:
        return mix64(pid ^ vpn) % self.restseg["sets"]

    def _fault_demand(self, pid: int, vpn: int, actions: list) -> None:
        if self.restseg is not None:
            set_idx = self._restseg_set(pid, vpn)
            used = self.restseg_used.setdefault(set_idx, set())
            if len(used) < self.restseg["ways"]:
                way = min(w for w in range(self.restseg["ways"]) if w not in used)
                used.add(way)
                self.restseg_pages.setdefault(pid, {})[vpn] = (set_idx, way)
                actions.append({"op": "fill_restseg", "vpn": vpn, "set": set_idx,
                                "way": way})
                return
        pfn = self._alloc(0)
        if pfn is None:
            actions.append({"op": "kill", "reason": "out of memory"})
            return
        self.mappings.setdefault(pid, {})[vpn] = pfn
        actions.append({"op": "map", "vpn": vpn, "pfn": pfn, "size": "4K"})

    def _region_inside_vma(self, pid: int, region_no: int) -> bool:
        lo = region_no << 21
        hi = lo + (512 * 4096)
        for base, length in self.vmas.get(pid, {}).items():
            if base <= lo and hi <= base + length:
                return True
        return False

    def _fault_thp(self, pid: int, va: int, vpn: int, actions: list) -> None:
        region_no = va >> 21
        key = (pid, region_no)
        region = self.regions.get(key)
        if region is None:
            region = _Region()
            self.regions[key] = region
        if region.block is None and not (region.broken or region.no_reserve
                                         or region.promoted) \
                and not self._region_inside_vma(pid, region_no):
            region.no_reserve = True
        if region.block is None and not (region.broken or region.no_reserve
                                         or region.promoted):
            block = self._alloc(9)
            if block is None:
                region.no_reserve = True
            else:
                region.block = block
                actions.append({"op": "reserve", "va_2m": f"0x{region_no << 21:x}",
                                "pfn_block": block})
        if region.block is not None and not region.broken:
            index = vpn % 512
            pfn = region.block + index
            region.touched |= 1 << index
            self.mappings.setdefault(pid, {})[vpn] = pfn
            actions.append({"op": "map", "vpn": vpn, "pfn": pfn, "size": "4K"})
            if (not region.promoted
                    and bin(region.touched).count("1") / 512 >= self.promote_threshold):
                region.promoted = True
                actions.append({"op": "promote", "va_2m": f"0x{region_no << 21:x}",
                                "pfn_block": region.block})
                mapped = self.mappings.get(pid, {})
                for v in range(region_no << 9, (region_no + 1) << 9):
                    mapped.pop(v, None)
            return
        pfn = self._alloc(0)
        if pfn is None:
            actions.append({"op": "kill", "reason": "out of memory"})
            return
        self.mappings.setdefault(pid, {})[vpn] = pfn
        actions.append({"op": "map", "vpn": vpn, "pfn": pfn, "size": "4K"})

    def _eager_alloc(self, pid: int, base: int, length: int, actions: list) -> None:
        frames = length // 4096
        got: list[tuple[int, int]] = []
        remaining = frames
        while remaining:
            order = min(self.max_order, remaining.bit_length() - 1)
            pfn = None
            while order >= 0:
                pfn = self._alloc(order)
                if pfn is not None:
                    break
                order -= 1
            if pfn is None:
                for bp, bo in reversed(got):
                    self._free(bp, bo)
                actions.append({"op": "kill",
                                "reason": "out of memory during eager allocation"})
                return
            got.append((pfn, order))
            remaining -= 1 << order
        self.blocks[(pid, base)] = got
        cursor = base
        mappings = self.mappings.setdefault(pid, {})
        maps = []
        for pfn, order in got:
            size = (1 << order) * 4096
            actions.append({"op": "add_range", "vbase": f"0x{cursor:x}",
                            "vlimit": f"0x{cursor + size:x}",
                            "offset": pfn * 4096 - cursor})
            vpn0 = cursor // 4096
            for i in range(1 << order):
                mappings[vpn0 + i] = pfn + i
                maps.append({"op": "map", "vpn": vpn0 + i, "pfn": pfn + i,
                             "size": "4K"})
            cursor += size
        actions.extend(maps)

    def _vma_alloc(self, pid: int, base: int, length: int, hint: str,
                   actions: list) -> None:
        self.vmas.setdefault(pid, {})[base] = length
        if hint == "segment":
            return
        if hint == "eager":
            self._eager_alloc(pid, base, length, actions)

    def _vma_free(self, pid: int, base: int, length: int, actions: list) -> None:
        lo = base // 4096
        hi = (base + length) // 4096
        for key in sorted(k for k in self.regions if k[0] == pid):
            _, region_no = key
            region = self.regions[key]
            rbase = region_no << 21
            if not (base <= rbase and rbase + (512 * 4096) <= base + length):
                continue
            if region.promoted:
                actions.append({"op": "unmap", "vpn": rbase // (2 << 20), "size": "2M"})
                self._free(region.block, 9)
            elif region.block is not None and not region.broken:
                mapped = self.mappings.get(pid, {})
                for vpn in range(rbase // 4096, rbase // 4096 + 512):
                    if vpn in mapped:
                        actions.append({"op": "unmap", "vpn": vpn, "size": "4K"})
                        del mapped[vpn]
                self._free(region.block, 9)
            del self.regions[key]
        mapped = self.mappings.get(pid, {})
        blocks = self.blocks.get((pid, base))
        if blocks is not None:
            for vpn in sorted(v for v in mapped if lo <= v < hi):
                actions.append({"op": "unmap", "vpn": vpn, "size": "4K"})
                del mapped[vpn]
            for pfn, order in blocks:
                self._free(pfn, order)
        for vpn in sorted(v for v in mapped if lo <= v < hi):
            actions.append({"op": "unmap", "vpn": vpn, "size": "4K"})
            self._free(mapped.pop(vpn), 0)
        in_restseg = self.restseg_pages.get(pid, {})
        for vpn in sorted(v for v in in_restseg if lo <= v < hi):
            set_idx, way = in_restseg.pop(vpn)
            self.restseg_used[set_idx].discard(way)
        self.blocks.pop((pid, base), None)
        self.vmas.get(pid, {}).pop(base, None)

    # -- main loop -----------------------------------------------------------------

    def _handshake(self) -> None:
        hello = self._read()
        if hello is None or hello.get("type") != "hello":
            raise ProtocolDied("expected hello")
        if hello.get("proto") != PROTO:
            self._write({"type": "hello", "proto": PROTO})
            raise ProtocolDied(f"simulator speaks {hello.get('proto')!r}")
        mm = hello.get("mm", {})
        self.promote_threshold = mm.get("promote_threshold", 1.0)
        self.max_order = mm.get("max_order", 10)
        restseg = hello.get("restseg", {})
        if restseg.get("enabled"):
            self.restseg = {"sets": restseg["sets"], "ways": restseg["ways"]}
        self._write({"type": "hello", "proto": PROTO})

    def serve(self) -> int:
        self._handshake()
        while True:
            msg = self._read()
            if msg is None:
                return 0
            kind = msg.get("type")
            actions: list[dict] = []
            if kind == "fault":
                pid, va, vpn = msg["pid"], int(msg["va"], 16), msg["vpn"]
                if self.policy == "thp":
                    self._fault_thp(pid, va, vpn, actions)
                else:
                    self._fault_demand(pid, vpn, actions)
            elif kind == "vma_alloc":
                self._vma_alloc(msg["pid"], int(msg["base"], 16), msg["len"],
                                msg.get("hint", "none"), actions)
            elif kind == "vma_free":
                self._vma_free(msg["pid"], int(msg["base"], 16), msg["len"], actions)
            else:
                raise ProtocolDied(f"unknown request type {kind!r}")
            self.requests_served += 1
            self._write({
                "re": msg["id"], "type": "fault_done", "actions": actions,
                "handler_cycles": BASE_CYCLES + PER_ACTION_CYCLES * max(0, len(actions) - 1),
                "touches": [],
            })


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="vm-oshandler",
                                     description="external page-fault handler")
    parser.add_argument("--policy", choices=("demand4k", "thp"), required=True)
    parser.add_argument("--tcp", metavar="HOST:PORT",
                        help="listen on HOST:PORT instead of stdio (one session)")
    args = parser.parse_args(argv)

    if args.tcp:
        host, _, port = args.tcp.rpartition(":")
        server = socket.create_server((host or "127.0.0.1", int(port)))
        conn, _ = server.accept()
        rfile = conn.makefile("r", encoding="utf-8")
        wfile = conn.makefile("w", encoding="utf-8")
    else:
        rfile, wfile = sys.stdin, sys.stdout

    handler = Handler(args.policy, rfile, wfile)
    try:
        code = handler.serve()
    except ProtocolDied as exc:
        print(f"vm-oshandler: protocol error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 0
    print(f"vm-oshandler: served {handler.requests_served} requests",
          file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
