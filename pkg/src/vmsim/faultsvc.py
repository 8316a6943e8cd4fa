"""Page-fault and allocation-event handling.

A common action vocabulary is produced either by in-process reference
policies or by an external handler process speaking `vfault/1`: one JSON
object per line over stdio or TCP, with a hello handshake, simulator-assigned
request ids, and handler-issued synchronous queries between a request and its
response. See PROTOCOL.md for the full contract.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import socket
import subprocess
from dataclasses import dataclass, field

from .core import PAGE_SIZES, VmsimError
from .memmgr import BuddyAllocator, OutOfMemory

PROTO = "vfault/1"

CTX_FAULT = "fault"
CTX_VMA_ALLOC = "vma_alloc"
CTX_VMA_FREE = "vma_free"


class ProtocolError(VmsimError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})" if offset else message)
        self.offset = offset


class HandlerTimeout(VmsimError):
    pass


class VersionMismatch(VmsimError):
    pass


class ConnectFailed(VmsimError):
    pass


class KillRequested(VmsimError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class AuditViolation(VmsimError):
    pass


@dataclass(frozen=True)
class FaultRequest:
    id: int
    context: str  # fault | vma_alloc | vma_free
    pid: int
    cycle: int
    va: int | None = None
    vpn: int | None = None
    access: str | None = None
    base: int | None = None
    length: int | None = None
    hint: str | None = None


@dataclass
class FaultResponse:
    re: int
    actions: list[dict] = field(default_factory=list)
    handler_cycles: int = 0
    touches: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Wire encoding: one JSON object per line, UTF-8, newline-terminated.

def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def decode_message(data: bytes, offset: int = 0) -> dict:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"not UTF-8: {exc}", offset) from exc
    try:
        msg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"bad JSON: {exc.msg}", offset + exc.pos) from exc
    if not isinstance(msg, dict):
        raise ProtocolError("message is not an object", offset)
    return msg


def request_to_wire(req: FaultRequest) -> dict:
    if req.context == CTX_FAULT:
        return {
            "id": req.id, "type": "fault", "pid": req.pid, "vpn": req.vpn,
            "va": f"0x{req.va:x}", "access": req.access, "cycle": req.cycle,
        }
    msg = {
        "id": req.id, "type": req.context, "pid": req.pid,
        "base": f"0x{req.base:x}", "len": req.length, "cycle": req.cycle,
    }
    if req.context == CTX_VMA_ALLOC:
        msg["hint"] = req.hint or "none"
    return msg


def request_from_wire(msg: dict) -> FaultRequest:
    kind = msg.get("type")
    if kind == "fault":
        return FaultRequest(
            id=msg["id"], context=CTX_FAULT, pid=msg["pid"], cycle=msg["cycle"],
            va=int(msg["va"], 16), vpn=msg["vpn"], access=msg["access"],
        )
    if kind in (CTX_VMA_ALLOC, CTX_VMA_FREE):
        return FaultRequest(
            id=msg["id"], context=kind, pid=msg["pid"], cycle=msg["cycle"],
            base=int(msg["base"], 16), length=msg["len"],
            hint=msg.get("hint"),
        )
    raise ProtocolError(f"unknown request type {kind!r}")


def response_to_wire(resp: FaultResponse) -> dict:
    return {
        "re": resp.re, "type": "fault_done", "actions": resp.actions,
        "handler_cycles": resp.handler_cycles,
        "touches": [f"0x{t:x}" for t in resp.touches],
    }


def response_from_wire(msg: dict) -> FaultResponse:
    try:
        return FaultResponse(
            re=msg["re"],
            actions=list(msg["actions"]),
            handler_cycles=msg["handler_cycles"],
            touches=[int(t, 16) for t in msg["touches"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed response: {exc}") from exc


# Action constructors keep wire field names in one place.

def act_map(vpn: int, pfn: int, size: str) -> dict:
    return {"op": "map", "vpn": vpn, "pfn": pfn, "size": size}


def act_unmap(vpn: int, size: str) -> dict:
    return {"op": "unmap", "vpn": vpn, "size": size}


def act_reserve(va_2m: int, pfn_block: int) -> dict:
    return {"op": "reserve", "va_2m": f"0x{va_2m:x}", "pfn_block": pfn_block}


def act_promote(va_2m: int, pfn_block: int) -> dict:
    return {"op": "promote", "va_2m": f"0x{va_2m:x}", "pfn_block": pfn_block}


def act_fill_restseg(vpn: int, set_idx: int, way: int) -> dict:
    return {"op": "fill_restseg", "vpn": vpn, "set": set_idx, "way": way}


def act_add_range(vbase: int, vlimit: int, offset: int) -> dict:
    return {"op": "add_range", "vbase": f"0x{vbase:x}", "vlimit": f"0x{vlimit:x}",
            "offset": offset}


def act_kill(reason: str) -> dict:
    return {"op": "kill", "reason": reason}


# ---------------------------------------------------------------------------
# Query port: the bi-directional half, shared by in-process policies and the
# external-session relay. Audits frame ownership.

class QueryPort:
    def __init__(self, mm: BuddyAllocator, pagetable=None):
        self.mm = mm
        self.pagetable = pagetable
        self.owned: set[int] = set()
        self.stats = {"alloc_block": 0, "free_block": 0, "read_pte": 0, "frag": 0}

    def _drain_breaks(self) -> list[dict]:
        events = self.mm.drain_break_events()
        for ev in events:
            block = ev["block"]
            kept = set(ev["kept"])
            for pfn in range(block, block + 512):
                if pfn not in kept:
                    self.owned.discard(pfn)
        return events

    def alloc_block(self, order: int) -> tuple[int | None, list[dict]]:
        self.stats["alloc_block"] += 1
        try:
            pfn = self.mm.alloc_block(order, owner="handler")
        except OutOfMemory:
            return None, self._drain_breaks()
        self.owned.update(range(pfn, pfn + (1 << order)))
        return pfn, self._drain_breaks()

    def free_block(self, pfn: int, order: int) -> None:
        self.stats["free_block"] += 1
        self.mm.free_block(pfn, order)
        for f in range(pfn, pfn + (1 << order)):
            self.owned.discard(f)

    def read_pte(self, pid: int, vpn: int) -> dict:
        self.stats["read_pte"] += 1
        if self.pagetable is None:
            return {"present": False}
        found = self.pagetable.read4k(pid, vpn)
        if found is None:
            return {"present": False}
        pte, pfn4k = found
        return {"present": True, "pfn": pfn4k,
                "size": {4096: "4K", PAGE_SIZES["2M"]: "2M", PAGE_SIZES["1G"]: "1G"}[pte.size]}

    def frag(self) -> dict:
        self.stats["frag"] += 1
        rep = self.mm.fragmentation_report()
        return {"fmfi": rep.fmfi, "free_per_order": rep.free_per_order}

    def audit_map(self, pfn: int, pages: int) -> None:
        for f in range(pfn, pfn + pages):
            if f not in self.owned:
                raise AuditViolation(
                    f"map of frame {f}: not obtained via alloc_block or a reservation"
                )

    def dispatch(self, msg: dict) -> dict:
        """Answer one wire query from an external handler."""
        op = msg.get("op")
        qid = msg.get("id")
        if op == "alloc_block":
            pfn, broken = self.alloc_block(msg["order"])
            reply: dict = {"re": qid}
            if pfn is None:
                reply["error"] = "oom"
            else:
                reply["pfn"] = pfn
            if broken:
                reply["broken"] = [
                    {"pid": ev["pid"], "va_2m": f"0x{ev['region'] << 21:x}"}
                    for ev in broken
                ]
            return reply
        if op == "free_block":
            self.free_block(msg["pfn"], msg["order"])
            return {"re": qid, "ok": True}
        if op == "read_pte":
            reply = {"re": qid}
            reply.update(self.read_pte(msg["pid"], msg["vpn"]))
            return reply
        if op == "frag":
            reply = {"re": qid}
            reply.update(self.frag())
            return reply
        raise ProtocolError(f"unknown query op {op!r}")


# ---------------------------------------------------------------------------
# In-process reference policies.

def cost_of(actions: list[dict], base: int, per_action: int) -> int:
    return base + per_action * max(0, len(actions) - 1)


@dataclass
class _RegionState:
    block: int | None = None     # reservation block, if any
    touched: int = 0             # bitmap over 512 pages
    promoted: bool = False
    broken: bool = False
    no_reserve: bool = False     # reservation was refused once; stay demand


class InprocHandler:
    """Reference policies (demand4k / thp / eager) over the query port.

    Keeps its own view of what it mapped, exactly as an external handler
    must, so vma_free can unmap and return frames.
    """

    def __init__(self, policy: str, port: QueryPort, base_cycles: int = 1000,
                 per_action_cycles: int = 200, promote_threshold: float = 1.0,
                 max_order: int = 10, restseg_geometry: dict | None = None,
                 restseg_set_of=None):
        self.policy = policy
        self.port = port
        self.base_cycles = base_cycles
        self.per_action_cycles = per_action_cycles
        self.promote_threshold = promote_threshold
        self.max_order = max_order
        self.restseg = restseg_geometry  # {"sets": n, "ways": n} when enabled
        self.restseg_set_of = restseg_set_of
        self.restseg_used: dict[int, set[int]] = {}  # set -> occupied way indices
        self.mappings: dict[int, dict[int, int]] = {}  # pid -> {vpn4k: pfn}
        self.restseg_pages: dict[int, dict[int, tuple[int, int]]] = {}  # pid -> {vpn: (set, way)}
        self.regions: dict[tuple[int, int], _RegionState] = {}
        self.blocks: dict[tuple[int, int], list[tuple[int, int]]] = {}  # eager blocks per vma
        self.vmas: dict[int, dict[int, int]] = {}  # pid -> {base: len}

    def close(self) -> None:
        pass

    def _respond(self, req: FaultRequest, actions: list[dict]) -> FaultResponse:
        return FaultResponse(
            re=req.id, actions=actions,
            handler_cycles=cost_of(actions, self.base_cycles, self.per_action_cycles),
            touches=[],
        )

    def _note_breaks(self, broken: list[dict]) -> None:
        for ev in broken:
            state = self.regions.get((ev["pid"], ev["region"]))
            if state is not None:
                state.broken = True

    def _alloc(self, order: int) -> int | None:
        pfn, broken = self.port.alloc_block(order)
        self._note_breaks(broken)
        return pfn

    # -- faults -----------------------------------------------------------------

    def _fault_demand(self, req: FaultRequest, actions: list[dict]) -> None:
        if self.restseg is not None:
            set_idx = self.restseg_set_of(req.pid, req.vpn)
            used = self.restseg_used.setdefault(set_idx, set())
            if len(used) < self.restseg["ways"]:
                way = min(w for w in range(self.restseg["ways"]) if w not in used)
                used.add(way)
                self.restseg_pages.setdefault(req.pid, {})[req.vpn] = (set_idx, way)
                actions.append(act_fill_restseg(req.vpn, set_idx, way))
                return
        pfn = self._alloc(0)
        if pfn is None:
            actions.append(act_kill("out of memory"))
            return
        self.mappings.setdefault(req.pid, {})[req.vpn] = pfn
        actions.append(act_map(req.vpn, pfn, "4K"))

    def _region_inside_vma(self, pid: int, region: int) -> bool:
        """THP reservations are bounded by the allocation: the whole 2M
        region must lie inside one allocated area."""
        lo = region << 21
        hi = lo + (512 * 4096)
        for base, length in self.vmas.get(pid, {}).items():
            if base <= lo and hi <= base + length:
                return True
        return False

    def _fault_thp(self, req: FaultRequest, actions: list[dict]) -> None:
        region = req.va >> 21
        key = (req.pid, region)
        state = self.regions.get(key)
        if state is None:
            state = _RegionState()
            self.regions[key] = state
        if state.block is None and not (state.broken or state.no_reserve or state.promoted) \
                and not self._region_inside_vma(req.pid, region):
            state.no_reserve = True
        if state.block is None and not (state.broken or state.no_reserve or state.promoted):
            block = self._alloc(9)
            if block is None:
                state.no_reserve = True
            else:
                state.block = block
                actions.append(act_reserve(region << 21, block))
        if state.block is not None and not state.broken:
            index = req.vpn % 512
            pfn = state.block + index
            state.touched |= 1 << index
            self.mappings.setdefault(req.pid, {})[req.vpn] = pfn
            actions.append(act_map(req.vpn, pfn, "4K"))
            if (not state.promoted
                    and bin(state.touched).count("1") / 512 >= self.promote_threshold):
                state.promoted = True
                actions.append(act_promote(region << 21, state.block))
                # The 2M leaf replaces the per-page mappings.
                mapped = self.mappings.get(req.pid, {})
                for vpn in range(region << 9, (region + 1) << 9):
                    mapped.pop(vpn, None)
            return
        # Broken or unreservable region: plain demand paging.
        pfn = self._alloc(0)
        if pfn is None:
            actions.append(act_kill("out of memory"))
            return
        self.mappings.setdefault(req.pid, {})[req.vpn] = pfn
        actions.append(act_map(req.vpn, pfn, "4K"))

    # -- vma events ---------------------------------------------------------------

    def _eager_alloc(self, req: FaultRequest, actions: list[dict]) -> None:
        frames = req.length // 4096
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
                    self.port.free_block(bp, bo)
                actions.append(act_kill("out of memory during eager allocation"))
                return
            got.append((pfn, order))
            remaining -= 1 << order
        self.blocks[(req.pid, req.base)] = got
        cursor = req.base
        mappings = self.mappings.setdefault(req.pid, {})
        maps: list[dict] = []
        for pfn, order in got:
            size = (1 << order) * 4096
            actions.append(act_add_range(cursor, cursor + size, pfn * 4096 - cursor))
            vpn0 = cursor // 4096
            for i in range(1 << order):
                mappings[vpn0 + i] = pfn + i
                maps.append(act_map(vpn0 + i, pfn + i, "4K"))
            cursor += size
        actions.extend(maps)

    def _vma_alloc(self, req: FaultRequest, actions: list[dict]) -> None:
        self.vmas.setdefault(req.pid, {})[req.base] = req.length
        if req.hint == "segment":
            return  # the simulator carves the segment itself
        if self.policy == "eager" or req.hint == "eager":
            self._eager_alloc(req, actions)

    def _vma_free(self, req: FaultRequest, actions: list[dict]) -> None:
        pid = req.pid
        lo = req.base // 4096
        hi = (req.base + req.length) // 4096
        # THP regions wholly inside the freed area, in ascending order.
        for key in sorted(k for k in self.regions if k[0] == pid):
            _, region = key
            state = self.regions[key]
            rbase = region << 21
            if not (req.base <= rbase and rbase + (512 * 4096) <= req.base + req.length):
                continue
            if state.promoted:
                actions.append(act_unmap(rbase // PAGE_SIZES["2M"], "2M"))
                self.port.free_block(state.block, 9)
            elif state.block is not None and not state.broken:
                mapped = self.mappings.get(pid, {})
                for vpn in range(rbase // 4096, rbase // 4096 + 512):
                    if vpn in mapped:
                        actions.append(act_unmap(vpn, "4K"))
                        del mapped[vpn]
                self.port.free_block(state.block, 9)
            del self.regions[key]
        mapped = self.mappings.get(pid, {})
        blocks = self.blocks.get((pid, req.base))
        if blocks is not None:
            # Eager-backed region: unmap the pages, then return whole blocks.
            for vpn in sorted(v for v in mapped if lo <= v < hi):
                actions.append(act_unmap(vpn, "4K"))
                del mapped[vpn]
            for pfn, order in blocks:
                self.port.free_block(pfn, order)
        for vpn in sorted(v for v in mapped if lo <= v < hi):
            actions.append(act_unmap(vpn, "4K"))
            self.port.free_block(mapped.pop(vpn), 0)
        in_restseg = self.restseg_pages.get(pid, {})
        for vpn in sorted(v for v in in_restseg if lo <= v < hi):
            set_idx, way = in_restseg.pop(vpn)
            self.restseg_used[set_idx].discard(way)
        self.blocks.pop((pid, req.base), None)
        self.vmas.get(pid, {}).pop(req.base, None)

    def handle(self, req: FaultRequest) -> FaultResponse:
        actions: list[dict] = []
        if req.context == CTX_FAULT:
            if self.policy == "thp":
                self._fault_thp(req, actions)
            else:
                self._fault_demand(req, actions)
        elif req.context == CTX_VMA_ALLOC:
            self._vma_alloc(req, actions)
        elif req.context == CTX_VMA_FREE:
            self._vma_free(req, actions)
        else:
            raise ProtocolError(f"unknown context {req.context!r}")
        return self._respond(req, actions)


# ---------------------------------------------------------------------------
# External sessions: exec:<argv> over stdio, or tcp:<host:port>.

class _LineChannel:
    """Newline-framed reads with timeout over a pipe or socket."""

    def __init__(self, read_fd: int, write_fn, timeout_s: float):
        self.read_fd = read_fd
        self.write_fn = write_fn
        self.timeout_s = timeout_s
        self.buffer = b""
        self.consumed = 0  # byte offset of buffer start within the stream

    def write(self, data: bytes) -> None:
        self.write_fn(data)

    def read_line(self) -> tuple[bytes, int]:
        """Returns (line without newline, byte offset of line start)."""
        while b"\n" not in self.buffer:
            ready, _, _ = select.select([self.read_fd], [], [], self.timeout_s)
            if not ready:
                raise HandlerTimeout(f"no reply within {self.timeout_s:.1f}s")
            chunk = os.read(self.read_fd, 65536)
            if not chunk:
                raise ProtocolError("handler closed the stream", self.consumed + len(self.buffer))
            self.buffer += chunk
        line, _, rest = self.buffer.partition(b"\n")
        offset = self.consumed
        self.consumed += len(line) + 1
        self.buffer = rest
        return line, offset


class ExternalSession:
    def __init__(self, endpoint: str, port: QueryPort, hello_extra: dict,
                 timeout_ms: int = 30000):
        self.endpoint = endpoint
        self.port = port
        self.timeout_s = timeout_ms / 1000.0
        self.proc: subprocess.Popen | None = None
        self.sock: socket.socket | None = None
        if endpoint.startswith("exec:"):
            argv = shlex.split(endpoint[len("exec:"):])
            try:
                self.proc = subprocess.Popen(
                    argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0,
                )
            except OSError as exc:
                raise ConnectFailed(f"cannot spawn {argv!r}: {exc}") from exc
            self.channel = _LineChannel(
                self.proc.stdout.fileno(),
                lambda data: (self.proc.stdin.write(data), self.proc.stdin.flush()),
                self.timeout_s,
            )
        elif endpoint.startswith("tcp:"):
            hostport = endpoint[len("tcp:"):]
            host, _, port_s = hostport.rpartition(":")
            try:
                self.sock = socket.create_connection((host, int(port_s)), timeout=self.timeout_s)
            except OSError as exc:
                raise ConnectFailed(f"cannot connect to {hostport}: {exc}") from exc
            self.channel = _LineChannel(
                self.sock.fileno(), self.sock.sendall, self.timeout_s,
            )
        else:
            raise ConnectFailed(f"unknown endpoint {endpoint!r}")
        self._handshake(hello_extra)

    def _handshake(self, hello_extra: dict) -> None:
        hello = {"type": "hello", "proto": PROTO}
        hello.update(hello_extra)
        self.channel.write(encode_message(hello))
        try:
            line, offset = self.channel.read_line()
        except ProtocolError as exc:
            raise ConnectFailed(f"handler died during handshake: {exc}") from exc
        reply = decode_message(line, offset)
        if reply.get("type") != "hello" or reply.get("proto") != PROTO:
            raise VersionMismatch(
                f"handler speaks {reply.get('proto')!r}, simulator speaks {PROTO!r}"
            )

    def handle(self, req: FaultRequest) -> FaultResponse:
        self.channel.write(encode_message(request_to_wire(req)))
        while True:
            line, offset = self.channel.read_line()
            msg = decode_message(line, offset)
            if msg.get("type") == "query":
                self.channel.write(encode_message(self.port.dispatch(msg)))
                continue
            if msg.get("type") == "fault_done":
                resp = response_from_wire(msg)
                if resp.re != req.id:
                    raise ProtocolError(
                        f"response for id {resp.re}, expected {req.id}", offset
                    )
                return resp
            raise ProtocolError(f"unexpected message type {msg.get('type')!r}", offset)

    def close(self) -> None:
        if self.proc is not None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
        if self.sock is not None:
            self.sock.close()


def open_session(fault_cfg: dict, mm_cfg: dict, port: QueryPort,
                 hello_extra: dict | None = None,
                 restseg_geometry: dict | None = None, restseg_set_of=None):
    """Build an in-process policy handler or connect an external session."""
    endpoint = fault_cfg["handler"]
    if endpoint.startswith("inproc:"):
        policy = endpoint[len("inproc:"):]
        return InprocHandler(
            policy, port,
            base_cycles=fault_cfg["base_cycles"],
            per_action_cycles=fault_cfg["per_action_cycles"],
            promote_threshold=mm_cfg["thp"]["promote_threshold"],
            max_order=mm_cfg["max_order"],
            restseg_geometry=restseg_geometry,
            restseg_set_of=restseg_set_of,
        )
    return ExternalSession(endpoint, port, hello_extra or {},
                           timeout_ms=fault_cfg["timeout_ms"])
