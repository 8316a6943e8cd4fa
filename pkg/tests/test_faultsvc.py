import sys

import pytest
from conftest import small_memhier

from vmsim.faultsvc import (
    CTX_FAULT,
    CTX_VMA_ALLOC,
    CTX_VMA_FREE,
    AuditViolation,
    ConnectFailed,
    ExternalSession,
    FaultRequest,
    FaultResponse,
    InprocHandler,
    ProtocolError,
    QueryPort,
    VersionMismatch,
    decode_message,
    encode_message,
    request_from_wire,
    request_to_wire,
    response_from_wire,
    response_to_wire,
)
from vmsim.memmgr import BuddyAllocator
from vmsim.pagetable import RadixTable


def make_port(frames=1 << 12):
    mh = small_memhier()
    mm = BuddyAllocator(frames)
    pt = RadixTable(mh, mm, None)
    return QueryPort(mm, pt), mm, pt


def fault(rid, pid=1, va=0x123000, access="W", cycle=100):
    return FaultRequest(id=rid, context=CTX_FAULT, pid=pid, cycle=cycle,
                        va=va, vpn=va // 4096, access=access)


class TestWire:
    def test_fault_request_exact_bytes(self):
        req = fault(1)
        wire = encode_message(request_to_wire(req))
        assert wire == (b'{"id":1,"type":"fault","pid":1,"vpn":291,"va":"0x123000",'
                        b'"access":"W","cycle":100}\n')

    def test_query_and_reply_schema(self):
        port, _, _ = make_port()
        reply = port.dispatch({"id": 2, "type": "query", "op": "alloc_block", "order": 9})
        assert reply == {"re": 2, "pfn": 0}
        assert encode_message({"id": 2, "type": "query", "op": "alloc_block", "order": 9}) \
            == b'{"id":2,"type":"query","op":"alloc_block","order":9}\n'

    def test_response_exact_bytes(self):
        resp = FaultResponse(
            re=1, actions=[{"op": "map", "vpn": 291, "pfn": 0, "size": "4K"}],
            handler_cycles=1500, touches=[0x7F000],
        )
        wire = encode_message(response_to_wire(resp))
        assert wire == (b'{"re":1,"type":"fault_done","actions":'
                        b'[{"op":"map","vpn":291,"pfn":0,"size":"4K"}],'
                        b'"handler_cycles":1500,"touches":["0x7f000"]}\n')

    def test_round_trips(self):
        for req in (fault(3), FaultRequest(id=4, context=CTX_VMA_ALLOC, pid=2, cycle=7,
                                           base=0x40000000, length=2 << 20, hint="eager"),
                    FaultRequest(id=5, context=CTX_VMA_FREE, pid=2, cycle=9,
                                 base=0x40000000, length=2 << 20)):
            assert request_from_wire(decode_message(encode_message(request_to_wire(req)))) \
                == req
        resp = FaultResponse(re=9, actions=[{"op": "unmap", "vpn": 5, "size": "4K"}],
                             handler_cycles=1000, touches=[64, 128])
        assert response_from_wire(decode_message(encode_message(response_to_wire(resp)))) \
            == resp

    def test_decode_error_carries_offset(self):
        with pytest.raises(ProtocolError) as err:
            decode_message(b'{"id": 1, "ty', offset=100)
        assert err.value.offset >= 100


class TestQueryPort:
    def test_free_and_read_pte(self):
        port, mm, pt = make_port()
        pfn, _ = port.alloc_block(0)
        pt.map(1, 77, __import__("vmsim.core", fromlist=["Pte"]).Pte(pfn=pfn))
        assert port.read_pte(1, 77) == {"present": True, "pfn": pfn, "size": "4K"}
        assert port.read_pte(1, 78) == {"present": False}
        port.free_block(pfn, 0)
        assert pfn not in port.owned

    def test_frag_reply(self):
        port, _, _ = make_port()
        out = port.frag()
        assert out["fmfi"] == 0.0 and len(out["free_per_order"]) == 11

    def test_audit_rejects_unowned_frames(self):
        port, _, _ = make_port()
        with pytest.raises(AuditViolation):
            port.audit_map(999, 1)
        pfn, _ = port.alloc_block(0)
        port.audit_map(pfn, 1)

    def test_oom_reply(self):
        port, mm, _ = make_port(frames=2)
        port.alloc_block(0)
        port.alloc_block(0)
        reply = port.dispatch({"id": 9, "type": "query", "op": "alloc_block", "order": 0})
        assert reply == {"re": 9, "error": "oom"}


class TestDemand4k:
    def test_fresh_pool_single_map_base_cycles(self):
        port, _, _ = make_port()
        handler = InprocHandler("demand4k", port)
        resp = handler.handle(fault(1))
        assert resp.actions == [{"op": "map", "vpn": 291, "pfn": 0, "size": "4K"}]
        assert resp.handler_cycles == 1000
        assert resp.touches == []

    def test_vma_free_unmaps_and_returns_frames(self):
        port, mm, _ = make_port()
        handler = InprocHandler("demand4k", port)
        handler.handle(FaultRequest(id=1, context=CTX_VMA_ALLOC, pid=1, cycle=0,
                                    base=0x10000, length=0x3000, hint="none"))
        for i, va in enumerate((0x10000, 0x11000, 0x12000)):
            handler.handle(fault(2 + i, va=va))
        free_before = mm.free_frames
        resp = handler.handle(FaultRequest(id=9, context=CTX_VMA_FREE, pid=1, cycle=0,
                                           base=0x10000, length=0x3000))
        assert [a["op"] for a in resp.actions] == ["unmap"] * 3
        assert [a["vpn"] for a in resp.actions] == [0x10, 0x11, 0x12]
        assert mm.free_frames == free_before + 3

    def test_oom_returns_kill(self):
        port, _, _ = make_port(frames=1)
        handler = InprocHandler("demand4k", port)
        handler.handle(fault(1))
        resp = handler.handle(fault(2, va=0x999000))
        assert resp.actions == [{"op": "kill", "reason": "out of memory"}]


def vma_alloc(rid, base, length, pid=1, hint="none"):
    return FaultRequest(id=rid, context=CTX_VMA_ALLOC, pid=pid, cycle=0,
                        base=base, length=length, hint=hint)


class TestThp:
    def test_first_fault_reserves_and_maps(self):
        port, mm, _ = make_port(frames=1 << 11)
        handler = InprocHandler("thp", port)
        handler.handle(vma_alloc(1, 0x200000, 2 << 20))
        resp = handler.handle(fault(2, va=0x200000))
        assert resp.actions[0] == {"op": "reserve", "va_2m": "0x200000", "pfn_block": 0}
        assert resp.actions[1] == {"op": "map", "vpn": 512, "pfn": 0, "size": "4K"}
        assert resp.handler_cycles == 1200

    def test_512th_touch_promotes(self):
        port, mm, _ = make_port(frames=1 << 11)
        handler = InprocHandler("thp", port)
        handler.handle(vma_alloc(1, 0x200000, 2 << 20))
        promote_seen = None
        for i in range(512):
            resp = handler.handle(fault(i + 2, va=0x200000 + i * 4096))
            if any(a["op"] == "promote" for a in resp.actions):
                promote_seen = i + 1
        assert promote_seen == 512
        assert not handler.mappings.get(1)  # per-page records replaced by the 2M leaf

    def test_reservation_unavailable_falls_back_demand(self):
        port, mm, _ = make_port(frames=16)  # no order-9 block possible
        handler = InprocHandler("thp", port)
        handler.handle(vma_alloc(1, 0x200000, 2 << 20))
        resp = handler.handle(fault(2, va=0x200000))
        assert [a["op"] for a in resp.actions] == ["map"]
        state = handler.regions[(1, 1)]
        assert state.no_reserve and state.block is None

    def test_region_straddling_vma_goes_demand(self):
        port, mm, _ = make_port(frames=1 << 11)
        handler = InprocHandler("thp", port)
        handler.handle(vma_alloc(1, 0x200000, 64 * 4096))  # smaller than 2M
        resp = handler.handle(fault(2, va=0x200000))
        assert [a["op"] for a in resp.actions] == ["map"]
        assert handler.regions[(1, 1)].no_reserve
        assert not mm.reservations

    @staticmethod
    def _apply(mm, pid, actions):
        """The reservation bookkeeping the engine performs on each response."""
        for a in actions:
            if a["op"] == "reserve":
                mm.add_reservation(pid, int(a["va_2m"], 16) >> 21, a["pfn_block"])
            elif a["op"] == "map":
                res = mm.reservations.get((pid, a["vpn"] >> 9))
                if res and res.block <= a["pfn"] < res.block + 512:
                    mm.touch_reservation(pid, a["vpn"] >> 9, a["pfn"] - res.block)
            elif a["op"] == "promote":
                mm.complete_reservation(pid, int(a["va_2m"], 16) >> 21)

    def test_break_notification_marks_region_broken(self):
        port, mm, _ = make_port(frames=1 << 10)  # room for exactly 2 huge blocks
        handler = InprocHandler("thp", port)
        handler.handle(vma_alloc(1, 0x000000, 6 << 20))
        resp = handler.handle(fault(2, va=0x000000))   # reserves block 0, 1 touch
        self._apply(mm, 1, resp.actions)
        for i in range(5):
            resp = handler.handle(fault(3 + i, va=0x200000 + i * 4096))  # block 512
            self._apply(mm, 1, resp.actions)
        # Pool exhausted; a new region's reservation attempt breaks region 0
        # (least touched) and then region 1, and still comes up empty for an
        # order-9 block, so the handler falls back to a 4 KiB map.
        resp = handler.handle(fault(10, va=0x400000))
        self._apply(mm, 1, resp.actions)
        assert handler.regions[(1, 0)].broken
        assert handler.regions[(1, 1)].broken
        assert [a["op"] for a in resp.actions] == ["map"]
        assert not mm.reservations


class TestEager:
    def test_vma_alloc_bulk_maps_2m_region(self):
        port, mm, _ = make_port(frames=1 << 11)
        handler = InprocHandler("eager", port)
        resp = handler.handle(FaultRequest(id=1, context=CTX_VMA_ALLOC, pid=1, cycle=0,
                                           base=0x40000000, length=2 << 20, hint="none"))
        adds = [a for a in resp.actions if a["op"] == "add_range"]
        maps = [a for a in resp.actions if a["op"] == "map"]
        assert len(adds) == 1  # one order-9 block covers the whole region
        assert adds[0] == {"op": "add_range", "vbase": "0x40000000",
                           "vlimit": "0x40200000", "offset": 0 - 0x40000000}
        assert len(maps) == 512
        assert resp.handler_cycles == 1000 + 200 * 512

    def test_fragmented_pool_many_ranges(self):
        port, mm, _ = make_port(frames=1 << 11)
        # Checkerboard the pool so only order-0 blocks exist.
        held = [mm.alloc_block(0) for _ in range(1 << 11)]
        for pfn in held[::2]:
            mm.free_block(pfn, 0)
        handler = InprocHandler("eager", port)
        resp = handler.handle(FaultRequest(id=1, context=CTX_VMA_ALLOC, pid=1, cycle=0,
                                           base=0x40000000, length=64 * 4096, hint="none"))
        adds = [a for a in resp.actions if a["op"] == "add_range"]
        assert len(adds) == 64  # one range per scattered frame

    def test_eager_hint_applies_under_demand_policy(self):
        port, _, _ = make_port()
        handler = InprocHandler("demand4k", port)
        resp = handler.handle(FaultRequest(id=1, context=CTX_VMA_ALLOC, pid=1, cycle=0,
                                           base=0x10000, length=8192, hint="eager"))
        assert [a["op"] for a in resp.actions] == ["add_range", "map", "map"]

    def test_vma_free_returns_blocks(self):
        port, mm, _ = make_port(frames=1 << 11)
        handler = InprocHandler("eager", port)
        handler.handle(FaultRequest(id=1, context=CTX_VMA_ALLOC, pid=1, cycle=0,
                                    base=0x40000000, length=2 << 20, hint="none"))
        assert mm.free_frames == (1 << 11) - 512
        resp = handler.handle(FaultRequest(id=2, context=CTX_VMA_FREE, pid=1, cycle=0,
                                           base=0x40000000, length=2 << 20))
        assert len([a for a in resp.actions if a["op"] == "unmap"]) == 512
        assert mm.free_frames == 1 << 11


HELLO_OK = '{"type":"hello","proto":"vfault/1"}'


def write_handler(tmp_path, body, hello=HELLO_OK):
    script = tmp_path / "handler.py"
    script.write_text(
        "import sys, json\n"
        "line = sys.stdin.readline()\n"
        f"sys.stdout.write('{hello}' + '\\n')\n"
        "sys.stdout.flush()\n"
        + body
    )
    return f"exec:{sys.executable} {script}"


class TestExternalSession:
    def test_handshake_ok_and_empty_response(self, tmp_path):
        endpoint = write_handler(tmp_path, (
            "for line in sys.stdin:\n"
            "    msg = json.loads(line)\n"
            "    out = {'re': msg['id'], 'type': 'fault_done', 'actions': [],\n"
            "           'handler_cycles': 1000, 'touches': []}\n"
            "    sys.stdout.write(json.dumps(out) + '\\n')\n"
            "    sys.stdout.flush()\n"
        ))
        port, _, _ = make_port()
        session = ExternalSession(endpoint, port, {}, timeout_ms=10000)
        resp = session.handle(fault(1))
        assert resp.handler_cycles == 1000 and resp.actions == []
        session.close()

    def test_version_mismatch(self, tmp_path):
        endpoint = write_handler(
            tmp_path, "", hello='{"type":"hello","proto":"vfault/2"}')
        port, _, _ = make_port()
        with pytest.raises(VersionMismatch):
            ExternalSession(endpoint, port, {}, timeout_ms=10000)

    def test_dead_endpoint(self):
        port, _, _ = make_port()
        with pytest.raises(ConnectFailed):
            ExternalSession("exec:/nonexistent-handler-binary", port, {})

    def test_query_relay(self, tmp_path):
        endpoint = write_handler(tmp_path, (
            "line = sys.stdin.readline()\n"
            "msg = json.loads(line)\n"
            "sys.stdout.write(json.dumps({'id': 1, 'type': 'query',"
            " 'op': 'alloc_block', 'order': 0}) + '\\n')\n"
            "sys.stdout.flush()\n"
            "reply = json.loads(sys.stdin.readline())\n"
            "out = {'re': msg['id'], 'type': 'fault_done',\n"
            "       'actions': [{'op': 'map', 'vpn': msg['vpn'], 'pfn': reply['pfn'],"
            " 'size': '4K'}], 'handler_cycles': 1000, 'touches': []}\n"
            "sys.stdout.write(json.dumps(out) + '\\n')\n"
            "sys.stdout.flush()\n"
        ))
        port, mm, _ = make_port()
        session = ExternalSession(endpoint, port, {}, timeout_ms=10000)
        resp = session.handle(fault(1))
        assert resp.actions == [{"op": "map", "vpn": 291, "pfn": 0, "size": "4K"}]
        assert 0 in port.owned
        session.close()

    def test_malformed_reply_is_protocol_error(self, tmp_path):
        endpoint = write_handler(tmp_path, (
            "sys.stdin.readline()\n"
            "sys.stdout.write('this is not json\\n')\n"
            "sys.stdout.flush()\n"
        ))
        port, _, _ = make_port()
        session = ExternalSession(endpoint, port, {}, timeout_ms=10000)
        with pytest.raises(ProtocolError):
            session.handle(fault(1))
        session.close()
