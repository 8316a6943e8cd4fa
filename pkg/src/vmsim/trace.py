"""Trace format: parsing, rendering, validation, and synthetic generation.

One event per ASCII line:

    M <pid> <R|W|I> <0xVA>
    A <pid> <0xBASE> <LEN> [eager|segment]
    F <pid> <0xBASE> <LEN>

LEN is decimal bytes; `#` starts a comment; blank lines are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

from .core import FRAME, LINE, VA_LIMIT, Rng, VmsimError

ACCESS_KINDS = ("R", "W", "I")
HINTS = ("none", "eager", "segment")


class MalformedLine(VmsimError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class TraceOrderError(VmsimError):
    """Strict-mode violation; carries the offending event ordinal."""

    def __init__(self, ordinal: int, reason: str):
        super().__init__(f"event {ordinal}: {reason}")
        self.ordinal = ordinal
        self.reason = reason


@dataclass(frozen=True)
class MemEvent:
    pid: int
    access: str  # R | W | I
    va: int


@dataclass(frozen=True)
class AllocEvent:
    pid: int
    base: int
    length: int
    hint: str = "none"


@dataclass(frozen=True)
class FreeEvent:
    pid: int
    base: int
    length: int


TraceEvent = MemEvent | AllocEvent | FreeEvent


def _parse_pid(token: str, line_no: int) -> int:
    if not token.isdigit() or int(token) < 1:
        raise MalformedLine(line_no, f"bad pid {token!r}")
    return int(token)


def _parse_hex(token: str, line_no: int, what: str) -> int:
    if not token.lower().startswith("0x"):
        raise MalformedLine(line_no, f"{what} must be hex (0x...): {token!r}")
    try:
        value = int(token, 16)
    except ValueError:
        raise MalformedLine(line_no, f"non-hex {what}: {token!r}") from None
    if not 0 <= value < VA_LIMIT:
        raise MalformedLine(line_no, f"{what} 0x{value:x} outside 48-bit space")
    return value


def _parse_len(token: str, line_no: int) -> int:
    if not token.isdigit():
        raise MalformedLine(line_no, f"length must be decimal bytes: {token!r}")
    return int(token)


def parse_line(line: str, line_no: int = 0) -> TraceEvent | None:
    """Decode one trace line; comments and blanks return None."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    fields = text.split()
    op = fields[0]
    if op == "M":
        if len(fields) != 4:
            raise MalformedLine(line_no, f"M takes 3 operands, got {len(fields) - 1}")
        pid = _parse_pid(fields[1], line_no)
        if fields[2] not in ACCESS_KINDS:
            raise MalformedLine(line_no, f"bad access kind {fields[2]!r}")
        return MemEvent(pid, fields[2], _parse_hex(fields[3], line_no, "address"))
    if op == "A":
        if len(fields) not in (4, 5):
            raise MalformedLine(line_no, f"A takes 3 or 4 operands, got {len(fields) - 1}")
        pid = _parse_pid(fields[1], line_no)
        base = _parse_hex(fields[2], line_no, "base")
        length = _parse_len(fields[3], line_no)
        hint = "none"
        if len(fields) == 5:
            if fields[4] not in ("eager", "segment"):
                raise MalformedLine(line_no, f"bad hint {fields[4]!r}")
            hint = fields[4]
        if base % FRAME:
            raise MalformedLine(line_no, f"alloc base 0x{base:x} not page-aligned")
        if length == 0 or length % FRAME:
            raise MalformedLine(line_no, f"alloc length {length} not a positive page multiple")
        return AllocEvent(pid, base, length, hint)
    if op == "F":
        if len(fields) != 4:
            raise MalformedLine(line_no, f"F takes 3 operands, got {len(fields) - 1}")
        pid = _parse_pid(fields[1], line_no)
        base = _parse_hex(fields[2], line_no, "base")
        length = _parse_len(fields[3], line_no)
        if base % FRAME or length == 0 or length % FRAME:
            raise MalformedLine(line_no, "free region not page-aligned")
        return FreeEvent(pid, base, length)
    raise MalformedLine(line_no, f"unknown opcode {op!r}")


def render(event: TraceEvent) -> str:
    if isinstance(event, MemEvent):
        return f"M {event.pid} {event.access} 0x{event.va:x}"
    if isinstance(event, AllocEvent):
        line = f"A {event.pid} 0x{event.base:x} {event.length}"
        return line if event.hint == "none" else f"{line} {event.hint}"
    if isinstance(event, FreeEvent):
        return f"F {event.pid} 0x{event.base:x} {event.length}"
    raise TypeError(f"not a trace event: {event!r}")


def parse_stream(lines: Iterable[str]) -> Iterator[TraceEvent]:
    for line_no, line in enumerate(lines, start=1):
        event = parse_line(line, line_no)
        if event is not None:
            yield event


def validate_stream(events: Iterable[TraceEvent], strict: bool = True) -> dict:
    """Check Alloc/Free pairing and (strict) that Mems land inside a VMA.

    Returns summary counters; raises TraceOrderError on the first violation,
    carrying the 1-based event ordinal.
    """
    vmas: dict[int, dict[int, int]] = {}
    counts = {"mem": 0, "alloc": 0, "free": 0, "wild": 0}
    for ordinal, event in enumerate(events, start=1):
        if isinstance(event, AllocEvent):
            regions = vmas.setdefault(event.pid, {})
            for base, length in regions.items():
                if event.base < base + length and base < event.base + event.length:
                    raise TraceOrderError(ordinal, "alloc overlaps an existing region")
            regions[event.base] = event.length
            counts["alloc"] += 1
        elif isinstance(event, FreeEvent):
            regions = vmas.get(event.pid, {})
            if regions.get(event.base) != event.length:
                raise TraceOrderError(ordinal, "free does not match an allocated region")
            del regions[event.base]
            counts["free"] += 1
        else:
            counts["mem"] += 1
            covered = any(
                base <= event.va < base + length
                for base, length in vmas.get(event.pid, {}).items()
            )
            if not covered:
                if strict:
                    raise TraceOrderError(ordinal, "access outside every allocated region")
                counts["wild"] += 1
    return counts


@dataclass(frozen=True)
class SyntheticSpec:
    pattern: str  # sequential | random | strided
    footprint: int
    count: int
    stride: int = LINE
    pid: int = 1
    base: int = 1 << 30

    def __post_init__(self):
        if self.pattern not in ("sequential", "random", "strided"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.footprint < FRAME:
            raise ValueError("footprint below one page")
        if self.stride % LINE:
            raise ValueError("stride must be a multiple of the access granularity")
        if self.base % FRAME:
            raise ValueError("base must be page-aligned")


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Iterator[TraceEvent]:
    """One covering Alloc, then `count` reads per the pattern (64 B grain)."""
    length = (spec.footprint + FRAME - 1) // FRAME * FRAME
    yield AllocEvent(spec.pid, spec.base, length)
    lines = spec.footprint // LINE
    rng = Rng(seed)
    for i in range(spec.count):
        if spec.pattern == "sequential":
            offset = (i * LINE) % (lines * LINE)
        elif spec.pattern == "strided":
            offset = (i * spec.stride) % (lines * LINE)
        else:
            offset = rng.below(lines) * LINE
        yield MemEvent(spec.pid, "R", spec.base + offset)
