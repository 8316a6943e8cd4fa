"""Address arithmetic, page sizes, and the deterministic hash/RNG primitive.

Everything stochastic or hashed in the simulator funnels through splitmix64
so that identical seeds reproduce identical runs bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

MASK64 = (1 << 64) - 1

VA_BITS = 48
VA_LIMIT = 1 << VA_BITS

FRAME = 4096
LINE = 64

PAGE_4K = 4096
PAGE_2M = 512 * PAGE_4K
PAGE_1G = 512 * PAGE_2M

# Canonical short names used in configs, traces, the wire protocol and reports.
PAGE_SIZES = {"4K": PAGE_4K, "2M": PAGE_2M, "1G": PAGE_1G}
SIZE_NAMES = {PAGE_4K: "4K", PAGE_2M: "2M", PAGE_1G: "1G"}

_GOLDEN = 0x9E3779B97F4A7C15


class VmsimError(Exception):
    """Base class for all simulator errors."""


def check_va(va: int) -> int:
    if not 0 <= va < VA_LIMIT:
        raise ValueError(f"virtual address 0x{va:x} outside 48-bit space")
    return va


def split_radix_indices(va: int) -> tuple[int, int, int, int, int]:
    """Slice a 48-bit VA into the four 9-bit table indices plus page offset."""
    check_va(va)
    return (
        (va >> 39) & 0x1FF,
        (va >> 30) & 0x1FF,
        (va >> 21) & 0x1FF,
        (va >> 12) & 0x1FF,
        va & 0xFFF,
    )


def join_radix_indices(i4: int, i3: int, i2: int, i1: int, offset: int) -> int:
    return (i4 << 39) | (i3 << 30) | (i2 << 21) | (i1 << 12) | offset


def vpn_of(va: int, size: int) -> int:
    return va // size


def mix64(x: int) -> int:
    """First output of the splitmix64 stream seeded with x."""
    z = (x + _GOLDEN) & MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z


def rng_next(state: int) -> tuple[int, int]:
    """Advance the splitmix64 stream; returns (value, next_state)."""
    next_state = (state + _GOLDEN) & MASK64
    z = next_state
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z, next_state


class Rng:
    """Stateful wrapper over rng_next for sequential draws."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        value, self.state = rng_next(self.state)
        return value

    def below(self, n: int) -> int:
        """Uniform-ish draw in [0, n); modulo bias is acceptable at our n."""
        return self.next_u64() % n


@dataclass
class Pte:
    """A resolved translation target; pfn is always in 4 KiB frame units."""

    pfn: int
    present: bool = True
    size: int = PAGE_4K
    writable: bool = True
    accessed: bool = False
    dirty: bool = False

    def __post_init__(self):
        if self.present and self.size == PAGE_2M and self.pfn % 512:
            raise ValueError(f"2M pte pfn {self.pfn} not aligned to 512 frames")
