import os

from hypothesis import given
from hypothesis import strategies as st

from vmsim.core import (
    MASK64,
    Pte,
    Rng,
    join_radix_indices,
    mix64,
    rng_next,
    split_radix_indices,
    vpn_of,
)

GOLDEN_PATH = os.path.join(os.path.dirname(__file__), "golden", "rng_seed42.txt")

M = (1 << 64) - 1


def oracle_stream(seed, n):
    """Independent splitmix64 transcription; the reference for all RNG tests."""
    state = seed
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & M
        z = state
        z ^= z >> 30
        z = (z * 0xBF58476D1CE4E5B9) & M
        z ^= z >> 27
        z = (z * 0x94D049BB133111EB) & M
        z ^= z >> 31
        out.append(z)
    return out


class TestSplitIndices:
    def test_zero(self):
        assert split_radix_indices(0) == (0, 0, 0, 0, 0)

    def test_composed(self):
        va = (1 << 39) + (2 << 30) + (3 << 21) + (4 << 12) + 5
        assert split_radix_indices(va) == (1, 2, 3, 4, 5)

    def test_all_ones(self):
        assert split_radix_indices(0xFFFFFFFFFFFF) == (511, 511, 511, 511, 4095)

    @given(st.integers(min_value=0, max_value=(1 << 48) - 1))
    def test_round_trip(self, va):
        assert join_radix_indices(*split_radix_indices(va)) == va


class TestVpnOf:
    def test_4k(self):
        assert vpn_of(0x1000, 4096) == 1

    def test_2m_below_boundary(self):
        assert vpn_of(0x1FFFFF, 2 << 20) == 0
        assert vpn_of(0x3FFFFF, 2 << 20) == 1  # plain integer division

    def test_1g(self):
        assert vpn_of(0x40000000, 1 << 30) == 1

    @given(
        st.integers(min_value=0, max_value=(1 << 48) - 1),
        st.sampled_from([4096, 2 << 20, 1 << 30]),
    )
    def test_bounds(self, va, size):
        vpn = vpn_of(va, size)
        assert vpn * size <= va < (vpn + 1) * size


class TestMix64:
    def test_seed_zero_reference(self):
        assert mix64(0) == 0xE220A8397B1DCDAF

    def test_pure(self):
        assert mix64(12345) == mix64(12345)

    def test_seed_one_matches_oracle_and_differs(self):
        assert mix64(1) == oracle_stream(1, 1)[0]
        assert mix64(1) != mix64(0)


class TestRngNext:
    def test_first_step_from_zero(self):
        value, state = rng_next(0)
        assert value == 0xE220A8397B1DCDAF
        assert state == 0x9E3779B97F4A7C15

    def test_deterministic(self):
        assert rng_next(99) == rng_next(99)

    def test_stream_matches_oracle(self):
        rng = Rng(7)
        assert [rng.next_u64() for _ in range(100)] == oracle_stream(7, 100)

    def test_golden_file_seed42(self):
        with open(GOLDEN_PATH) as fh:
            expected = [int(line, 16) for line in fh]
        rng = Rng(42)
        assert [rng.next_u64() for _ in range(64)] == expected

    def test_mean_of_million_draws(self):
        rng = Rng(2024)
        total = sum(rng.next_u64() for _ in range(1_000_000))
        mean = total / 1_000_000 / 2**64
        assert 0.499 <= mean <= 0.501

    @given(st.integers(min_value=0, max_value=MASK64))
    def test_value_is_finalized_next_state(self, state):
        value, nxt = rng_next(state)
        assert nxt == (state + 0x9E3779B97F4A7C15) & MASK64
        assert value == mix64(state)


class TestPte:
    def test_2m_alignment_enforced(self):
        Pte(pfn=512, size=2 << 20)
        try:
            Pte(pfn=5, size=2 << 20)
        except ValueError:
            pass
        else:
            raise AssertionError("unaligned 2M pte accepted")
