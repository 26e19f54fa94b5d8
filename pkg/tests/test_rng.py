import numpy as np
from hypothesis import given, strategies as st

from oracles import splitmix64
from retina_bench.rng import SplitMix64, splitmix64_block


def test_reference_vector_seed_1234567():
    expected = [6457827717110365317, 3203168211198807973, 9817491932198370423,
                4593380528125082431, 16408922859458223821]
    g = SplitMix64(1234567)
    assert [g.next_u64() for _ in range(5)] == expected
    assert splitmix64_block(1234567, 5).tolist() == expected


def test_seed_zero_first_output():
    assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 40), st.integers(1, 20))
def test_block_matches_scalar_oracle(seed, start, n):
    ref = splitmix64(seed, start + n)[start:]
    assert splitmix64_block(seed, n, start=start).tolist() == ref


@given(st.integers(0, 2 ** 64 - 1))
def test_uniform_in_unit_interval(seed):
    g = SplitMix64(seed)
    vals = [g.uniform() for _ in range(50)]
    assert all(0.0 <= v < 1.0 for v in vals)


@given(st.integers(0, 2 ** 32), st.integers(-5, 5), st.integers(0, 10))
def test_randint_is_inclusive_range(seed, lo, span):
    g = SplitMix64(seed)
    vals = {g.randint(lo, lo + span) for _ in range(200)}
    assert min(vals) >= lo and max(vals) <= lo + span
    if span <= 2:
        assert vals == set(range(lo, lo + span + 1))


def test_block_dtype():
    assert splitmix64_block(7, 3).dtype == np.uint64
