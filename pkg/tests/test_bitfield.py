import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zmoe.bitfield import Bf16Buffer, SmChunk, decompose, measure_entropy, recompose

from conftest import SPECIAL_WORDS, random_tensor


def test_decompose_one():
    sm, shards = decompose(Bf16Buffer.from_words([0x3F80]), 1)
    assert sm.data == bytes([0x00])
    assert shards[0].data == bytes([0x7F])


def test_decompose_negative():
    # -2.5 is 1|10000000|0100000
    sm, shards = decompose(Bf16Buffer.from_words([0xC020]), 1)
    assert sm.data == bytes([0xA0])
    assert shards[0].data == bytes([0x80])


def test_recompose_inverts_examples():
    assert recompose(SmChunk(bytes([0x00])), bytes([0x7F])).words()[0] == 0x3F80
    assert recompose(SmChunk(bytes([0xA0])), bytes([0x80])).words()[0] == 0xC020


def test_balanced_shards():
    t = Bf16Buffer.from_words(range(4))
    _, shards = decompose(t, 4)
    assert [len(s.data) for s in shards] == [1, 1, 1, 1]
    _, shards = decompose(Bf16Buffer.from_words(range(10)), 4)
    assert [len(s.data) for s in shards] == [3, 3, 2, 2]


def test_shard_partition_reassembles():
    rng = np.random.default_rng(0)
    t = random_tensor(rng, 61)
    for k in range(1, 62):
        sm, shards = decompose(t, k)
        assert b"".join(s.data for s in shards) == decompose(t, 1)[1][0].data
        assert recompose(sm, b"".join(s.data for s in shards)).data == t.data


def test_sm_footprint_equals_exponent_footprint():
    rng = np.random.default_rng(1)
    t = random_tensor(rng, 100)
    sm, shards = decompose(t, 8)
    assert len(sm.data) == sum(len(s.data) for s in shards)


def test_bad_shard_counts():
    t = Bf16Buffer.from_words([1, 2, 3])
    with pytest.raises(ValueError):
        decompose(t, 0)
    with pytest.raises(ValueError):
        decompose(t, 4)


def test_recompose_length_mismatch():
    with pytest.raises(ValueError):
        recompose(SmChunk(bytes(3)), bytes(4))


def test_roundtrip_4096(rng):
    t = random_tensor(rng, 4096)
    sm, shards = decompose(t, 8)
    assert recompose(sm, b"".join(s.data for s in shards)).data == t.data


@settings(max_examples=200, deadline=None)
@given(
    words=st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=64),
    k=st.integers(1, 8),
)
def test_roundtrip_property(words, k):
    words = words + SPECIAL_WORDS
    t = Bf16Buffer.from_words(words)
    k = min(k, t.count)
    sm, shards = decompose(t, k)
    assert recompose(sm, b"".join(s.data for s in shards)).data == t.data


def test_entropy_uniform():
    assert measure_entropy(bytes(range(256))) == pytest.approx(8.0)


def test_entropy_constant():
    assert measure_entropy(bytes(500)) == 0.0


def test_entropy_three_symbols():
    data = bytes([7] * 2 + [9] * 1 + [11] * 1)
    assert measure_entropy(data) == pytest.approx(1.5)


def test_entropy_empty_rejected():
    with pytest.raises(ValueError):
        measure_entropy(b"")


def test_entropy_permutation_invariant(rng):
    data = rng.integers(0, 16, 4096).astype(np.uint8)
    shuffled = data.copy()
    rng.shuffle(shuffled)
    assert measure_entropy(data.tobytes()) == pytest.approx(
        measure_entropy(shuffled.tobytes()), abs=1e-12
    )


def test_odd_byte_payload_rejected():
    with pytest.raises(ValueError):
        Bf16Buffer(b"\x00\x01\x02")
