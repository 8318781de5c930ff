import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedpc.arith import AdaptiveBinaryDecoder, AdaptiveBinaryEncoder
from seedpc.errors import DecodeError, InvalidArgument


def roundtrip(bits, ctxs, n_ctx):
    enc = AdaptiveBinaryEncoder(n_ctx)
    enc.encode_bits(bits, ctxs)
    blob = enc.finish()
    dec = AdaptiveBinaryDecoder(blob, n_ctx)
    return blob, dec.decode_bits(ctxs)


def test_empty_stream():
    enc = AdaptiveBinaryEncoder(1)
    blob = enc.finish()
    dec = AdaptiveBinaryDecoder(blob, 1)
    assert dec.decode_bits(np.empty(0, np.int32)).size == 0


def test_single_bit():
    for bit in (0, 1):
        _, out = roundtrip(np.array([bit], np.uint8), np.array([0]), 1)
        assert out.tolist() == [bit]


def test_alternating_pattern():
    bits = np.tile([0, 1], 500).astype(np.uint8)
    ctxs = np.zeros(1000, np.int32)
    _, out = roundtrip(bits, ctxs, 1)
    assert np.array_equal(out, bits)


def test_multi_context_roundtrip():
    rng = np.random.default_rng(0)
    bits = (rng.random(5000) < 0.3).astype(np.uint8)
    ctxs = rng.integers(0, 17, size=5000).astype(np.int32)
    _, out = roundtrip(bits, ctxs, 17)
    assert np.array_equal(out, bits)


def test_deterministic_payload():
    rng = np.random.default_rng(1)
    bits = (rng.random(2000) < 0.8).astype(np.uint8)
    ctxs = rng.integers(0, 5, size=2000).astype(np.int32)
    a, _ = roundtrip(bits.copy(), ctxs.copy(), 5)
    b, _ = roundtrip(bits, ctxs, 5)
    assert a == b


@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=1, max_value=6))
@settings(max_examples=40, deadline=None)
def test_roundtrip_property(seed, n_ctx):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 800))
    p = rng.random()
    bits = (rng.random(n) < p).astype(np.uint8)
    ctxs = rng.integers(0, n_ctx, size=n).astype(np.int32)
    _, out = roundtrip(bits, ctxs, n_ctx)
    assert np.array_equal(out, bits)


def test_interleaved_streams_roundtrip():
    # bits, a unary block, byte-tree values, then more bits — the payload
    # layout the octree coder actually uses
    rng = np.random.default_rng(2)
    bits1 = (rng.random(300) < 0.5).astype(np.uint8)
    counts = rng.integers(1, 6, size=40)
    values = rng.integers(0, 256, size=64)
    bases = np.zeros(64, np.int64) + 4
    bits2 = (rng.random(100) < 0.9).astype(np.uint8)

    enc = AdaptiveBinaryEncoder(4 + 255)
    enc.encode_bits(bits1, np.full(300, 1, np.int32))
    enc.encode_unary(counts, 2)
    enc.encode_bytes_tree(values, bases)
    enc.encode_bits(bits2, np.full(100, 3, np.int32))
    blob = enc.finish()

    dec = AdaptiveBinaryDecoder(blob, 4 + 255)
    assert np.array_equal(dec.decode_bits(np.full(300, 1, np.int32)), bits1)
    assert np.array_equal(dec.decode_unary(2, 40), counts)
    assert np.array_equal(dec.decode_bytes_tree(bases), values)
    assert np.array_equal(dec.decode_bits(np.full(100, 3, np.int32)), bits2)


def test_unary_cap_raises():
    enc = AdaptiveBinaryEncoder(1)
    enc.encode_bits(np.ones(200, np.uint8), np.zeros(200, np.int32))
    blob = enc.finish()
    dec = AdaptiveBinaryDecoder(blob, 1)
    with pytest.raises(DecodeError):
        dec.decode_unary(0, 1, cap=50)


def test_context_validation():
    enc = AdaptiveBinaryEncoder(2)
    with pytest.raises(InvalidArgument):
        enc.encode_bits(np.array([1], np.uint8), np.array([2], np.int32))
    with pytest.raises(InvalidArgument):
        enc.encode_bits(np.array([1], np.uint8), np.array([-1], np.int32))
    with pytest.raises(InvalidArgument):
        enc.encode_bits(np.array([2], np.uint8), np.array([0], np.int32))
    with pytest.raises(InvalidArgument):
        AdaptiveBinaryEncoder(0)


def test_double_finish_rejected():
    enc = AdaptiveBinaryEncoder(1)
    enc.finish()
    with pytest.raises(InvalidArgument):
        enc.finish()


def test_skewed_stream_near_entropy():
    # 10,000 bits at p(1) = 0.99 under one adapting context
    rng = np.random.default_rng(3)
    bits = (rng.random(10_000) < 0.99).astype(np.uint8)
    ctxs = np.zeros(10_000, np.int32)
    blob, out = roundtrip(bits, ctxs, 1)
    assert np.array_equal(out, bits)
    h = -(0.99 * math.log2(0.99) + 0.01 * math.log2(0.01))
    shannon = 10_000 * h  # about 808 bits
    assert len(blob) * 8 <= 1.25 * shannon + 64


def test_adaptation_beats_static_midpoint():
    # An adaptive model on heavily biased data must beat 1 bit/symbol by a lot.
    rng = np.random.default_rng(4)
    bits = (rng.random(4000) < 0.95).astype(np.uint8)
    blob, _ = roundtrip(bits, np.zeros(4000, np.int32), 1)
    assert len(blob) * 8 < 0.5 * 4000
