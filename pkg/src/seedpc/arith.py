"""Adaptive binary arithmetic coding on 32-bit carry-less ranges.

Per-context bit counts start at (1, 1), grow by 1 per coded bit, and halve
(floored at 1) when their sum reaches 2^15, so probabilities adapt and the
range split always stays valid.  Renormalization follows the classic
E1/E2/E3 scheme with pending-bit carry resolution; ``finish`` spends one
disambiguation bit plus pending, and the decoder primes 32 bits, so total
termination overhead stays under 64 bits.

Encoders buffer (bit, context) pairs and run one compiled pass in
``finish``; decoders hold compiled state so callers can interleave batch,
unary, and byte-tree reads as the stream structure unfolds.
"""

from __future__ import annotations

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

from .errors import DecodeError, InvalidArgument

__all__ = ["AdaptiveBinaryEncoder", "AdaptiveBinaryDecoder"]

_MAX = (1 << 32) - 1
_HALF = 1 << 31
_QUARTER = 1 << 30
_THREE_Q = 3 << 30
_RESCALE = 1 << 15

# The split is an exact floor division (range * c0) // total.  A 64-bit
# divide sits on the per-bit dependency chain, so instead multiply by a
# precomputed reciprocal floor(2^64 / total) and take the high 64 product
# bits: the estimate floor(a*M / 2^64) = floor(a/total - a*(2^64 mod
# total)/(total*2^64)) undershoots by less than 2^-17 for a < 2^47, so it
# is at most one below the true quotient; the fixup loops make the result
# exact regardless.
def _recip_table() -> np.ndarray:
    # floor(2^64/t) == floor((2^64-1)/t) unless t is a power of two, in
    # which case it is one more; totals start at 2 so slots 0..1 are unused.
    t = np.arange(2, _RESCALE, dtype=np.uint64)
    m = np.uint64(0xFFFFFFFFFFFFFFFF) // t + ((t & (t - np.uint64(1))) == 0)
    table = np.zeros(_RESCALE, np.uint64)
    table[2:] = m
    return table


_RECIP = _recip_table()


@intrinsic
def _umulhi(typingctx, a, b):
    """High 64 bits of the full 128-bit product of two uint64 values."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        return builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))

    return sig, codegen


@njit(cache=True)
def _encode_core(bits, ctxs, n_ctx, recip):
    c0 = np.ones(n_ctx, np.int64)
    c1 = np.ones(n_ctx, np.int64)
    low = np.int64(0)
    high = np.int64(_MAX)
    pending = np.int64(0)
    # Strict worst case: the coarsest context probability is 2^-15 and the
    # integer split can cost one extra doubling, so one symbol renormalizes
    # at most 17 times (one output or pending bit each); pending bits are
    # emitted one-for-one later.  Finish adds < 64 bits.
    out = np.empty((17 * bits.shape[0] + 192) // 8, np.uint8)
    nbytes = 0
    acc = np.int64(0)  # partial output byte, MSB first
    nacc = 0
    for i in range(bits.shape[0]):
        ctx = ctxs[i]
        n0 = c0[ctx]
        n1 = c1[ctx]
        total = n0 + n1
        a = (high - low + 1) * n0
        q = np.int64(_umulhi(np.uint64(a), recip[total]))
        r = a - q * total
        while r >= total:
            q += 1
            r -= total
        split = low + q - 1
        if bits[i] == 0:
            high = split
            n0 += 1
            c0[ctx] = n0
        else:
            low = split + 1
            n1 += 1
            c1[ctx] = n1
        if n0 + n1 >= _RESCALE:
            c0[ctx] = (n0 + 1) >> 1
            c1[ctx] = (n1 + 1) >> 1
        while True:
            if high < _HALF:
                emit = np.int64(0)
            elif low >= _HALF:
                emit = np.int64(1)
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _THREE_Q:
                pending += 1
                low = low * 2 - _HALF
                high = high * 2 + 1 - _HALF
                continue
            else:
                break
            acc = acc * 2 + emit
            nacc += 1
            if nacc == 8:
                out[nbytes] = acc
                nbytes += 1
                acc = 0
                nacc = 0
            if pending > 0:
                inv_bit = 1 - emit
                for _ in range(pending):
                    acc = acc * 2 + inv_bit
                    nacc += 1
                    if nacc == 8:
                        out[nbytes] = acc
                        nbytes += 1
                        acc = 0
                        nacc = 0
                pending = 0
            low = low * 2
            high = high * 2 + 1
    # Disambiguate the final interval with one bit plus the pending run.
    pending += 1
    first = np.int64(0) if low < _QUARTER else np.int64(1)
    acc = acc * 2 + first
    nacc += 1
    if nacc == 8:
        out[nbytes] = acc
        nbytes += 1
        acc = 0
        nacc = 0
    for _ in range(pending):
        acc = acc * 2 + (1 - first)
        nacc += 1
        if nacc == 8:
            out[nbytes] = acc
            nbytes += 1
            acc = 0
            nacc = 0
    if nacc > 0:
        out[nbytes] = acc << (8 - nacc)
        nbytes += 1
    return out[:nbytes]


# The three decode kernels repeat one per-bit block (split, update, E1/E2/E3
# renormalization) with the coder state held in locals: per-bit array traffic
# on a shared state vector costs more than the arithmetic itself.  Reads come
# from a pre-unpacked bit buffer; past its end they return 0.


@njit(cache=True)
def _decoder_start(bitbuf):
    st = np.zeros(4, np.int64)
    st[1] = _MAX
    code = np.int64(0)
    pos = np.int64(0)
    nbits = bitbuf.shape[0]
    for _ in range(32):
        b = np.int64(bitbuf[pos]) if pos < nbits else np.int64(0)
        code = code * 2 + b
        pos += 1
    st[2] = code
    st[3] = pos
    return st


@njit(cache=True)
def _decode_batch(bitbuf, st, c0, c1, ctxs, recip):
    low, high, code, pos = st[0], st[1], st[2], st[3]
    nbits = bitbuf.shape[0]
    out = np.empty(ctxs.shape[0], np.uint8)
    for i in range(ctxs.shape[0]):
        ctx = ctxs[i]
        n0 = c0[ctx]
        n1 = c1[ctx]
        total = n0 + n1
        a = (high - low + 1) * n0
        q = np.int64(_umulhi(np.uint64(a), recip[total]))
        r = a - q * total
        while r >= total:
            q += 1
            r -= total
        split = low + q - 1
        if code <= split:
            out[i] = 0
            high = split
            n0 += 1
            c0[ctx] = n0
        else:
            out[i] = 1
            low = split + 1
            n1 += 1
            c1[ctx] = n1
        if n0 + n1 >= _RESCALE:
            c0[ctx] = (n0 + 1) >> 1
            c1[ctx] = (n1 + 1) >> 1
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                code -= _HALF
            elif low >= _QUARTER and high < _THREE_Q:
                low -= _QUARTER
                high -= _QUARTER
                code -= _QUARTER
            else:
                break
            low = low * 2
            high = high * 2 + 1
            code = code * 2
            if pos < nbits:
                code += bitbuf[pos]
            pos += 1
    st[0], st[1], st[2], st[3] = low, high, code, pos
    return out


@njit(cache=True)
def _decode_unary(bitbuf, st, c0, c1, ctx, n, cap, recip):
    low, high, code, pos = st[0], st[1], st[2], st[3]
    nbits = bitbuf.shape[0]
    out = np.empty(n, np.int64)
    bad = False
    for i in range(n):
        count = np.int64(0)
        while True:
            n0 = c0[ctx]
            n1 = c1[ctx]
            total = n0 + n1
            a = (high - low + 1) * n0
            q = np.int64(_umulhi(np.uint64(a), recip[total]))
            r = a - q * total
            while r >= total:
                q += 1
                r -= total
            split = low + q - 1
            if code <= split:
                bit = 0
                high = split
                n0 += 1
                c0[ctx] = n0
            else:
                bit = 1
                low = split + 1
                n1 += 1
                c1[ctx] = n1
            if n0 + n1 >= _RESCALE:
                c0[ctx] = (n0 + 1) >> 1
                c1[ctx] = (n1 + 1) >> 1
            while True:
                if high < _HALF:
                    pass
                elif low >= _HALF:
                    low -= _HALF
                    high -= _HALF
                    code -= _HALF
                elif low >= _QUARTER and high < _THREE_Q:
                    low -= _QUARTER
                    high -= _QUARTER
                    code -= _QUARTER
                else:
                    break
                low = low * 2
                high = high * 2 + 1
                code = code * 2
                if pos < nbits:
                    code += bitbuf[pos]
                pos += 1
            count += 1
            if bit == 0:
                break
            if count > cap:
                bad = True
                break
        if bad:
            break
        out[i] = count
    st[0], st[1], st[2], st[3] = low, high, code, pos
    if bad:
        return out[:0]  # signals corruption to the caller
    return out


@njit(cache=True)
def _decode_bytes_tree(bitbuf, st, c0, c1, bases, n, recip):
    """n values from 256-ary alphabets binarized as 255-node context trees."""
    low, high, code, pos = st[0], st[1], st[2], st[3]
    nbits = bitbuf.shape[0]
    out = np.empty(n, np.int64)
    for i in range(n):
        node = np.int64(1)
        base = bases[i]
        for _ in range(8):
            ctx = base + node - 1
            n0 = c0[ctx]
            n1 = c1[ctx]
            total = n0 + n1
            a = (high - low + 1) * n0
            q = np.int64(_umulhi(np.uint64(a), recip[total]))
            r = a - q * total
            while r >= total:
                q += 1
                r -= total
            split = low + q - 1
            if code <= split:
                bit = np.int64(0)
                high = split
                n0 += 1
                c0[ctx] = n0
            else:
                bit = np.int64(1)
                low = split + 1
                n1 += 1
                c1[ctx] = n1
            if n0 + n1 >= _RESCALE:
                c0[ctx] = (n0 + 1) >> 1
                c1[ctx] = (n1 + 1) >> 1
            while True:
                if high < _HALF:
                    pass
                elif low >= _HALF:
                    low -= _HALF
                    high -= _HALF
                    code -= _HALF
                elif low >= _QUARTER and high < _THREE_Q:
                    low -= _QUARTER
                    high -= _QUARTER
                    code -= _QUARTER
                else:
                    break
                low = low * 2
                high = high * 2 + 1
                code = code * 2
                if pos < nbits:
                    code += bitbuf[pos]
                pos += 1
            node = node * 2 + bit
        out[i] = node - 256
    st[0], st[1], st[2], st[3] = low, high, code, pos
    return out


class AdaptiveBinaryEncoder:
    """Collects (bit, context) pairs; ``finish`` emits the coded bytes."""

    def __init__(self, n_contexts: int):
        if n_contexts < 1:
            raise InvalidArgument("need at least one context")
        self.n_contexts = int(n_contexts)
        self._bits: list[np.ndarray] = []
        self._ctxs: list[np.ndarray] = []
        self._done = False

    def encode_bits(self, bits, ctxs) -> None:
        if self._done:
            raise InvalidArgument("encoder already finished")
        bits = np.ascontiguousarray(bits, dtype=np.uint8).ravel()
        ctxs = np.ascontiguousarray(ctxs, dtype=np.int32).ravel()
        if bits.shape != ctxs.shape:
            raise InvalidArgument("bits and ctxs must have the same length")
        if bits.size and (ctxs.min() < 0 or ctxs.max() >= self.n_contexts):
            raise InvalidArgument("context id out of range")
        if np.any(bits > 1):
            raise InvalidArgument("bits must be 0 or 1")
        self._bits.append(bits)
        self._ctxs.append(ctxs)

    def encode_unary(self, counts, ctx: int) -> None:
        """count >= 1 per slot as (count-1) ones then a zero, one context."""
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size and counts.min() < 1:
            raise InvalidArgument("unary counts must be >= 1")
        total = int(counts.sum())
        bits = np.ones(total, dtype=np.uint8)
        bits[np.cumsum(counts) - 1] = 0
        self.encode_bits(bits, np.full(total, ctx, dtype=np.int32))

    def encode_bytes_tree(self, values, bases) -> None:
        """Binarize byte values over per-value 255-node context trees."""
        values = np.asarray(values, dtype=np.int64)
        bases = np.asarray(bases, dtype=np.int64)
        if values.size and (values.min() < 0 or values.max() > 255):
            raise InvalidArgument("tree-coded values must fit a byte")
        shifts = np.arange(7, -1, -1)
        bits = ((values[:, None] >> shifts) & 1).astype(np.uint8)
        # Context node after consuming i bits is 2^i + (value >> (8 - i)).
        i = np.arange(8)
        nodes = (1 << i)[None, :] + (values[:, None] >> (8 - i)[None, :])
        self.encode_bits(bits.ravel(), (bases[:, None] + nodes - 1).ravel())

    def finish(self) -> bytes:
        if self._done:
            raise InvalidArgument("encoder already finished")
        self._done = True
        bits = np.concatenate(self._bits) if self._bits else np.empty(0, np.uint8)
        ctxs = np.concatenate(self._ctxs) if self._ctxs else np.empty(0, np.int32)
        return _encode_core(bits, ctxs, self.n_contexts, _RECIP).tobytes()


class AdaptiveBinaryDecoder:
    """Mirror of the encoder; reads interleave as the caller directs."""

    def __init__(self, data: bytes, n_contexts: int):
        self.data = np.frombuffer(data, dtype=np.uint8)
        self.n_contexts = int(n_contexts)
        self._bitbuf = np.unpackbits(self.data)
        self._c0 = np.ones(n_contexts, np.int64)
        self._c1 = np.ones(n_contexts, np.int64)
        self._st = _decoder_start(self._bitbuf)

    @property
    def bit_position(self) -> int:
        return int(self._st[3])

    def decode_bits(self, ctxs) -> np.ndarray:
        ctxs = np.ascontiguousarray(ctxs, dtype=np.int32).ravel()
        if ctxs.size and (ctxs.min() < 0 or ctxs.max() >= self.n_contexts):
            raise InvalidArgument("context id out of range")
        return _decode_batch(self._bitbuf, self._st, self._c0, self._c1, ctxs, _RECIP)

    def decode_unary(self, ctx: int, n: int, cap: int = 1 << 20) -> np.ndarray:
        out = _decode_unary(self._bitbuf, self._st, self._c0, self._c1, ctx, n, cap, _RECIP)
        if out.size != n:
            raise DecodeError("unary run exceeds sanity cap", offset=self.bit_position // 8)
        return out

    def decode_bytes_tree(self, bases) -> np.ndarray:
        bases = np.ascontiguousarray(bases, dtype=np.int64)
        return _decode_bytes_tree(self._bitbuf, self._st, self._c0, self._c1, bases, bases.size, _RECIP)
