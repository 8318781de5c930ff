"""Seed bitstream codec (.spcz).

Layout (little-endian):

    magic "SPC1" | version u8 | level u8 | flags u8 | geo_bits u8 |
    color_bits u8 | reserved u8 | scales 4 x f32 (center xyz, radius) |
    cell_ns level^3 bytes | payload_len u32 | payload

giving a header of exactly 30 + level^3 bytes.  flags bit0 marks colors
present.  cell_ns holds per-cell sampling round counts in canonical cell
order (0 for empty cells, clamped to 255).

The payload is one arithmetic-coded stream: octree occupancy bytes of the
quantized seed cells breadth-first (context = depth bucket x child slot),
then per-leaf duplicate counts (unary, one context), then per-seed color
indexes in canonical leaf order as channel deltas from the previous seed
(256-symbol tree-binarized model per channel).  Decoding restores seeds
sorted in canonical leaf order, positioned at grid cell centers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .arith import AdaptiveBinaryEncoder, AdaptiveBinaryDecoder
from .errors import DecodeError, InvalidArgument, UnsupportedStream
from .patching import MAX_LEVEL
from .pointset import NormalizationScale

__all__ = [
    "QuantizedSeeds",
    "DecodedStream",
    "MAGIC",
    "VERSION",
    "quantize_seeds",
    "dequantize_seeds",
    "encode_stream",
    "decode_stream",
    "measure_bits",
]

MAGIC = b"SPC1"
VERSION = 1
MAX_GEO_BITS = 21  # 3 * 21 Morton bits fit an int64 key

# Context map: 16 depth buckets x 8 child slots, one unary slot, then
# three 255-node color trees.
_CTX_OCCUPANCY = 0
_CTX_UNARY = 128
_CTX_COLOR = 129
_N_CONTEXTS = _CTX_COLOR + 3 * 255

_COUNT_CAP = 1 << 20  # per-leaf duplicate sanity bound while decoding
_NODE_CAP = 1 << 24  # per-level node sanity bound while decoding


@dataclass(frozen=True)
class QuantizedSeeds:
    """Integer grid coordinates of seeds: geometry in [0, 2^q)^3, colors in [0, 2^cb)^3."""

    geo: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        geo = np.asarray(self.geo, dtype=np.int64)
        color = np.asarray(self.color, dtype=np.int64)
        if geo.ndim != 2 or geo.shape[1] != 3 or color.shape != geo.shape:
            raise InvalidArgument("quantized seeds need matching (K, 3) int arrays")
        geo.setflags(write=False)
        color.setflags(write=False)
        object.__setattr__(self, "geo", geo)
        object.__setattr__(self, "color", color)


def _check_bits(geo_bits: int, color_bits: int):
    if not 1 <= geo_bits <= MAX_GEO_BITS:
        raise InvalidArgument(f"geo_bits must be in [1, {MAX_GEO_BITS}], got {geo_bits}")
    if not 1 <= color_bits <= 8:
        raise InvalidArgument(f"color_bits must be in [1, 8], got {color_bits}")


def quantize_seeds(seeds: np.ndarray, geo_bits: int = 12, color_bits: int = 8) -> QuantizedSeeds:
    """Uniform mid-rise quantization of (K, 6) rows onto the coding grid.

    Positions map [-1, 1] onto [0, 2^q) by idx = floor((x+1)/2 * 2^q)
    clamped into range; colors map [0, 1] likewise onto [0, 2^cb).
    """
    _check_bits(geo_bits, color_bits)
    rows = np.asarray(seeds, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 6 or rows.shape[0] < 1:
        raise InvalidArgument("seeds must be a non-empty (K, 6) array")
    gscale = float(1 << geo_bits)
    geo = np.floor((rows[:, :3] + 1.0) / 2.0 * gscale).astype(np.int64)
    geo = np.clip(geo, 0, (1 << geo_bits) - 1)
    cscale = float(1 << color_bits)
    color = np.floor(rows[:, 3:] * cscale).astype(np.int64)
    color = np.clip(color, 0, (1 << color_bits) - 1)
    return QuantizedSeeds(geo, color)


def dequantize_seeds(qs: QuantizedSeeds, geo_bits: int = 12, color_bits: int = 8) -> np.ndarray:
    """Map grid indexes back to cell-center rows in [-1, 1]^3 x [0, 1]^3."""
    _check_bits(geo_bits, color_bits)
    geo = (qs.geo + 0.5) / float(1 << geo_bits) * 2.0 - 1.0
    color = (qs.color + 0.5) / float(1 << color_bits)
    return np.hstack([geo, color])


# ---------------------------------------------------------------------------
# Morton keys
# ---------------------------------------------------------------------------

_SPREAD = (
    (32, np.uint64(0x1F00000000FFFF)),
    (16, np.uint64(0x1F0000FF0000FF)),
    (8, np.uint64(0x100F00F00F00F00F)),
    (4, np.uint64(0x10C30C30C30C30C3)),
    (2, np.uint64(0x1249249249249249)),
)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    for shift, mask in _SPREAD:
        v = (v | (v << np.uint64(shift))) & mask
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def _morton_encode(geo: np.ndarray) -> np.ndarray:
    x = _spread_bits(geo[:, 0])
    y = _spread_bits(geo[:, 1])
    z = _spread_bits(geo[:, 2])
    return (x | (y << np.uint64(1)) | (z << np.uint64(2))).astype(np.int64)


def _morton_decode(codes: np.ndarray) -> np.ndarray:
    c = codes.astype(np.uint64)
    x = _compact_bits(c)
    y = _compact_bits(c >> np.uint64(1))
    z = _compact_bits(c >> np.uint64(2))
    return np.stack([x, y, z], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Payload
# ---------------------------------------------------------------------------


def _occupancy_ctxs(depth: int, n_nodes: int) -> np.ndarray:
    bucket = min(depth, 15)
    base = _CTX_OCCUPANCY + bucket * 8
    return np.tile(np.arange(base, base + 8, dtype=np.int64), n_nodes)


def _encode_payload(qs: QuantizedSeeds, geo_bits: int, color_bits: int, with_colors: bool) -> bytes:
    codes = _morton_encode(qs.geo)
    order = np.lexsort((qs.color[:, 2], qs.color[:, 1], qs.color[:, 0], codes))
    codes = codes[order]
    colors = qs.color[order]

    leaves, counts = np.unique(codes, return_counts=True)
    enc = AdaptiveBinaryEncoder(_N_CONTEXTS)
    for depth in range(geo_bits):
        parent_shift = 3 * (geo_bits - depth)
        parents = leaves >> parent_shift
        child = (leaves >> (parent_shift - 3)) & 7
        starts = np.concatenate([[0], np.flatnonzero(np.diff(parents)) + 1])
        masks = np.bitwise_or.reduceat(1 << child, starts)
        bits = ((masks[:, None] >> np.arange(8)) & 1).astype(np.uint8)
        enc.encode_bits(bits.ravel(), _occupancy_ctxs(depth, masks.shape[0]))
    enc.encode_unary(counts, _CTX_UNARY)
    if with_colors:
        deltas = np.diff(colors, axis=0, prepend=np.zeros((1, 3), np.int64)) % 256
        bases = np.tile(_CTX_COLOR + 255 * np.arange(3, dtype=np.int64), colors.shape[0])
        enc.encode_bytes_tree(deltas.ravel(), bases)
    return enc.finish()


def _decode_payload(payload: bytes, geo_bits: int, color_bits: int, with_colors: bool) -> QuantizedSeeds:
    dec = AdaptiveBinaryDecoder(payload, _N_CONTEXTS)
    keys = np.zeros(1, dtype=np.int64)
    for depth in range(geo_bits):
        bits = dec.decode_bits(_occupancy_ctxs(depth, keys.shape[0]))
        picks = bits.reshape(-1, 8).astype(bool)
        if not picks.any(axis=1).all():
            raise DecodeError(
                "octree node with empty occupancy byte", offset=dec.bit_position // 8
            )
        children = keys[:, None] * 8 + np.arange(8, dtype=np.int64)
        keys = children[picks]
        if keys.shape[0] > _NODE_CAP:
            raise DecodeError("octree node count exceeds sanity cap", offset=dec.bit_position // 8)
    counts = dec.decode_unary(_CTX_UNARY, keys.shape[0], cap=_COUNT_CAP)
    total = int(counts.sum())
    geo = np.repeat(_morton_decode(keys), counts, axis=0)
    if with_colors:
        bases = np.tile(_CTX_COLOR + 255 * np.arange(3, dtype=np.int64), total)
        deltas = dec.decode_bytes_tree(bases).reshape(total, 3)
        color = np.cumsum(deltas, axis=0) % 256
        if color.size and color.max() >= (1 << color_bits):
            raise DecodeError(
                f"color index exceeds {color_bits}-bit range", offset=dec.bit_position // 8
            )
    else:
        color = np.full((total, 3), (1 << color_bits) - 1, dtype=np.int64)
    return QuantizedSeeds(geo, color)


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sBBBBBB")  # magic, version, level, flags, geo_bits, color_bits, reserved
_SCALES = struct.Struct("<4f")
_PAYLEN = struct.Struct("<I")


@dataclass(frozen=True)
class DecodedStream:
    level: int
    has_colors: bool
    geo_bits: int
    color_bits: int
    scale: NormalizationScale
    cell_ns: np.ndarray  # (level^3,) uint8 sampling rounds per canonical cell
    seeds: np.ndarray  # (K, 6) dequantized rows in canonical leaf order
    quantized: QuantizedSeeds


def encode_stream(
    level: int,
    cell_ns: np.ndarray,
    scale: NormalizationScale,
    seeds: np.ndarray,
    geo_bits: int = 12,
    color_bits: int = 8,
    with_colors: bool = True,
) -> bytes:
    """Serialize seeds plus sampling metadata into a .spcz byte string."""
    if not 1 <= int(level) <= MAX_LEVEL:
        raise InvalidArgument(f"level must be in [1, {MAX_LEVEL}], got {level}")
    level = int(level)
    cells = np.asarray(cell_ns, dtype=np.int64)
    if cells.shape != (level**3,):
        raise InvalidArgument(f"cell_ns must have shape ({level**3},)")
    if cells.min() < 0 or cells.max() > 255:
        raise InvalidArgument("per-cell round counts must fit a byte")
    _check_bits(geo_bits, color_bits)
    qs = seeds if isinstance(seeds, QuantizedSeeds) else quantize_seeds(seeds, geo_bits, color_bits)
    if qs.geo.shape[0] < 1:
        raise InvalidArgument("need at least one seed")
    if qs.geo.min() < 0 or qs.geo.max() >= (1 << geo_bits):
        raise InvalidArgument("quantized geometry outside the coding grid")
    if qs.color.min() < 0 or qs.color.max() >= (1 << color_bits):
        raise InvalidArgument("quantized colors outside the coding range")
    payload = _encode_payload(qs, geo_bits, color_bits, with_colors)
    head = _HEAD.pack(MAGIC, VERSION, level, 1 if with_colors else 0, geo_bits, color_bits, 0)
    scales = _SCALES.pack(
        float(scale.center[0]), float(scale.center[1]), float(scale.center[2]), float(scale.radius)
    )
    return head + scales + cells.astype(np.uint8).tobytes() + _PAYLEN.pack(len(payload)) + payload


def decode_stream(data: bytes) -> DecodedStream:
    """Parse and entropy-decode a .spcz byte string (exact inverse of encode)."""
    if len(data) < _HEAD.size:
        raise DecodeError("stream shorter than fixed header", offset=len(data))
    magic, version, level, flags, geo_bits, color_bits, _ = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise UnsupportedStream(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedStream(f"unsupported version {version}")
    if not 1 <= level <= MAX_LEVEL:
        raise DecodeError(f"level {level} out of range", offset=5)
    if not 1 <= geo_bits <= MAX_GEO_BITS:
        raise DecodeError(f"geo_bits {geo_bits} out of range", offset=7)
    if not 1 <= color_bits <= 8:
        raise DecodeError(f"color_bits {color_bits} out of range", offset=8)
    pos = _HEAD.size
    if len(data) < pos + _SCALES.size:
        raise DecodeError("truncated scales", offset=len(data))
    cx, cy, cz, radius = _SCALES.unpack_from(data, pos)
    pos += _SCALES.size
    n_cells = level**3
    if len(data) < pos + n_cells + _PAYLEN.size:
        raise DecodeError("truncated cell table", offset=len(data))
    cell_ns = np.frombuffer(data, dtype=np.uint8, count=n_cells, offset=pos).copy()
    pos += n_cells
    (payload_len,) = _PAYLEN.unpack_from(data, pos)
    pos += _PAYLEN.size
    if len(data) != pos + payload_len:
        raise DecodeError(
            f"payload length field says {payload_len}, stream carries {len(data) - pos}",
            offset=pos,
        )
    has_colors = bool(flags & 1)
    qs = _decode_payload(data[pos:], geo_bits, color_bits, has_colors)
    seeds = dequantize_seeds(qs, geo_bits, color_bits)
    if not has_colors:
        seeds[:, 3:] = 1.0
    return DecodedStream(
        level=level,
        has_colors=has_colors,
        geo_bits=geo_bits,
        color_bits=color_bits,
        scale=NormalizationScale(np.array([cx, cy, cz], dtype=np.float64), float(radius)),
        cell_ns=cell_ns,
        seeds=seeds,
        quantized=qs,
    )


def measure_bits(data: bytes) -> int:
    return 8 * len(data)
