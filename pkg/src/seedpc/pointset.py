"""Colored point clouds: container, normalization, sampling, PLY I/O.

A cloud is a pair of (N, 3) float64 arrays: positions and per-point RGB
colors in [0, 1].  Many routines in this package treat a cloud as a stack
of 6-D rows [x, y, z, r, g, b]; ``as_rows``/``from_rows`` convert.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, InvalidCloud, ParseError

__all__ = [
    "ColoredPointCloud",
    "NormalizationScale",
    "LoadedPly",
    "normalize",
    "denormalize",
    "random_sample",
    "load_ply",
    "save_ply",
]


@dataclass(frozen=True)
class ColoredPointCloud:
    """Immutable colored point cloud.  Arrays are read-only after construction."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        col = np.asarray(self.colors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidCloud(f"positions must be (N, 3), got {pos.shape}")
        if col.shape != pos.shape:
            raise InvalidCloud(f"colors shape {col.shape} != positions shape {pos.shape}")
        if pos.shape[0] < 1:
            raise InvalidCloud("cloud must contain at least one point")
        if not np.all(np.isfinite(pos)):
            raise InvalidCloud("positions contain NaN or Inf")
        if not np.all(np.isfinite(col)):
            raise InvalidCloud("colors contain NaN or Inf")
        if col.min() < 0.0 or col.max() > 1.0:
            raise InvalidCloud("colors must lie in [0, 1]")
        pos = pos.copy()
        col = col.copy()
        pos.setflags(write=False)
        col.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def as_rows(self) -> np.ndarray:
        """Return the cloud as an (N, 6) array of [x, y, z, r, g, b] rows."""
        return np.hstack([self.positions, self.colors])

    @staticmethod
    def from_rows(rows: np.ndarray, clip_colors: bool = False) -> "ColoredPointCloud":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != 6:
            raise InvalidCloud(f"rows must be (N, 6), got {rows.shape}")
        colors = rows[:, 3:]
        if clip_colors:
            colors = np.clip(colors, 0.0, 1.0)
        return ColoredPointCloud(rows[:, :3], colors)

    def take(self, indices) -> "ColoredPointCloud":
        return ColoredPointCloud(self.positions[indices], self.colors[indices])


@dataclass(frozen=True)
class NormalizationScale:
    """Affine map taking normalized geometry back to input coordinates."""

    center: np.ndarray  # (3,)
    radius: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))


def normalize(cloud: ColoredPointCloud) -> tuple[ColoredPointCloud, NormalizationScale]:
    """Center and scale positions into the closed unit ball.

    The center is the midpoint of the axis-aligned bounding box; the radius
    is the max distance from that center, clamped below by 1e-12 so a
    single-point cloud still maps to the origin.  Colors pass through.
    """
    pos = cloud.positions
    center = 0.5 * (pos.min(axis=0) + pos.max(axis=0))
    radius = float(np.linalg.norm(pos - center, axis=1).max())
    radius = max(radius, 1e-12)
    return (
        ColoredPointCloud((pos - center) / radius, cloud.colors),
        NormalizationScale(center, radius),
    )


def denormalize(cloud: ColoredPointCloud, scale: NormalizationScale) -> ColoredPointCloud:
    """Invert ``normalize``: positions map to p * radius + center, colors pass through."""
    return ColoredPointCloud(cloud.positions * scale.radius + scale.center, cloud.colors)


def random_sample(cloud: ColoredPointCloud, m: int, rng: np.random.Generator) -> ColoredPointCloud:
    """Sample m rows uniformly without replacement; pad with replacement if m > N."""
    if m < 1:
        raise InvalidArgument(f"sample size must be >= 1, got {m}")
    n = len(cloud)
    if m <= n:
        idx = rng.choice(n, size=m, replace=False)
    else:
        idx = np.concatenate([rng.permutation(n), rng.choice(n, size=m - n, replace=True)])
    return cloud.take(idx)


# ---------------------------------------------------------------------------
# PLY I/O
#
# Supported subset: "format ascii 1.0" and "format binary_little_endian 1.0",
# a vertex element with float/double x,y,z and optional uchar red,green,blue.
# Unknown scalar vertex properties are skipped; elements after vertex (faces
# etc.) are ignored on read and never written.
# ---------------------------------------------------------------------------

_PLY_SCALAR_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class LoadedPly(NamedTuple):
    cloud: ColoredPointCloud
    had_colors: bool


def load_ply(path) -> LoadedPly:
    """Read a PLY point cloud.

    Returns the cloud and whether the file carried red/green/blue properties.
    Files without colors load as all-white.  Raises ParseError (with a line
    number where possible) on malformed headers, truncated data, or
    unsupported formats.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    # Header is ASCII lines up to and including "end_header".
    lines: list[bytes] = []
    offset = 0
    while True:
        nl = data.find(b"\n", offset)
        if nl < 0:
            raise ParseError("end_header not found", line=len(lines) + 1)
        lines.append(data[offset:nl])
        offset = nl + 1
        if lines[-1].strip() == b"end_header":
            break
        if len(lines) > 1000:
            raise ParseError("header too large", line=len(lines))

    def header_token_lines():
        for i, raw in enumerate(lines, start=1):
            tokens = raw.decode("ascii", errors="replace").split()
            if tokens:
                yield i, tokens

    it = header_token_lines()
    lineno, tokens = next(it)
    if tokens != ["ply"]:
        raise ParseError("missing 'ply' magic", line=lineno)

    fmt = None
    n_vertices = None
    properties: list[tuple[str, str]] = []  # (name, numpy dtype code)
    in_vertex = False
    seen_other_element_first = False
    for lineno, tokens in it:
        kw = tokens[0]
        if kw == "comment" or kw == "obj_info":
            continue
        if kw == "format":
            if len(tokens) != 3:
                raise ParseError("malformed format line", line=lineno)
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise ParseError(f"unsupported format {tokens[1]!r}", line=lineno)
        elif kw == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", line=lineno)
            if tokens[1] == "vertex":
                if seen_other_element_first:
                    raise ParseError("vertex element must precede other elements", line=lineno)
                try:
                    n_vertices = int(tokens[2])
                except ValueError:
                    raise ParseError("bad vertex count", line=lineno) from None
                in_vertex = True
            else:
                if n_vertices is None:
                    seen_other_element_first = True
                in_vertex = False
        elif kw == "property":
            if not in_vertex:
                continue
            if tokens[1] == "list":
                raise ParseError("list property in vertex element is unsupported", line=lineno)
            if len(tokens) != 3:
                raise ParseError("malformed property line", line=lineno)
            tname, pname = tokens[1], tokens[2]
            if tname not in _PLY_SCALAR_TYPES:
                raise ParseError(f"unknown property type {tname!r}", line=lineno)
            properties.append((pname, _PLY_SCALAR_TYPES[tname]))
        elif kw == "end_header":
            break
        else:
            raise ParseError(f"unknown header keyword {kw!r}", line=lineno)

    if fmt is None:
        raise ParseError("missing format line", line=len(lines))
    if n_vertices is None:
        raise ParseError("missing vertex element", line=len(lines))
    if n_vertices < 1:
        raise ParseError("vertex count must be >= 1", line=len(lines))
    prop_names = [name for name, _ in properties]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise ParseError(f"vertex element lacks property {axis!r}", line=len(lines))
        code = dict(properties)[axis]
        if code not in ("f4", "f8"):
            raise ParseError(f"property {axis!r} must be float typed", line=len(lines))
    had_colors = all(c in prop_names for c in ("red", "green", "blue"))

    if fmt == "binary":
        dtype = np.dtype([(name, "<" + code) for name, code in properties])
        need = n_vertices * dtype.itemsize
        body = data[offset : offset + need]
        if len(body) < need:
            raise ParseError(
                f"truncated vertex data: need {need} bytes, have {len(body)}",
                line=len(lines),
            )
        table = np.frombuffer(body, dtype=dtype, count=n_vertices)
    else:
        text = data[offset:].decode("ascii", errors="replace").splitlines()
        rows = []
        consumed = 0
        for j, line in enumerate(text):
            if consumed == n_vertices:
                break
            toks = line.split()
            if not toks:
                continue
            if len(toks) < len(properties):
                raise ParseError(
                    f"vertex row has {len(toks)} values, expected {len(properties)}",
                    line=len(lines) + j + 1,
                )
            rows.append(toks[: len(properties)])
            consumed += 1
        if consumed < n_vertices:
            raise ParseError(
                f"header declares {n_vertices} vertices but only {consumed} present",
                line=len(lines) + len(text),
            )
        dtype = np.dtype([(name, code) for name, code in properties])
        try:
            table = np.array([tuple(r) for r in rows], dtype=dtype)
        except ValueError as exc:
            raise ParseError(f"bad vertex value: {exc}", line=len(lines) + 1) from None

    positions = np.stack(
        [table["x"].astype(np.float64), table["y"].astype(np.float64), table["z"].astype(np.float64)],
        axis=1,
    )
    if had_colors:
        colors = np.stack(
            [table[c].astype(np.float64) / 255.0 for c in ("red", "green", "blue")], axis=1
        )
        colors = np.clip(colors, 0.0, 1.0)
    else:
        colors = np.ones_like(positions)
    if not np.all(np.isfinite(positions)):
        raise ParseError("vertex data contains NaN or Inf", line=len(lines))
    return LoadedPly(ColoredPointCloud(positions, colors), had_colors)


def save_ply(cloud: ColoredPointCloud, path, binary: bool = True) -> None:
    """Write a cloud as PLY with float32 x,y,z and uchar red,green,blue.

    Colors quantize by round-half-up to 8 bits; coordinates are cast to
    float32, so binary round trips reproduce float32-representable inputs
    bit-exactly.
    """
    n = len(cloud)
    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0" if binary else "format ascii 1.0",
            f"element vertex {n}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "end_header",
        ]
    )
    pos = cloud.positions.astype(np.float32)
    col = np.floor(cloud.colors * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        if binary:
            rec = np.empty(
                n,
                dtype=np.dtype(
                    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                     ("red", "u1"), ("green", "u1"), ("blue", "u1")]
                ),
            )
            rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
            rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
            fh.write(rec.tobytes())
        else:
            out = []
            for i in range(n):
                out.append(
                    "%.9g %.9g %.9g %d %d %d"
                    % (pos[i, 0], pos[i, 1], pos[i, 2], col[i, 0], col[i, 1], col[i, 2])
                )
            fh.write(("\n".join(out) + "\n").encode("ascii"))
