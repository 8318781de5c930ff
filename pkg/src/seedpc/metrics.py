"""Evaluation metrics: bits per point, geometry and color PSNR, BD-PSNR.

Geometry PSNR follows the point-cloud D1/D2 convention: symmetric two-way
nearest-neighbor matching, squared errors, and a peak term derived from the
reference cloud's intrinsic resolution.  The alternate convention with
un-squared distances and an empirical max-distance numerator is available
as ``formula="paper"``; absolute dB values are only comparable within one
convention.  Color PSNR works in full-range BT.601 YUV on the 8-bit scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument, NoOverlap
from .spatial import estimate_normals
from .tuning import loss_cd as chamfer

__all__ = [
    "RdCurve",
    "bpp",
    "psnr_geometry",
    "psnr_color",
    "bd_psnr",
    "chamfer",
]


def bpp(stream_bits: float, n_points: int) -> float:
    """Average encoding bits per point."""
    if n_points < 1:
        raise InvalidArgument(f"n_points must be >= 1, got {n_points}")
    return float(stream_bits) / float(n_points)


def _geometry(cloud) -> np.ndarray:
    if hasattr(cloud, "positions"):
        arr = np.asarray(cloud.positions, dtype=np.float64)
    else:
        arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (3, 6) or arr.shape[0] < 1:
        raise InvalidArgument(f"expected a non-empty (N, 3) or (N, 6) cloud, got {arr.shape}")
    return arr[:, :3]


def _colored_rows(cloud) -> np.ndarray:
    if hasattr(cloud, "as_rows"):
        return cloud.as_rows()
    arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 6 or arr.shape[0] < 1:
        raise InvalidArgument("color metrics need colored (N, 6) rows; colors are missing")
    return arr


def _nearest(src: np.ndarray, dst: np.ndarray):
    """Index into dst of each src row's Euclidean nearest neighbor."""
    _, idx = cKDTree(dst).query(src)
    return np.asarray(idx)


def _intrinsic_resolution(points: np.ndarray) -> float:
    """Max distance from any point to its nearest distinct-index neighbor."""
    if points.shape[0] < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].max())


def psnr_geometry(gt, rec, mode: str = "d1", formula: str = "standard") -> float:
    """Two-way geometry PSNR in dB; +inf when the error term vanishes.

    mode "d1" measures point-to-point error, "d2" the error component
    along the ground-truth cloud's estimated normals (each gt point's own
    normal in the gt-to-rec direction, the matched gt point's normal in
    the reverse direction).
    """
    if mode not in ("d1", "d2"):
        raise InvalidArgument(f"mode must be 'd1' or 'd2', got {mode!r}")
    if formula not in ("standard", "paper"):
        raise InvalidArgument(f"formula must be 'standard' or 'paper', got {formula!r}")
    g = _geometry(gt)
    r = _geometry(rec)
    i_gr = _nearest(g, r)
    i_rg = _nearest(r, g)
    diff_gr = g - r[i_gr]
    diff_rg = r - g[i_rg]
    if mode == "d1":
        err_gr = np.linalg.norm(diff_gr, axis=1)
        err_rg = np.linalg.norm(diff_rg, axis=1)
    else:
        normals_g, _ = estimate_normals(g)
        err_gr = np.abs(np.sum(diff_gr * normals_g, axis=1))
        err_rg = np.abs(np.sum(diff_rg * normals_g[i_rg], axis=1))

    if formula == "standard":
        dis = 0.5 * (np.mean(err_gr**2) + np.mean(err_rg**2))
        peak = 3.0 * _intrinsic_resolution(g) ** 2
    else:
        dis = 0.5 * (np.mean(err_gr) + np.mean(err_rg))
        peak = max(err_gr.max(), err_rg.max())
    if dis == 0.0:
        return math.inf
    if peak <= 0.0:
        return -math.inf
    return 10.0 * math.log10(peak / dis)


# Full-range BT.601 with the chroma planes offset to 128.
_YUV = np.array(
    [
        [0.299, -0.168736, 0.5],
        [0.587, -0.331264, -0.418688],
        [0.114, 0.5, -0.081312],
    ]
)
_YUV_OFFSET = np.array([0.0, 128.0, 128.0])


def _rgb_to_yuv(colors01: np.ndarray) -> np.ndarray:
    return (colors01 * 255.0) @ _YUV + _YUV_OFFSET


def psnr_color(gt, rec) -> float:
    """Two-way color PSNR on the 8-bit YUV scale; +inf for exact match."""
    a = _colored_rows(gt)
    b = _colored_rows(rec)
    ya = _rgb_to_yuv(a[:, 3:])
    yb = _rgb_to_yuv(b[:, 3:])
    i_ab = _nearest(a[:, :3], b[:, :3])
    i_ba = _nearest(b[:, :3], a[:, :3])
    dis = 0.5 * (np.mean((ya - yb[i_ab]) ** 2) + np.mean((yb - ya[i_ba]) ** 2))
    if dis == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / dis)


@dataclass(frozen=True)
class RdCurve:
    """Rate-distortion samples as (bits-per-point, PSNR dB) pairs."""

    samples: tuple

    def __post_init__(self):
        pts = tuple((float(r), float(p)) for r, p in self.samples)
        if not pts:
            raise InvalidArgument("an RD curve needs at least one sample")
        rates = np.array([r for r, _ in pts])
        psnrs = np.array([p for _, p in pts])
        if np.any(rates <= 0.0) or not np.all(np.isfinite(rates)):
            raise InvalidArgument("bpp values must be finite and > 0")
        if not np.all(np.isfinite(psnrs)):
            raise InvalidArgument("PSNR values must be finite")
        if np.any(np.diff(rates) <= 0.0):
            raise InvalidArgument("bpp values must be strictly increasing")
        object.__setattr__(self, "samples", pts)

    @property
    def rates(self) -> np.ndarray:
        return np.array([r for r, _ in self.samples])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p for _, p in self.samples])


def bd_psnr(reference: RdCurve, test: RdCurve) -> float:
    """Average PSNR gain of ``test`` over ``reference`` (Bjøntegaard).

    Both curves are fit with cubic polynomials in log10(bpp) and integrated
    exactly over the overlapping rate range; positive output means ``test``
    sits above ``reference`` there.
    """
    for curve in (reference, test):
        if len(curve.samples) < 4:
            raise InvalidArgument("BD-PSNR needs at least 4 samples per curve")
    x_ref = np.log10(reference.rates)
    x_test = np.log10(test.rates)
    lo = max(x_ref.min(), x_test.min())
    hi = min(x_ref.max(), x_test.max())
    if not lo < hi:
        raise NoOverlap(f"rate ranges do not overlap (log10 bpp {lo:.4g} >= {hi:.4g})")
    fit_ref = np.polyfit(x_ref, reference.psnrs, 3)
    fit_test = np.polyfit(x_test, test.psnrs, 3)
    int_ref = np.polyint(fit_ref)
    int_test = np.polyint(fit_test)
    area_ref = np.polyval(int_ref, hi) - np.polyval(int_ref, lo)
    area_test = np.polyval(int_test, hi) - np.polyval(int_test, lo)
    return float((area_test - area_ref) / (hi - lo))
