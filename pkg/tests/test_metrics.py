import math

import numpy as np
import pytest

from seedpc.errors import InvalidArgument, NoOverlap
from seedpc.metrics import RdCurve, bd_psnr, bpp, psnr_color, psnr_geometry
from seedpc.metrics import _rgb_to_yuv


def embed_x(xs):
    """1-D coordinates as (N, 3) points on the x axis."""
    pts = np.zeros((len(xs), 3))
    pts[:, 0] = xs
    return pts


def brute_d1_dis(g, r):
    d_gr = np.sqrt(((g[:, None, :] - r[None, :, :]) ** 2).sum(-1)).min(1)
    d_rg = np.sqrt(((r[:, None, :] - g[None, :, :]) ** 2).sum(-1)).min(1)
    return 0.5 * ((d_gr**2).mean() + (d_rg**2).mean())


def test_bpp():
    assert bpp(1000, 1000) == 1.0
    assert bpp(0, 5) == 0.0
    assert bpp(248, 100) == pytest.approx(2.48)
    with pytest.raises(InvalidArgument):
        bpp(100, 0)


def test_d1_two_point_example():
    gt = embed_x([0.0, 2.0])
    rec = embed_x([0.0, 2.2])
    # Dis = 0.02, intrinsic resolution 2 -> peak 12, 10*log10(600)
    got = psnr_geometry(gt, rec, mode="d1")
    assert got == pytest.approx(27.78151250383644, abs=1e-12)


def test_d1_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(5):
        g = rng.normal(size=(40, 3))
        r = g + rng.normal(scale=0.05, size=(40, 3))
        dis = brute_d1_dis(g, r)
        d2, _ = np.sort(np.sqrt(((g[:, None] - g[None]) ** 2).sum(-1)), axis=1)[:, 1], None
        peak = 3.0 * d2.max() ** 2
        assert psnr_geometry(g, r) == pytest.approx(10 * math.log10(peak / dis), abs=1e-9)


def test_identical_clouds_are_infinite():
    pts = np.random.default_rng(1).normal(size=(30, 3))
    assert psnr_geometry(pts, pts.copy()) == math.inf
    rows = np.hstack([pts, np.full((30, 3), 0.25)])
    assert psnr_color(rows, rows.copy()) == math.inf


def test_d2_ignores_in_plane_error():
    # a flat grid displaced within its own plane has zero normal-projected error
    xs, ys = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8))
    gt = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(64)])
    rec = gt.copy()
    rec[:, 0] += 0.01
    assert psnr_geometry(gt, rec, mode="d2") == math.inf
    assert math.isfinite(psnr_geometry(gt, rec, mode="d1"))


def test_d2_sees_out_of_plane_error():
    xs, ys = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8))
    gt = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(64)])
    rec = gt.copy()
    rec[:, 2] += 0.01
    assert math.isfinite(psnr_geometry(gt, rec, mode="d2"))


def test_d2_matches_brute_force_with_gt_normals():
    # both matching directions project onto ground-truth normals
    from seedpc.spatial import estimate_normals

    rng = np.random.default_rng(5)
    xs, ys = np.meshgrid(np.linspace(0, 1, 10), np.linspace(0, 1, 10))
    gt = np.column_stack([xs.ravel(), ys.ravel(), 0.2 * xs.ravel() ** 2 - 0.1 * ys.ravel()])
    rec = gt + rng.normal(scale=0.01, size=gt.shape)

    normals_g, _ = estimate_normals(gt)
    pair = np.sqrt(((gt[:, None] - rec[None]) ** 2).sum(-1))
    i_gr = pair.argmin(1)
    i_rg = pair.argmin(0)
    err_gr = np.abs(((gt - rec[i_gr]) * normals_g).sum(1))
    err_rg = np.abs(((rec - gt[i_rg]) * normals_g[i_rg]).sum(1))
    dis = 0.5 * ((err_gr**2).mean() + (err_rg**2).mean())
    res = np.sort(np.sqrt(((gt[:, None] - gt[None]) ** 2).sum(-1)), axis=1)[:, 1].max()
    want = 10 * math.log10(3.0 * res**2 / dis)
    assert psnr_geometry(gt, rec, mode="d2") == pytest.approx(want, abs=1e-9)


def test_paper_formula_variant():
    gt = embed_x([0.0, 2.0])
    rec = embed_x([0.0, 2.2])
    # un-squared Dis = 0.1, peak = max matched distance 0.2
    got = psnr_geometry(gt, rec, formula="paper")
    assert got == pytest.approx(10 * math.log10(2.0), abs=1e-12)
    assert got != psnr_geometry(gt, rec)


def test_mode_and_formula_validation():
    pts = np.zeros((2, 3))
    with pytest.raises(InvalidArgument):
        psnr_geometry(pts, pts, mode="d3")
    with pytest.raises(InvalidArgument):
        psnr_geometry(pts, pts, formula="other")
    with pytest.raises(InvalidArgument):
        psnr_geometry(np.zeros((0, 3)), pts)


def test_adding_exact_points_never_hurts_d1():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(50, 3))
    rec = gt + rng.normal(scale=0.1, size=(50, 3))
    base = psnr_geometry(gt, rec)
    grown = psnr_geometry(gt, np.vstack([rec, gt[:10]]))
    assert grown >= base


# ---------------------------------------------------------------------------
# color
# ---------------------------------------------------------------------------


def test_yuv_anchors():
    yuv = _rgb_to_yuv(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    assert np.allclose(yuv[0], [0.0, 128.0, 128.0], atol=1e-9)
    assert np.allclose(yuv[1], [255.0, 128.0, 128.0], atol=1e-9)


def test_black_vs_white():
    pts = np.random.default_rng(3).normal(size=(20, 3))
    black = np.hstack([pts, np.zeros((20, 3))])
    white = np.hstack([pts, np.ones((20, 3))])
    # only the luma plane differs: Dis = 255^2 / 3
    assert psnr_color(black, white) == pytest.approx(10 * math.log10(3.0), abs=1e-9)


def test_unit_distortion_reference_level():
    # perturb one RGB channel so the YUV mean-square error is exactly 1,
    # which pins PSNR at 20*log10(255) = 48.1308 dB
    pts = np.random.default_rng(4).normal(size=(16, 3))
    gray = np.full((16, 3), 0.5)
    delta = math.sqrt(3.0 / (0.299**2 + 0.168736**2 + 0.5**2)) / 255.0
    shifted = gray.copy()
    shifted[:, 0] += delta
    got = psnr_color(np.hstack([pts, gray]), np.hstack([pts, shifted]))
    assert got == pytest.approx(48.1308, abs=1e-3)


def test_color_requires_six_columns():
    with pytest.raises(InvalidArgument):
        psnr_color(np.zeros((4, 3)), np.zeros((4, 3)))


# ---------------------------------------------------------------------------
# BD-PSNR
# ---------------------------------------------------------------------------


def curve_from(fn, rates):
    return RdCurve(tuple((r, fn(math.log10(r))) for r in rates))


def test_rd_curve_validation():
    with pytest.raises(InvalidArgument):
        RdCurve(())
    with pytest.raises(InvalidArgument):
        RdCurve(((1.0, 30.0), (1.0, 31.0)))
    with pytest.raises(InvalidArgument):
        RdCurve(((0.0, 30.0), (1.0, 31.0)))
    with pytest.raises(InvalidArgument):
        RdCurve(((1.0, math.inf), (2.0, 31.0)))


def test_bd_identical_curves_zero():
    c = curve_from(lambda x: 30 + 5 * x, [0.5, 1.0, 2.0, 4.0])
    assert bd_psnr(c, c) == pytest.approx(0.0, abs=1e-12)


def test_bd_constant_offset():
    rates = [0.25, 0.7, 1.9, 5.2]
    a = curve_from(lambda x: 28 + 4 * x + 0.5 * x * x, rates)
    b = curve_from(lambda x: 30 + 4 * x + 0.5 * x * x, rates)
    assert bd_psnr(a, b) == pytest.approx(2.0, abs=1e-9)


def test_bd_antisymmetric():
    a = curve_from(lambda x: 30 + 6 * x - x * x, [0.5, 1.0, 2.0, 4.0, 8.0])
    b = curve_from(lambda x: 31 + 5 * x, [0.4, 1.5, 3.0, 6.0])
    assert bd_psnr(a, b) == pytest.approx(-bd_psnr(b, a), abs=1e-9)


def test_bd_matches_dense_quadrature():
    # exact cubic curves: polyfit recovers them, so BD must equal the
    # trapezoid average of their gap over the shared log-rate window
    fa = lambda x: 30 + 4 * x + 0.3 * x**2 - 0.1 * x**3
    fb = lambda x: 33 + 3.5 * x - 0.2 * x**2
    a = curve_from(fa, [0.3, 0.8, 2.0, 5.0, 9.0])
    b = curve_from(fb, [0.5, 1.2, 3.0, 7.0])
    lo = math.log10(0.5)
    hi = math.log10(7.0)
    xs = np.linspace(lo, hi, 20001)
    want = np.trapezoid([fb(x) - fa(x) for x in xs], xs) / (hi - lo)
    assert bd_psnr(a, b) == pytest.approx(want, abs=1e-6)


def test_bd_requires_overlap_and_samples():
    low = curve_from(lambda x: 30.0, [0.1, 0.2, 0.3, 0.4])
    high = curve_from(lambda x: 30.0, [10.0, 20.0, 30.0, 40.0])
    with pytest.raises(NoOverlap):
        bd_psnr(low, high)
    short = RdCurve(((1.0, 30.0), (2.0, 31.0), (3.0, 32.0)))
    with pytest.raises(InvalidArgument):
        bd_psnr(short, low)
