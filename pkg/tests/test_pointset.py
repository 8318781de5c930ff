import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedpc.errors import InvalidArgument, InvalidCloud, ParseError
from seedpc.pointset import (
    ColoredPointCloud,
    denormalize,
    load_ply,
    normalize,
    random_sample,
    save_ply,
)


def make_cloud(pos, colors=None):
    pos = np.asarray(pos, dtype=np.float64)
    if colors is None:
        colors = np.full_like(pos, 0.5)
    return ColoredPointCloud(pos, colors)


class TestCloudInvariants:
    def test_rejects_empty(self):
        with pytest.raises(InvalidCloud):
            ColoredPointCloud(np.empty((0, 3)), np.empty((0, 3)))

    def test_rejects_row_mismatch(self):
        with pytest.raises(InvalidCloud):
            ColoredPointCloud(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_rejects_color_out_of_range(self):
        with pytest.raises(InvalidCloud):
            make_cloud([[0, 0, 0]], [[0.0, 0.0, 1.5]])

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidCloud):
            make_cloud([[np.nan, 0, 0]])


class TestNormalize:
    def test_two_point_symmetry(self):
        cloud = make_cloud([[0, 0, 0], [2, 0, 0]])
        out, scale = normalize(cloud)
        assert np.allclose(scale.center, [1, 0, 0])
        assert scale.radius == pytest.approx(1.0)
        assert np.allclose(sorted(out.positions[:, 0]), [-1, 1])

    def test_single_point_degenerate(self):
        out, scale = normalize(make_cloud([[5, 5, 5]]))
        assert np.allclose(scale.center, [5, 5, 5])
        assert scale.radius == pytest.approx(1e-12)
        assert np.allclose(out.positions, 0.0)

    def test_cube_corners_land_on_unit_sphere(self):
        corners = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        out, scale = normalize(make_cloud(corners))
        # Independent check of the radius: brute-force max distance from the
        # box midpoint.
        center = 0.5 * (corners.min(axis=0) + corners.max(axis=0))
        expect_radius = np.linalg.norm(corners - center, axis=1).max()
        assert expect_radius == pytest.approx(math.sqrt(3))
        assert scale.radius == pytest.approx(expect_radius)
        assert np.allclose(np.linalg.norm(out.positions, axis=1), 1.0)

    def test_colors_unchanged(self):
        colors = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]])
        out, _ = normalize(make_cloud([[0, 0, 0], [10, 0, 0]], colors))
        assert np.array_equal(out.colors, colors)

    @given(
        st.integers(min_value=1, max_value=64),
        st.integers(min_value=0, max_value=2**32 - 1),
        st.floats(min_value=0.01, max_value=1e6),
    )
    @settings(max_examples=40, deadline=None)
    def test_output_inside_unit_ball(self, n, seed, spread):
        rng = np.random.default_rng(seed)
        cloud = make_cloud(rng.normal(scale=spread, size=(n, 3)))
        out, _ = normalize(cloud)
        assert np.linalg.norm(out.positions, axis=1).max() <= 1.0 + 1e-9


class TestDenormalize:
    def test_origin_maps_to_center(self):
        cloud = make_cloud([[0, 0, 0]])
        _, scale = normalize(make_cloud([[0, 2, 4], [2, 2, 2]]))
        out = denormalize(cloud, scale)
        assert np.allclose(out.positions[0], scale.center)

    def test_scaling(self):
        from seedpc.pointset import NormalizationScale

        scale = NormalizationScale(np.zeros(3), 3.0)
        out = denormalize(make_cloud([[1, 0, 0]]), scale)
        assert np.allclose(out.positions[0], [3, 0, 0])

    def test_inverse_pair(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(scale=50.0, size=(200, 3)) + 17.0
        cloud = make_cloud(pos)
        norm, scale = normalize(cloud)
        back = denormalize(norm, scale)
        rel = np.abs(back.positions - pos) / np.maximum(np.abs(pos), 1.0)
        assert rel.max() < 1e-6
        assert np.array_equal(back.colors, cloud.colors)


class TestRandomSample:
    def test_m_equals_n_is_permutation(self):
        cloud = make_cloud(np.arange(30).reshape(10, 3))
        out = random_sample(cloud, 10, np.random.default_rng(0))
        got = sorted(map(tuple, out.positions))
        want = sorted(map(tuple, cloud.positions))
        assert got == want

    def test_large_draw_is_distinct(self):
        rng = np.random.default_rng(1)
        cloud = make_cloud(rng.normal(size=(5000, 3)))
        out = random_sample(cloud, 3072, np.random.default_rng(2))
        assert len(out) == 3072
        assert len(set(map(tuple, out.positions))) == 3072

    def test_oversample_pads_with_replacement(self):
        cloud = make_cloud([[0, 0, 0], [1, 1, 1]])
        out = random_sample(cloud, 7, np.random.default_rng(0))
        assert len(out) == 7

    def test_zero_rejected(self):
        cloud = make_cloud([[0, 0, 0]])
        with pytest.raises(InvalidArgument):
            random_sample(cloud, 0, np.random.default_rng(0))

    def test_seed_determinism(self):
        cloud = make_cloud(np.random.default_rng(9).normal(size=(100, 3)))
        a = random_sample(cloud, 10, np.random.default_rng(42))
        b = random_sample(cloud, 10, np.random.default_rng(42))
        assert np.array_equal(a.positions, b.positions)


class TestPlyIO:
    def test_binary_roundtrip_bit_exact(self, tmp_path):
        pos = np.array([[0.1, -2.5, 3e7], [1e-20, 0.0, -1.0], [5.5, 5.5, 5.5]])
        colors = np.array([[0, 0, 0], [1, 1, 1], [128 / 255, 7 / 255, 255 / 255]])
        path = tmp_path / "c.ply"
        save_ply(ColoredPointCloud(pos, colors), path, binary=True)
        loaded = load_ply(path)
        assert loaded.had_colors
        # Binary PLY stores float32; round-tripping through the same float32
        # values must be bit-identical.
        assert np.array_equal(
            loaded.cloud.positions, pos.astype(np.float32).astype(np.float64)
        )
        assert np.array_equal(loaded.cloud.colors, colors)

    def test_ascii_roundtrip(self, tmp_path):
        pos = np.array([[1.5, 2.5, -3.5], [0.0, 0.0, 0.0]])
        colors = np.array([[0.25, 0.5, 0.75], [1.0, 0.0, 1.0]])
        path = tmp_path / "a.ply"
        save_ply(ColoredPointCloud(pos, colors), path, binary=False)
        loaded = load_ply(path)
        assert np.allclose(loaded.cloud.positions, pos, atol=1e-6)
        # colors pass through the 8-bit grid exactly
        assert np.array_equal(
            loaded.cloud.colors, np.floor(colors * 255 + 0.5) / 255.0
        )

    def test_geometry_only_file_fills_white(self, tmp_path):
        path = tmp_path / "g.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n1 2 3\n"
        )
        loaded = load_ply(path)
        assert not loaded.had_colors
        assert np.array_equal(loaded.cloud.colors, np.ones((2, 3)))

    def test_truncated_body_is_parse_error(self, tmp_path):
        path = tmp_path / "t.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 5\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n1 1 1\n2 2 2\n"
        )
        with pytest.raises(ParseError):
            load_ply(path)

    def test_malformed_header_reports_line(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex nope\nend_header\n")
        with pytest.raises(ParseError) as err:
            load_ply(path)
        assert err.value.line == 3

    def test_missing_magic(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_text("pny\nformat ascii 1.0\nend_header\n")
        with pytest.raises(ParseError):
            load_ply(path)
