import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sftnet.geometry import (
    DepthMap,
    NormalizationSpec,
    PerspectiveCamera,
    WarpField,
    denormalize_depth,
    denormalize_warp,
    edge_distortion,
    embed,
    normalize_depth,
    normalize_warp,
    project_point,
    rotation_matrix,
    unit_camera,
)
from sftnet.template import make_sheet_template


class TestProjectPoint:
    def test_basic_arithmetic(self):
        cam = unit_camera()
        assert project_point([2.0, 4.0, 2.0], cam) == pytest.approx([1.0, 2.0])

    def test_optical_axis_hits_principal_point(self):
        cam = PerspectiveCamera(500.0, 480.0, 320.0, 240.0, 640, 480)
        assert project_point([0.0, 0.0, 5.0], cam) == pytest.approx([320.0, 240.0])

    def test_behind_camera_raises(self):
        with pytest.raises(ValueError, match="behind"):
            project_point([1.0, 1.0, -2.0], unit_camera())
        with pytest.raises(ValueError):
            project_point([1.0, 1.0, 0.0], unit_camera())

    def test_batched(self):
        cam = unit_camera()
        pts = np.array([[2.0, 4.0, 2.0], [0.0, 0.0, 3.0]])
        out = project_point(pts, cam)
        assert out.shape == (2, 2)
        np.testing.assert_allclose(out, [[1.0, 2.0], [0.0, 0.0]])

    @given(
        x=st.floats(-100, 100),
        y=st.floats(-100, 100),
        z=st.floats(0.01, 1000),
        lam=st.floats(0.001, 1000),
    )
    @settings(max_examples=100, deadline=None)
    def test_scale_invariance(self, x, y, z, lam):
        cam = PerspectiveCamera(350.0, 360.0, 240.0, 135.0, 480, 270)
        p = np.array([x, y, z])
        np.testing.assert_allclose(
            project_point(lam * p, cam), project_point(p, cam), rtol=0, atol=1e-9 * max(1, abs(x / z), abs(y / z))
        )


class TestEmbed:
    def test_direct_substitution(self):
        np.testing.assert_allclose(embed(0.5, -0.2, 3.0), [1.5, -0.6, 3.0])

    def test_on_axis(self):
        np.testing.assert_allclose(embed(0.0, 0.0, 7.0), [0.0, 0.0, 7.0])

    def test_round_trip_with_unit_camera(self):
        p = embed(0.5, -0.2, 3.0)
        np.testing.assert_allclose(project_point(p, unit_camera()), [0.5, -0.2])

    def test_nonpositive_depth_raises(self):
        with pytest.raises(ValueError):
            embed(0.1, 0.1, 0.0)

    @given(
        u=st.floats(-2, 2), v=st.floats(-2, 2), rho=st.floats(1e-3, 1e4)
    )
    @settings(max_examples=100, deadline=None)
    def test_embed_project_inverse(self, u, v, rho):
        p = embed(u, v, rho)
        np.testing.assert_allclose(project_point(p, unit_camera()), [u, v], atol=1e-12)

    def test_grid_embed(self):
        u = np.array([[0.1, 0.2]])
        v = np.array([[0.3, 0.4]])
        rho = np.array([[2.0, 4.0]])
        out = embed(u, v, rho)
        assert out.shape == (1, 2, 3)
        np.testing.assert_allclose(out[0, 1], [0.8, 1.6, 4.0])


@pytest.fixture
def spec():
    return NormalizationSpec(z_min=300.0, z_max=700.0)


class TestDepthNormalization:
    def test_endpoints(self, spec):
        depth = DepthMap.from_values(np.array([[300.0, 700.0]]))
        grid = normalize_depth(depth, spec)
        np.testing.assert_allclose(grid, [[-0.9, 1.0]])

    def test_background_sentinel(self, spec):
        depth = DepthMap.from_values(np.array([[0.0, 500.0]]))
        grid = normalize_depth(depth, spec)
        assert grid[0, 0] == -1.0

    def test_out_of_range_reports_count(self, spec):
        depth = DepthMap.from_values(np.array([[100.0, 800.0, 500.0]]))
        with pytest.raises(ValueError, match="2 foreground"):
            normalize_depth(depth, spec)

    def test_denormalize_endpoints(self, spec):
        out = denormalize_depth(np.array([[1.0, -1.0]]), spec)
        assert out.values[0, 0] == pytest.approx(700.0)
        assert not out.mask[0, 1]

    @given(st.floats(300.0, 700.0))
    @settings(max_examples=100, deadline=None)
    def test_round_trip(self, d):
        spec = NormalizationSpec(z_min=300.0, z_max=700.0)
        depth = DepthMap.from_values(np.array([[d]]))
        back = denormalize_depth(normalize_depth(depth, spec), spec)
        assert back.mask[0, 0]
        assert abs(back.values[0, 0] - d) < 1e-6 * spec.z_range

    def test_round_trip_preserves_masks(self, spec):
        rng = np.random.default_rng(3)
        values = np.where(rng.random((20, 30)) < 0.5, rng.uniform(300, 700, (20, 30)), 0.0)
        depth = DepthMap.from_values(values)
        back = denormalize_depth(normalize_depth(depth, spec), spec)
        np.testing.assert_array_equal(back.mask, depth.mask)
        np.testing.assert_allclose(back.values, depth.values, atol=1e-6 * spec.z_range)


class TestWarpNormalization:
    def test_endpoints(self, spec):
        warp = WarpField.from_uv(np.array([[[0.0, 0.0], [1.0, 1.0]]]))
        grid = normalize_warp(warp, spec)
        np.testing.assert_allclose(grid[0, 0], [-0.9, -0.9])
        np.testing.assert_allclose(grid[0, 1], [1.0, 1.0])

    def test_background_sentinel(self, spec):
        warp = WarpField.from_uv(
            np.array([[[0.5, 0.5]]]), mask=np.array([[False]])
        )
        grid = normalize_warp(warp, spec)
        np.testing.assert_allclose(grid[0, 0], [-1.0, -1.0])

    def test_round_trip(self, spec):
        rng = np.random.default_rng(5)
        uv = rng.random((10, 15, 2))
        mask = rng.random((10, 15)) < 0.6
        warp = WarpField.from_uv(uv, mask=mask)
        back = denormalize_warp(normalize_warp(warp, spec), spec)
        np.testing.assert_array_equal(back.mask, warp.mask)
        np.testing.assert_allclose(back.uv[mask], warp.uv[mask], atol=1e-6)

    def test_denormalize_background(self, spec):
        out = denormalize_warp(np.full((2, 2, 2), -1.0), spec)
        assert not out.mask.any()


class TestNormalizationSpec:
    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            NormalizationSpec(z_min=0.0, z_max=10.0)
        with pytest.raises(ValueError):
            NormalizationSpec(z_min=10.0, z_max=5.0)
        with pytest.raises(ValueError):
            NormalizationSpec(z_min=1.0, z_max=2.0, valid_low=-1.5)
        with pytest.raises(ValueError):
            NormalizationSpec(z_min=1.0, z_max=2.0, background_value=-0.5)

    def test_threshold_separates_sentinel(self, spec):
        assert spec.segmentation_threshold == pytest.approx(-0.95)


class TestMaps:
    def test_depth_mask_consistency(self):
        values = np.array([[1.0, 0.0], [np.nan, 5.0]])
        d = DepthMap.from_values(values)
        np.testing.assert_array_equal(d.mask, [[True, False], [False, True]])
        assert d.values[1, 0] == 0.0

    def test_warp_mask_consistency(self):
        uv = np.array([[[0.5, 0.5], [1.2, 0.5]]])
        w = WarpField.from_uv(uv)
        np.testing.assert_array_equal(w.mask, [[True, False]])
        np.testing.assert_array_equal(w.uv[0, 1], [-1.0, -1.0])

    def test_inconsistent_construction_rejected(self):
        with pytest.raises(ValueError):
            DepthMap(values=np.array([[-1.0]]), mask=np.array([[True]]))


class TestEdgeDistortion:
    def test_rigid_motion_is_isometry(self):
        template = make_sheet_template(rows=5, cols=7)
        rng = np.random.default_rng(0)
        for _ in range(10):
            r = rotation_matrix(rng.normal(size=3), rng.uniform(0, np.pi))
            t = rng.normal(scale=100.0, size=3)
            moved = template.vertices @ r.T + t
            stats = edge_distortion(template, moved)
            assert stats.mean == pytest.approx(0.0, abs=1e-12)
            assert stats.max == pytest.approx(0.0, abs=1e-12)

    def test_uniform_scale(self):
        template = make_sheet_template(rows=4, cols=4)
        stats = edge_distortion(template, template.vertices * 1.1)
        assert stats.mean == pytest.approx(0.1)
        assert stats.max == pytest.approx(0.1)

    def test_vertex_count_mismatch(self):
        template = make_sheet_template(rows=4, cols=4)
        with pytest.raises(ValueError):
            edge_distortion(template, template.vertices[:-1])

    def test_degenerate_edges_skipped(self):
        from sftnet.template import Template

        verts = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        uv = np.array([[0.0, 0], [0.1, 0], [1.0, 0], [0.0, 1]])
        tex = np.zeros((4, 4, 3), dtype=np.uint8)
        t = Template(vertices=verts, faces=faces, atlas_uv=uv, texture=tex)
        stats = edge_distortion(t, verts * 2.0)
        assert stats.skipped_count == 1
        assert stats.mean == pytest.approx(1.0)


class TestCamera:
    def test_invalid_camera_rejected(self):
        with pytest.raises(ValueError):
            PerspectiveCamera(-1.0, 1.0, 0.0, 0.0, 10, 10)
        with pytest.raises(ValueError):
            PerspectiveCamera(1.0, 1.0, 0.0, 0.0, 0, 10)

    def test_scaled_keeps_rays(self):
        cam = PerspectiveCamera(1057.8, 1064.0, 947.64, 530.38, 1920, 1080)
        quarter = cam.scaled(480, 270)
        assert quarter.f_u == pytest.approx(1057.8 / 4)
        assert quarter.c_v == pytest.approx(530.38 / 4)
        p = np.array([100.0, -50.0, 900.0])
        full = project_point(p, cam)
        np.testing.assert_allclose(project_point(p, quarter), full / 4)
