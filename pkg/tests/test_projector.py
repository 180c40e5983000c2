import math

import numpy as np
import pytest

from oracles import dense_line_integral
from ctinpaint.projector import (
    DESK_GEOMETRY,
    CARM_GEOMETRY,
    PhantomSpec,
    Primitive,
    ProjectionGeometry,
    Volume3D,
    build_phantom,
    forward_project,
    random_knee_phantom,
    ray_endpoints,
    render_mask,
    synthetic_masks,
    trajectory_angles,
)


class TestTrajectory:
    def test_full_trajectory_has_60_views(self):
        angles = trajectory_angles(CARM_GEOMETRY)
        assert len(angles) == 60
        assert angles[0] == 0 and angles[-1] == 354

    def test_full_scale_bookkeeping(self):
        # 50 volumes x 60 views = 3000 projections
        assert 50 * len(trajectory_angles(CARM_GEOMETRY)) == 3000

    def test_single_view(self):
        geom = ProjectionGeometry(angular_range_deg=360, angular_step_deg=360)
        assert list(trajectory_angles(geom)) == [0]

    def test_half_turn(self):
        geom = ProjectionGeometry(angular_range_deg=180, angular_step_deg=45)
        assert list(trajectory_angles(geom)) == [0, 45, 90, 135]

    def test_rejects_non_dividing_step(self):
        with pytest.raises(ValueError):
            trajectory_angles(ProjectionGeometry(angular_range_deg=360, angular_step_deg=7))


class TestGeometry:
    @pytest.mark.parametrize("kwargs", [
        dict(sdd=600.0, sid=622.0),
        dict(detector_px=(0, 4)),
        dict(pixel_mm=0.0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ProjectionGeometry(**kwargs)

    def test_desk_geometry_keeps_field_of_view(self):
        fov = lambda g: g.detector_px[0] * g.pixel_mm
        assert fov(DESK_GEOMETRY) == pytest.approx(fov(CARM_GEOMETRY))
        assert DESK_GEOMETRY.detector_px == (64, 64)

    def test_central_ray_passes_through_isocenter(self):
        geom = ProjectionGeometry(detector_px=(5, 5))
        src, pix = ray_endpoints(geom, 37.0)
        d = pix[2, 2] - src
        # distance from origin to the line
        assert np.linalg.norm(np.cross(d, -src)) / np.linalg.norm(d) < 1e-9
        assert np.linalg.norm(d) == pytest.approx(geom.sdd)


class TestForwardProject:
    geom = ProjectionGeometry(detector_px=(17, 17), pixel_mm=0.5)

    def test_empty_volume(self):
        vol = Volume3D.zeros((8, 8, 8), 0.5)
        assert not forward_project(vol, self.geom, 0.0).any()

    def test_single_voxel_central_ray(self):
        vol = Volume3D(np.ones((1, 1, 1)), 0.5)
        img = forward_project(vol, self.geom, 0.0)
        src, pix = ray_endpoints(self.geom, 0.0)
        oracle = dense_line_integral(vol.data, vol.origin, vol.spacing, src, pix[8, 8])
        assert img[8, 8] == pytest.approx(0.5, abs=1e-12)
        assert abs(img[8, 8] - oracle) < 1e-3

    def test_scaling(self):
        rng = np.random.default_rng(3)
        vol = Volume3D(rng.uniform(0, 1, (6, 7, 5)), 0.5)
        a = forward_project(vol, self.geom, 20.0)
        b = forward_project(vol.with_data(2 * vol.data), self.geom, 20.0)
        assert np.array_equal(b, 2 * a)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        v1 = Volume3D(rng.uniform(0, 1, (9, 9, 9)), 0.6)
        v2 = v1.with_data(rng.uniform(0, 1, (9, 9, 9)))
        combo = v1.with_data(1.5 * v1.data - 0.7 * v2.data)
        lhs = forward_project(combo, self.geom, 75.0)
        rhs = 1.5 * forward_project(v1, self.geom, 75.0) - 0.7 * forward_project(v2, self.geom, 75.0)
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))

    def test_rays_missing_volume(self):
        vol = Volume3D(np.ones((2, 2, 2)), 0.5, origin=(0.0, 0.0, 40.0))
        assert not forward_project(vol, self.geom, 0.0).any()

    def test_matches_dense_sampling(self):
        rng = np.random.default_rng(5)
        vol = Volume3D(rng.uniform(0, 1, (12, 10, 14)), 0.5)
        geom = ProjectionGeometry(detector_px=(7, 7), pixel_mm=1.5)
        angle = 123.0
        img = forward_project(vol, geom, angle)
        src, pix = ray_endpoints(geom, angle)
        for r, c in [(3, 3), (1, 5), (5, 2)]:
            oracle = dense_line_integral(vol.data, vol.origin, vol.spacing, src, pix[r, c])
            assert abs(img[r, c] - oracle) <= 1e-3 * max(1.0, abs(oracle))


class TestPhantom:
    def test_tissue_only_has_empty_metal(self):
        spec = PhantomSpec(0, [Primitive("ellipsoid", (0, 0, 0), (5, 4, 3), 1.0)], (16, 16, 16), 1.0)
        tissue, metal = build_phantom(spec)
        assert tissue.data.sum() > 0
        assert not metal.data.any()

    def test_deterministic(self):
        a = build_phantom(random_knee_phantom(11, dims=(24, 24, 24), spacing=5.0))
        b = build_phantom(random_knee_phantom(11, dims=(24, 24, 24), spacing=5.0))
        for va, vb in zip(a, b):
            assert va.data.tobytes() == vb.data.tobytes()

    def test_cylinder_volume(self):
        r, half_h, spacing = 5.0, 6.0, 0.5
        spec = PhantomSpec(0, [Primitive("cylinder", (0.1, -0.2, 0.0), (r, r, half_h), 1.0)],
                           (32, 32, 32), spacing)
        tissue, _ = build_phantom(spec)
        analytic = math.pi * r**2 * (2 * half_h) / spacing**3
        assert np.count_nonzero(tissue.data) == pytest.approx(analytic, rel=0.02)

    def test_rejects_part_outside(self):
        spec = PhantomSpec(0, [Primitive("ellipsoid", (100, 0, 0), (2, 2, 2), 1.0)], (8, 8, 8), 1.0)
        with pytest.raises(ValueError):
            build_phantom(spec)

    def test_plate_holes_are_empty(self):
        plate = Primitive("plate", (0, 0, 0), (4, 10, 1), 1.0, "metal", holes=((0.0, 0.0, 2.0),))
        assert not plate.contains(0.0, 0.0, 0.0)
        assert plate.contains(0.0, 6.0, 0.0)

    def test_knee_phantom_has_implants(self):
        spec = random_knee_phantom(2, dims=(24, 24, 24), spacing=5.0)
        assert any(p.tag == "metal" for p in spec.parts)
        tissue, metal = build_phantom(spec)
        assert metal.data.any() and tissue.data.any()
        assert np.all(tissue.data >= 0)

    @pytest.mark.parametrize("kwargs", [dict(axes=(0, 1, 1)), dict(attenuation=-1.0), dict(tag="bone")])
    def test_primitive_validation(self, kwargs):
        base = dict(kind="ellipsoid", center=(0, 0, 0), axes=(1, 1, 1), attenuation=1.0)
        with pytest.raises(ValueError):
            Primitive(**{**base, **kwargs})


class TestMasks:
    def test_empty_metal_gives_all_ones(self):
        geom = ProjectionGeometry(detector_px=(8, 8))
        mask = render_mask(Volume3D.zeros((4, 4, 4), 1.0), geom, 0.0, threshold=1e-3)
        assert np.all(mask == 1)

    def test_mask_is_binary_and_partitions(self):
        _, metal = build_phantom(random_knee_phantom(3, dims=(24, 24, 24), spacing=5.0))
        geom = CARM_GEOMETRY.scaled((24, 24))
        mask = render_mask(metal, geom, 30.0)
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert np.all((mask == 1) ^ ((1 - mask) == 1))

    def test_magnified_block_footprint(self):
        # 4 mm metal cube at the isocenter, central view
        spacing, n = 0.5, 8
        geom = ProjectionGeometry(detector_px=(101, 101), pixel_mm=0.1)
        metal = Volume3D(np.ones((n, n, n)), spacing)
        mask = render_mask(metal, geom, 0.0, threshold=1e-6)
        half = n * spacing / 2
        # silhouette is set by the face nearest the source
        side_mm = 2 * half * geom.sdd / (geom.sid - half)
        expected = (side_mm / geom.pixel_mm) ** 2
        zeros = np.argwhere(mask == 0)
        assert np.count_nonzero(mask == 0) == pytest.approx(expected, rel=0.05)
        assert np.allclose(zeros.mean(axis=0), [50, 50], atol=0.5)
        # the footprint is larger than the object by roughly sdd/sid
        assert side_mm / (2 * half) == pytest.approx(geom.sdd / geom.sid, rel=0.01)

    def test_rejects_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            render_mask(Volume3D.zeros((2, 2, 2), 1.0), ProjectionGeometry(detector_px=(4, 4)), 0.0, 0.0)

    def test_circle_area(self):
        mask = synthetic_masks("circle", 20, seed=1)
        assert np.count_nonzero(mask == 0) == pytest.approx(math.pi * 10**2, rel=0.05)

    def test_hrect_spans_width(self):
        mask = synthetic_masks("hrect", 20, seed=2)
        rows = np.flatnonzero((mask == 0).all(axis=1))
        assert len(rows) == 20 and np.all(np.diff(rows) == 1)
        assert np.count_nonzero(mask == 0) == 20 * 256

    def test_vrect_spans_height(self):
        mask = synthetic_masks("vrect", 33, seed=2)
        cols = np.flatnonzero((mask == 0).all(axis=0))
        assert len(cols) == 33 and np.count_nonzero(mask == 0) == 33 * 256

    def test_same_seed_same_mask(self):
        assert np.array_equal(synthetic_masks("circle", 40, 9), synthetic_masks("circle", 40, 9))
        assert not np.array_equal(synthetic_masks("circle", 40, 9), synthetic_masks("circle", 40, 10))

    @pytest.mark.parametrize("kind,size", [("circle", 19), ("circle", 61), ("hrect", 51), ("vrect", 10)])
    def test_size_range(self, kind, size):
        with pytest.raises(ValueError):
            synthetic_masks(kind, size, 0)

    def test_ranges_scale_with_detector(self):
        mask = synthetic_masks("circle", 10, 0, shape=(64, 64))
        assert np.count_nonzero(mask == 0) == pytest.approx(math.pi * 25, rel=0.15)
        with pytest.raises(ValueError):
            synthetic_masks("circle", 20, 0, shape=(64, 64))
