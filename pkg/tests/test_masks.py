import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ambiflow import masks as mk
from ambiflow.masks import PersonMask


def random_mask(rng, density=0.002):
    return PersonMask(rng.random((256, 256)) < density)


def blob_mask(cx, cy, r):
    ys, xs = np.mgrid[0:256, 0:256]
    return PersonMask((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r)


class TestUnion:
    def test_single_mask_is_itself(self):
        m = blob_mask(100, 100, 20)
        u = mk.union_masks([m])
        assert np.array_equal(u.grid, m.grid)
        assert u.provenance == "union"

    def test_disjoint_areas_add(self):
        a = blob_mask(60, 60, 15)
        b = blob_mask(200, 200, 15)
        assert mk.union_masks([a, b]).area == a.area + b.area

    def test_union_is_superset(self):
        rng = np.random.default_rng(0)
        parts = [random_mask(rng) for _ in range(3)]
        u = mk.union_masks(parts)
        for p in parts:
            assert np.all(u.grid[p.grid])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="256x256"):
            PersonMask(np.zeros((10, 10), dtype=bool))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_union_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_mask(rng, 0.01) for _ in range(3))
    ab = mk.union_masks([a, b]).grid
    ba = mk.union_masks([b, a]).grid
    assert np.array_equal(ab, ba)  # commutative
    assert np.array_equal(mk.union_masks([a, a]).grid, a.grid)  # idempotent
    abc1 = mk.union_masks([mk.union_masks([a, b]), c]).grid
    abc2 = mk.union_masks([a, mk.union_masks([b, c])]).grid
    assert np.array_equal(abc1, abc2)  # associative


class TestInside:
    def test_on_mask_pixel(self):
        m = blob_mask(100, 100, 10)
        assert mk.inside(np.array([100.0, 100.0]), m)

    def test_out_of_bounds_false(self):
        m = blob_mask(100, 100, 10)
        assert not mk.inside(np.array([-1.0, 5.0]), m)

    def test_against_brute_force(self):
        rng = np.random.default_rng(1)
        m = random_mask(rng, 0.02)
        pts = rng.uniform(-20, 276, size=(10_000, 2))
        got = mk.inside(pts, m)
        for p, g in zip(pts, got):
            ix, iy = int(np.floor(p[0])), int(np.floor(p[1]))
            expected = 0 <= ix < 256 and 0 <= iy < 256 and bool(m.grid[iy, ix])
            assert bool(g) == expected


class TestDistanceTransform:
    def test_full_mask_is_zero(self):
        field = mk.distance_transform(PersonMask(np.ones((256, 256), dtype=bool)))
        assert np.all(field.values == 0.0)

    def test_three_four_five(self):
        grid = np.zeros((256, 256), dtype=bool)
        grid[10, 10] = True
        field = mk.distance_transform(PersonMask(grid))
        assert field.values[14, 13] == 5.0

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError, match="empty"):
            mk.distance_transform(PersonMask(np.zeros((256, 256), dtype=bool)))

    def test_against_brute_force(self):
        rng = np.random.default_rng(2)
        m = random_mask(rng, 0.0008)
        field = mk.distance_transform(m)
        ys, xs = np.nonzero(m.grid)
        pix = np.stack([xs, ys], axis=1).astype(float)
        probes = rng.integers(0, 256, size=(400, 2))
        for px, py in probes:
            d = np.sqrt(((pix - [px, py]) ** 2).sum(axis=1)).min()
            assert abs(field.values[py, px] - d) < 1e-9

    def test_zero_iff_inside(self):
        rng = np.random.default_rng(3)
        m = random_mask(rng, 0.01)
        field = mk.distance_transform(m)
        assert np.array_equal(field.values == 0.0, m.grid)

    def test_lipschitz_metric_property(self):
        rng = np.random.default_rng(4)
        m = random_mask(rng, 0.005)
        v = mk.distance_transform(m).values
        assert np.max(np.abs(np.diff(v, axis=0))) <= 1.0 + 1e-12
        assert np.max(np.abs(np.diff(v, axis=1))) <= 1.0 + 1e-12
        # random pixel pairs obey |DF(p) - DF(q)| <= ||p - q||
        p = rng.integers(0, 256, size=(500, 2))
        q = rng.integers(0, 256, size=(500, 2))
        dv = np.abs(v[p[:, 1], p[:, 0]] - v[q[:, 1], q[:, 0]])
        dist = np.sqrt(((p - q) ** 2).sum(axis=1))
        assert np.all(dv <= dist + 1e-9)


class TestMaskDistance:
    def test_out_of_grid_matches_brute_force(self):
        rng = np.random.default_rng(5)
        m = random_mask(rng, 0.001)
        field = mk.distance_transform(m)
        pts = np.array([[-10.0, 40.0], [300.0, 10.0], [50.0, -5.0], [120.0, 260.0]])
        got = mk.mask_distance(pts, field)
        ys, xs = np.nonzero(m.grid)
        pix = np.stack([xs, ys], axis=1).astype(float)
        for p, g in zip(pts, got):
            ref = np.sqrt(((pix - np.floor(p)) ** 2).sum(axis=1)).min()
            assert abs(g - ref) < 1e-9


class TestObjectOcclusion:
    def test_all_inside_not_occluded(self):
        m = blob_mask(128, 128, 60)
        pts = np.tile([128.0, 128.0], (30, 1))
        assert mk.detect_object_occlusion(pts, m) is False

    def test_all_outside_occluded(self):
        m = blob_mask(30, 30, 5)
        pts = np.tile([200.0, 200.0], (30, 1))
        assert mk.detect_object_occlusion(pts, m) is True

    def test_flag_flips_at_tau_crossing(self):
        m = blob_mask(128, 128, 60)
        inside_pt, outside_pt = [128.0, 128.0], [250.0, 250.0]
        for n_in in range(0, 21):
            pts = np.array([inside_pt] * n_in + [outside_pt] * (20 - n_in))
            expected = (n_in / 20.0) < mk.OBJECT_OCCLUSION_TAU
            assert mk.detect_object_occlusion(pts, m) == expected

    def test_no_point_in_crop_raises(self):
        m = blob_mask(128, 128, 10)
        with pytest.raises(ValueError, match="inside the crop"):
            mk.detect_object_occlusion(np.array([[-5.0, -5.0]]), m)


class TestCapsules:
    def test_segment_pixels_are_covered(self):
        seg = np.array([[[40.0, 40.0], [200.0, 90.0]]])
        grid = mk.rasterize_capsules(seg, np.array([8.0]))
        for t in np.linspace(0, 1, 25):
            p = seg[0, 0] * (1 - t) + seg[0, 1] * t
            assert grid[int(p[1]), int(p[0])]

    def test_radius_bound(self):
        seg = np.array([[[100.0, 100.0], [100.0, 100.0]]])
        grid = mk.rasterize_capsules(seg, np.array([5.0]))
        ys, xs = np.nonzero(grid)
        d = np.sqrt((xs - 100.0) ** 2 + (ys - 100.0) ** 2)
        assert np.all(d <= 5.0 + 1e-9)
