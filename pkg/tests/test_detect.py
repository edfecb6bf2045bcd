import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from orchardseg.detect import (
    Detection, DetectParams, ParameterError, cht_detect, detect, distance_transform, filter_boundary, morph_clean,
    threshold_map, watershed_detect,
)
from orchardseg.synthgen import cluster_mask, disk, split_disk_mask


def brute_distance(mask):
    """Distance to the nearest false pixel, the outside of the raster counting as false."""
    padded = np.pad(mask, 1, constant_values=False)
    fy, fx = np.nonzero(~padded)
    out = np.zeros(mask.shape)
    for r, c in zip(*np.nonzero(mask)):
        out[r, c] = np.sqrt(((fy - r - 1) ** 2 + (fx - c - 1) ** 2).min())
    return out


def random_disks(rng, n, shape=(200, 200), radius=(10, 25), gap=2):
    circles = []
    h, w = shape
    while len(circles) < n:
        r = int(rng.integers(radius[0], radius[1] + 1))
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        if all(np.hypot(y - cy, x - cx) > r + cr + gap for cy, cx, cr in circles):
            circles.append((y, x, r))
    mask = np.zeros(shape, bool)
    for y, x, r in circles:
        mask |= disk(h, w, y, x, r)
    return mask, circles


class TestThreshold:
    def test_zero_keeps_all(self):
        assert threshold_map(np.random.default_rng(0).random((5, 5)), 0.0).all()

    def test_one(self):
        p = np.array([[1.0, 0.999], [0.5, 1.0]])
        np.testing.assert_array_equal(threshold_map(p, 1.0), [[True, False], [False, True]])

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            threshold_map(np.zeros((2, 2)), 1.0 + 1e-9)

    def test_uniform(self):
        assert threshold_map(np.full((4, 4), 0.6), 0.5).all()


class TestMorphology:
    def test_radius_zero_identity(self):
        m = np.random.default_rng(1).random((20, 20)) > 0.5
        np.testing.assert_array_equal(morph_clean(m, 0), m)

    def test_isolated_pixel_removed(self):
        m = np.zeros((9, 9), bool)
        m[4, 4] = True
        assert not morph_clean(m, 1).any()

    def test_disk_preserved(self):
        m = disk(60, 60, 30, 30, 20)
        out = morph_clean(m, 2)
        assert abs(out.sum() - m.sum()) <= 0.15 * m.sum()

    def test_negative_radius(self):
        with pytest.raises(ParameterError):
            morph_clean(np.zeros((3, 3), bool), -1)


class TestDistance:
    def test_single_pixel(self):
        m = np.zeros((7, 7), bool)
        m[3, 3] = True
        d = distance_transform(m)
        assert d[3, 3] == 1 and d.sum() == 1

    def test_disk_centre(self):
        d = distance_transform(disk(41, 41, 20, 20, 10))
        assert abs(d[20, 20] - 10) <= 1 and d.argmax() == 20 * 41 + 20

    def test_empty(self):
        assert not distance_transform(np.zeros((5, 6), bool)).any()

    def test_all_true_uses_virtual_border(self):
        d = distance_transform(np.ones((5, 5), bool))
        assert d[2, 2] == 3 and d[0, 0] == 1

    @settings(max_examples=40, deadline=None)
    @given(arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16))))
    def test_matches_brute_force(self, m):
        np.testing.assert_array_equal(distance_transform(m), brute_distance(m))

    def test_matches_brute_force_64(self):
        m = np.random.default_rng(2).random((64, 64)) < 0.8
        np.testing.assert_array_equal(distance_transform(m), brute_distance(m))


class TestWatershed:
    def test_single_disk(self):
        (d,) = watershed_detect(disk(80, 80, 40, 37, 12))
        assert np.hypot(d.row - 40, d.col - 37) <= 2 and abs(d.radius - 12) <= 3

    def test_two_overlapping_disks(self):
        m = disk(80, 100, 40, 40, 15) | disk(80, 100, 40, 60, 15)
        assert len(watershed_detect(m)) == 2

    def test_split_disk_gives_two(self):
        m = disk(80, 80, 40, 40, 18)
        m[:, 38:43] = False
        assert len(watershed_detect(m)) == 2

    def test_empty(self):
        assert watershed_detect(np.zeros((10, 10), bool)) == []

    def test_count_non_overlapping_disks(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            mask, circles = random_disks(rng, int(rng.integers(1, 6)))
            dets = watershed_detect(mask)
            assert len(dets) == len(circles), seed
            assert all(mask[int(d.row), int(d.col)] for d in dets)

    @pytest.mark.parametrize("size", [2, 3])
    def test_clusters(self, size):
        hits = 0
        for seed in range(30):
            mask, members = cluster_mask(np.random.default_rng(seed), size)
            hits += len(watershed_detect(morph_clean(mask, 2))) == size
        assert hits >= 28


class TestHough:
    def test_solid_disk(self):
        (d,) = cht_detect(disk(80, 80, 40, 37, 12))
        assert np.hypot(d.row - 40, d.col - 37) <= 1.5 and abs(d.radius - 12) <= 2

    def test_outline(self):
        ring = disk(80, 80, 40, 40, 12) & ~disk(80, 80, 40, 40, 10)
        dets = cht_detect(ring)
        assert len(dets) == 1 and abs(dets[0].radius - 12) <= 2

    def test_blank(self):
        assert cht_detect(np.zeros((30, 30), bool)) == []

    def test_empty_radius_range(self):
        with pytest.raises(ParameterError):
            DetectParams(radius_min=20, radius_max=10)

    def test_split_disk_merged(self):
        hits = 0
        for seed in range(20):
            mask, (cy, cx, r) = split_disk_mask(np.random.default_rng(seed))
            dets = cht_detect(morph_clean(mask, 2))
            hits += len(dets) == 1 and np.hypot(dets[0].row - cy, dets[0].col - cx) <= r
        assert hits >= 18

    def test_rotation_invariance(self):
        for seed in range(10):
            mask, _ = random_disks(np.random.default_rng(seed), 3, shape=(120, 140), radius=(10, 20), gap=4)
            a = cht_detect(mask)
            b = cht_detect(np.rot90(mask))
            w = mask.shape[1]
            mapped = sorted((w - 1 - d.col, d.row) for d in a)
            got = sorted((d.row, d.col) for d in b)
            assert len(mapped) == len(got)
            for p, q in zip(mapped, got):
                assert np.hypot(p[0] - q[0], p[1] - q[1]) <= 1.0


class TestBoundary:
    dets = [Detection(5, 50, 3), Detection(50, 50, 3), Detection(50, 95, 3)]

    def test_margin_zero(self):
        assert filter_boundary(self.dets, 0, (100, 100)) == self.dets

    def test_removed_inside_margin(self):
        out = filter_boundary(self.dets + [Detection(9, 50, 2)], 10, (100, 100))
        assert out == [self.dets[1]]

    def test_interior_unchanged(self):
        assert filter_boundary(self.dets[1:2], 10, (100, 100)) == self.dets[1:2]

    def test_negative_margin(self):
        with pytest.raises(ParameterError):
            filter_boundary([], -1, (10, 10))


def test_detection_radius_positive():
    with pytest.raises(ParameterError):
        Detection(1, 1, 0)


def test_pipeline_and_unknown_method():
    prob = disk(60, 60, 30, 30, 12) * 0.9
    assert len(detect(prob, "ws")) == len(detect(prob, "cht")) == 1
    with pytest.raises(ParameterError):
        detect(prob, "blob")
