import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orchardseg.detect import Detection
from orchardseg.evaluate import r_squared
from orchardseg.yieldmap import (
    NODATA, DataError, FramePose, GridSpec, RowYield, YieldRaster, accumulate_rows, calibrate_linear,
    rasterize_yield, roi_count, select_frames,
)


def row_poses(northings, row=0, easting=0.0):
    return [FramePose(f"r{row}f{k}", easting, float(n), 0.0, row) for k, n in enumerate(northings)]


def walk_oracle(positions, spacing):
    """Step through the row accumulating distance since the last kept frame."""
    kept = [0]
    since = 0.0
    for k in range(1, len(positions)):
        since += float(np.hypot(*(np.subtract(positions[k], positions[k - 1]))))
        if since >= spacing - 1e-9:
            kept.append(k)
            since = 0.0
    return kept


class TestSelectFrames:
    def test_every_fifth(self):
        poses = row_poses(np.arange(51) * 0.1)
        kept = select_frames(poses, 0.5)
        assert [p.image_id for p in kept] == [f"r0f{k}" for k in range(0, 51, 5)]

    def test_single_frame(self):
        poses = row_poses([3.0])
        assert select_frames(poses, 0.5) == poses

    def test_first_of_each_row(self):
        poses = row_poses([0, 0.1, 0.2]) + row_poses([5, 5.1], row=1)
        kept = select_frames(poses, 0.5)
        assert [p.image_id for p in kept] == ["r0f0", "r1f0"]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.0, 0.7), min_size=1, max_size=40), st.floats(0.05, 2.0))
    def test_irregular_matches_walk(self, steps, spacing):
        north = np.cumsum(steps)
        east = np.sin(north)  # curved path
        poses = [FramePose(f"f{k}", float(e), float(n), 0.0, 0) for k, (e, n) in enumerate(zip(east, north))]
        kept = select_frames(poses, spacing)
        oracle = walk_oracle(list(zip(east, north)), spacing)
        assert [p.image_id for p in kept] == [f"f{k}" for k in oracle]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40), st.floats(0.05, 2.0))
    def test_kept_spacing(self, steps, spacing):
        north = np.cumsum(steps)
        kept = select_frames(row_poses(north), spacing)
        gaps = np.diff([p.northing for p in kept])
        assert np.all(gaps >= spacing - 1e-9)

    def test_non_finite(self):
        with pytest.raises(DataError):
            select_frames(row_poses([0.0, float("nan")]), 0.5)


class TestRoiCount:
    roi = (0, 40, 100, 60)

    def test_empty(self):
        assert roi_count([], self.roi) == 0

    def test_edge_excluded(self):
        dets = [Detection(50, 40, 3), Detection(50, 60, 3), Detection(0, 50, 3), Detection(50, 50, 3)]
        assert roi_count(dets, self.roi) == 1

    def test_enumeration(self):
        rng = np.random.default_rng(0)
        dets = [Detection(float(r), float(c), 4) for r, c in zip(rng.uniform(1, 99, 10), rng.uniform(1, 99, 10))]
        roi = (0, 0, 100, 50)
        manual = 0
        for d in dets:
            if 0 < d.row < 100 and 0 < d.col < 50:
                manual += 1
        assert roi_count(dets, roi) == manual


class TestAccumulate:
    def test_one_row(self):
        (ry,) = accumulate_rows({"a": 3, "b": 4, "c": 5}, {"a": 0, "b": 0, "c": 0})
        assert (ry.row_id, ry.count) == (0, 12)

    def test_fifteen_rows(self):
        counts = {f"r{r}f{k}": r + k for r in range(15) for k in range(4)}
        rows = {f"r{r}f{k}": r for r in range(15) for k in range(4)}
        out = accumulate_rows(counts, rows)
        assert len(out) == 15 and [r.count for r in out] == [4 * r + 6 for r in range(15)]

    def test_order_invariant(self):
        rng = np.random.default_rng(1)
        ids = [f"f{k}" for k in range(40)]
        counts = {i: int(rng.integers(0, 20)) for i in ids}
        rows = {i: int(rng.integers(0, 5)) for i in ids}
        perm = rng.permutation(ids)
        a = accumulate_rows(counts, rows)
        b = accumulate_rows({i: counts[i] for i in perm}, rows)
        assert [(r.row_id, r.count) for r in a] == [(r.row_id, r.count) for r in b]

    def test_unmapped_frame(self):
        with pytest.raises(DataError):
            accumulate_rows({"a": 1}, {})

    def test_negative_count(self):
        with pytest.raises(DataError):
            RowYield(0, -1)


class TestCalibrate:
    def test_half_counts(self):
        rows = [RowYield(r, 100 * (r + 1), 200 * (r + 1)) for r in range(5)]
        a, b, r2 = calibrate_linear(rows)
        assert a == pytest.approx(2) and b == pytest.approx(0, abs=1e-9) and r2 == pytest.approx(1, abs=1e-12)
        assert [r.estimate for r in rows] == pytest.approx([r.truth for r in rows])

    def test_normal_equations(self):
        rng = np.random.default_rng(2)
        x = rng.integers(1000, 4000, 15).astype(float)
        y = 2.7 * x + 500 + rng.normal(0, 300, 15)
        rows = [RowYield(k, int(c), int(t)) for k, (c, t) in enumerate(zip(x, y.round()))]
        a, b, r2 = calibrate_linear(rows)
        X = np.stack([[r.count for r in rows], np.ones(15)], 1).astype(float)
        Y = np.array([r.truth for r in rows], float)
        coef = np.linalg.solve(X.T @ X, X.T @ Y)
        assert abs(a - coef[0]) < 1e-9 and abs(b - coef[1]) < 1e-6
        assert r2 == r_squared([r.count for r in rows], [r.truth for r in rows])

    def test_degenerate(self):
        with pytest.raises(ValueError):
            calibrate_linear([RowYield(0, 5, 10), RowYield(1, 5, 12)])


class TestRaster:
    def test_uniform(self):
        pts = [(x, y, 7.0) for x in range(5) for y in range(4)]
        r = rasterize_yield(pts, cell=1.0)
        inside = r.values[r.values != NODATA]
        assert inside.size and np.all(inside == 7.0)

    def test_hot_frame(self):
        pts = [(x, y, 10.0 if (x, y) == (2, 2) else 1.0) for x in range(6) for y in range(6)]
        r = rasterize_yield(pts, cell=1.0)
        i, j = np.unravel_index(np.argmax(r.values), r.values.shape)
        cx, cy = r.x0 + (j + 0.5) * r.cell, r.y0 + (i + 0.5) * r.cell
        assert abs(cx - 2) <= 0.5 and abs(cy - 2) <= 0.5

    def test_quarter_weights(self):
        grid = GridSpec(0.0, 0.0, 1.0, 2, 2)
        r = rasterize_yield([(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 4)], grid=grid)
        assert r.values.shape == (1, 1) and r.values[0, 0] == 1.0

    def test_outside_hull_is_nodata(self):
        grid = GridSpec(0.0, 0.0, 1.0, 5, 5)
        r = rasterize_yield([(0, 0, 1), (1, 0, 1), (0, 1, 1)], grid=grid)
        assert r.values[0, 0] == NODATA  # corner (1, 1) lies outside the triangle
        assert r.values[3, 3] == NODATA

    def test_empty(self):
        with pytest.raises(DataError):
            rasterize_yield([])

    def test_ascii_roundtrip(self):
        rng = np.random.default_rng(3)
        pts = [(x * 0.5, y, float(rng.integers(0, 30))) for x in range(8) for y in range(3)]
        r = rasterize_yield(pts, cell=0.5)
        text = r.to_ascii_grid()
        assert text.splitlines()[5] == "NODATA_value -9999"
        back = YieldRaster.from_ascii_grid(text)
        np.testing.assert_allclose(back.values, r.values, atol=1e-6)
        assert (back.x0, back.y0, back.cell) == pytest.approx((r.x0, r.y0, r.cell))

    def test_bad_cell(self):
        with pytest.raises(ValueError):
            GridSpec(0, 0, 0.0, 3, 3)
