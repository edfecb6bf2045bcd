"""Frame selection, ROI counting, per-row totals, calibration and yield rasters."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import griddata
from scipy.spatial import QhullError

from .evaluate import linear_fit
from .synthgen import FramePose  # noqa: F401  (re-exported)

NODATA = -9999.0
SPACING_TOL = 1e-9


class DataError(ValueError):
    pass


def _by_row(poses):
    rows = OrderedDict()
    for p in poses:
        rows.setdefault(p.row_id, []).append(p)
    return rows


def select_frames(poses, spacing):
    """Greedy walk along each row keeping frames at least ``spacing`` metres apart.

    Distance is the cumulative planar path length between consecutive poses;
    the first frame of each row is always kept.
    """
    if spacing < 0:
        raise ValueError("spacing must be >= 0")
    kept = []
    for row in _by_row(poses).values():
        xy = np.array([(p.easting, p.northing) for p in row], dtype=np.float64)
        if not np.all(np.isfinite(xy)):
            raise DataError("pose positions must be finite")
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
        last = None
        for p, s in zip(row, cum):
            if last is None or s - last >= spacing - SPACING_TOL:
                kept.append(p)
                last = s
    return kept


def roi_count(dets, roi):
    """Detections whose centre lies strictly inside ``roi = (row0, col0, row1, col1)``."""
    r0, c0, r1, c1 = roi
    n = 0
    for d in dets:
        row, col = (d.row, d.col) if hasattr(d, "row") else (d[0], d[1])
        n += r0 < row < r1 and c0 < col < c1
    return int(n)


@dataclass
class RowYield:
    row_id: int
    count: int
    truth: int | None = None
    estimate: float | None = None

    def __post_init__(self):
        if self.count < 0 or (self.truth is not None and self.truth < 0):
            raise DataError("counts must be >= 0")


def accumulate_rows(frame_counts, frame_rows):
    """Sum per-frame counts per row; both arguments are keyed by image id."""
    totals = {}
    for image_id, n in frame_counts.items():
        if image_id not in frame_rows:
            raise DataError(f"frame {image_id!r} is not mapped to a row")
        row = frame_rows[image_id]
        totals[row] = totals.get(row, 0) + int(n)
    return [RowYield(r, totals[r]) for r in sorted(totals)]


def calibrate_linear(rows):
    """Fit ``truth = a * count + b`` and fill each row's calibrated estimate."""
    fitted = [r for r in rows if r.truth is not None]
    a, b, r2 = linear_fit([r.count for r in fitted], [r.truth for r in fitted])
    for r in rows:
        r.estimate = a * r.count + b
    return a, b, r2


@dataclass
class GridSpec:
    """Node lattice: node (i, j) sits at (x0 + j*cell, y0 + i*cell); i grows northwards."""

    x0: float
    y0: float
    cell: float
    n_cols: int
    n_rows: int

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        if self.n_cols < 2 or self.n_rows < 2:
            raise ValueError("grid needs at least 2x2 nodes")

    @classmethod
    def covering(cls, xs, ys, cell):
        x0 = np.floor(np.min(xs) / cell) * cell
        y0 = np.floor(np.min(ys) / cell) * cell
        nc = int(np.floor((np.max(xs) - x0) / cell + 0.5)) + 2
        nr = int(np.floor((np.max(ys) - y0) / cell + 0.5)) + 2
        return cls(float(x0), float(y0), float(cell), max(nc, 2), max(nr, 2))


@dataclass
class YieldRaster:
    x0: float
    y0: float
    cell: float
    values: np.ndarray  # (rows, cols), row 0 southmost; NODATA outside the samples
    nodata: float = NODATA

    def to_ascii_grid(self):
        """ESRI ASCII grid text (rows written north to south)."""
        nr, nc = self.values.shape
        lines = [f"ncols {nc}", f"nrows {nr}", f"xllcorner {self.x0:.6f}", f"yllcorner {self.y0:.6f}",
                 f"cellsize {self.cell:.6f}", f"NODATA_value {self.nodata:.0f}"]
        for row in self.values[::-1]:
            lines.append(" ".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ascii_grid(cls, text):
        lines = text.strip().splitlines()
        head = dict(l.split() for l in lines[:6])
        vals = np.array([[float(v) for v in l.split()] for l in lines[6:]])[::-1]
        return cls(float(head["xllcorner"]), float(head["yllcorner"]), float(head["cellsize"]), vals,
                   float(head["NODATA_value"]))


def node_values(samples, grid):
    """Mean sample value at each node (samples snap to the nearest node); NaN where empty."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    j = np.floor((s[:, 0] - grid.x0) / grid.cell + 0.5).astype(np.int64)
    i = np.floor((s[:, 1] - grid.y0) / grid.cell + 0.5).astype(np.int64)
    if np.any((i < 0) | (i >= grid.n_rows) | (j < 0) | (j >= grid.n_cols)):
        raise DataError("sample outside the grid")
    total = np.zeros((grid.n_rows, grid.n_cols))
    count = np.zeros((grid.n_rows, grid.n_cols))
    np.add.at(total, (i, j), s[:, 2])
    np.add.at(count, (i, j), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / count, np.nan)


def rasterize_yield(samples, grid=None, cell=1.0):
    """Bin (easting, northing, count) samples to nodes and interpolate bilinearly.

    Empty nodes inside the convex hull of occupied nodes are filled by linear
    interpolation; each cell is the mean of its four corner nodes (the
    bilinear value at the cell centre). Cells touching a node outside the
    hull are no-data.
    """
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if len(s) == 0:
        raise DataError("no samples to rasterise")
    if np.any(s[:, 2] < 0):
        raise DataError("counts must be >= 0")
    if grid is None:
        grid = GridSpec.covering(s[:, 0], s[:, 1], cell)
    nodes = node_values(s, grid)
    have = ~np.isnan(nodes)
    if (~have).any() and have.sum() >= 3:
        ii, jj = np.nonzero(have)
        qi, qj = np.nonzero(~have)
        try:
            filled = griddata(np.stack([ii, jj], 1).astype(float), nodes[have], np.stack([qi, qj], 1).astype(float),
                              method="linear")
            nodes[qi, qj] = filled
        except QhullError:
            pass  # collinear samples: leave empty nodes as no-data
    corners = np.stack([nodes[:-1, :-1], nodes[:-1, 1:], nodes[1:, :-1], nodes[1:, 1:]])
    cells = corners.mean(axis=0)
    cells = np.where(np.isnan(cells), NODATA, np.maximum(cells, 0.0))
    return YieldRaster(grid.x0, grid.y0, grid.cell, cells)
