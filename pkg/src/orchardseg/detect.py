"""From probability maps to individual fruit: threshold, opening, watershed or CHT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi
from skimage.feature import peak_local_max
from skimage.morphology import disk as disk_footprint
from skimage.segmentation import watershed


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    row: float
    col: float
    radius: float
    score: float | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ParameterError(f"detection radius must be positive, got {self.radius}")


@dataclass
class DetectParams:
    threshold: float = 0.5
    morph_radius: int = 2
    min_distance: int = 7  # watershed peak separation
    radius_min: int = 8
    radius_max: int = 30
    acc_threshold: float = 0.35  # fraction of a full circle's votes
    edge_threshold: float = 0.1
    min_center_distance: float = 10.0
    acc_resolution: int = 1
    margin: int = 0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ParameterError("threshold must lie in [0, 1]")
        if self.radius_min >= self.radius_max:
            raise ParameterError("radius_min must be below radius_max")
        if min(self.min_distance, self.min_center_distance, self.acc_resolution, self.radius_min) <= 0:
            raise ParameterError("distances must be positive")
        if self.morph_radius < 0 or self.margin < 0:
            raise ParameterError("morphology radius and margin must be >= 0")


def threshold_map(prob, t):
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"threshold {t} outside [0, 1]")
    return np.asarray(prob) >= t


def morph_clean(mask, radius):
    """Binary opening with a disk of the given radius (0 leaves the mask alone)."""
    mask = np.asarray(mask, bool)
    if radius < 0:
        raise ParameterError("kernel radius must be >= 0")
    if radius == 0:
        return mask.copy()
    return ndi.binary_opening(mask, structure=disk_footprint(radius))


def distance_transform(mask):
    """Euclidean distance of true pixels to the nearest false pixel.

    Pixels outside the raster count as background.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        return np.zeros(mask.shape)
    padded = np.pad(mask, 1, constant_values=False)
    return ndi.distance_transform_edt(padded)[1:-1, 1:-1]


def watershed_detect(mask, params=None):
    """One detection per basin of the negated distance map, seeded at its maxima."""
    p = params or DetectParams()
    mask = np.asarray(mask, bool)
    if not mask.any():
        return []
    dist = distance_transform(mask)
    labels, _ = ndi.label(mask)
    peaks = peak_local_max(dist, min_distance=p.min_distance, labels=labels, exclude_border=False)
    # components too thin to hold a peak still get their maximum as a seed
    have = set(labels[tuple(peaks.T)]) if len(peaks) else set()
    extra = []
    for lab, sl in enumerate(ndi.find_objects(labels), start=1):
        if lab in have or sl is None:
            continue
        sub = np.where(labels[sl] == lab, dist[sl], -1)
        r, c = np.unravel_index(np.argmax(sub), sub.shape)
        extra.append((r + sl[0].start, c + sl[1].start))
    if extra:
        peaks = np.concatenate([peaks.reshape(-1, 2), np.array(extra)])
    peaks = peaks[np.lexsort((peaks[:, 1], peaks[:, 0]))]
    markers = np.zeros(mask.shape, np.int64)
    markers[peaks[:, 0], peaks[:, 1]] = np.arange(1, len(peaks) + 1)
    basins = watershed(-dist, markers, mask=mask)
    dets = []
    for k, (r, c) in enumerate(peaks, start=1):
        if np.any(basins == k):
            dets.append(Detection(float(r), float(c), float(dist[r, c]), float(dist[r, c])))
    return dets


def mask_edges(mask, edge_threshold=0.1):
    """Edge pixels of a mask and their inward unit gradients."""
    f = ndi.gaussian_filter(np.asarray(mask, np.float64), 1.0)
    gy = ndi.sobel(f, axis=0)
    gx = ndi.sobel(f, axis=1)
    mag = np.hypot(gy, gx)
    m = np.asarray(mask, bool)
    boundary = m ^ ndi.binary_erosion(m, border_value=0)
    sel = boundary & (mag > edge_threshold * max(mag.max(), 1e-12))
    r, c = np.nonzero(sel)
    return r, c, gy[sel] / mag[sel], gx[sel] / mag[sel]


def hough_accumulator(mask, radii, edge_threshold=0.1, resolution=1):
    """Votes (R, H', W') normalised by each radius' full-circle edge count."""
    h, w = np.shape(mask)
    r, c, uy, ux = mask_edges(mask, edge_threshold)
    hh, ww = -(-h // resolution), -(-w // resolution)
    acc = np.zeros((len(radii), hh, ww))
    for k, rad in enumerate(radii):
        cy = np.rint((r + rad * uy) / resolution).astype(np.int64)
        cx = np.rint((c + rad * ux) / resolution).astype(np.int64)
        ok = (cy >= 0) & (cy < hh) & (cx >= 0) & (cx < ww)
        np.add.at(acc[k], (cy[ok], cx[ok]), 1.0)
        acc[k] = ndi.uniform_filter(acc[k], 3, mode="constant") * 9 / (2 * np.pi * rad)
    return acc


def cht_detect(mask, params=None):
    """Circles voted for by the gradient-directed edges of the mask."""
    p = params or DetectParams()
    mask = np.asarray(mask, bool)
    if not mask.any():
        return []
    radii = np.arange(p.radius_min, p.radius_max + 1)
    acc = hough_accumulator(mask, radii, p.edge_threshold, p.acc_resolution)
    best = acc.max(axis=0)
    which = acc.argmax(axis=0)
    cand = np.argwhere((best >= p.acc_threshold) & (best == ndi.maximum_filter(best, 3)))
    order = np.lexsort((cand[:, 1], cand[:, 0], -best[cand[:, 0], cand[:, 1]]))
    dets = []
    for i in order:
        y, x = cand[i]
        row, col = float(y * p.acc_resolution), float(x * p.acc_resolution)
        if any((row - d.row) ** 2 + (col - d.col) ** 2 < p.min_center_distance ** 2 for d in dets):
            continue
        dets.append(Detection(row, col, float(radii[which[y, x]]), float(best[y, x])))
    return dets


def filter_boundary(dets, margin, extents):
    if margin < 0:
        raise ParameterError("margin must be >= 0")
    h, w = extents[:2]
    return [d for d in dets if margin <= d.row <= h - 1 - margin and margin <= d.col <= w - 1 - margin]


def detect(prob, method="ws", params=None):
    """Threshold, clean, split and drop boundary detections."""
    p = params or DetectParams()
    mask = morph_clean(threshold_map(prob, p.threshold), p.morph_radius)
    if method == "ws":
        dets = watershed_detect(mask, p)
    elif method == "cht":
        dets = cht_detect(mask, p)
    else:
        raise ParameterError(f"unknown detector {method!r}")
    return filter_boundary(dets, p.margin, np.shape(prob))
