"""Pixel and detection scoring, count regression and yield error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass
class PixelScore:
    tp: int
    fp: int
    fn: int
    tn: int = 0

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self):
        return f1_from_counts(self.tp, self.fp, self.fn)


def f1_from_counts(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def border_mask(shape, border):
    m = np.ones(shape[:2], bool)
    if border > 0:
        m[:border] = m[-border:] = False
        m[:, :border] = m[:, -border:] = False
    return m


def pixel_prf(prob, gt, t, border=0):
    """Counts of ``prob >= t`` against ``gt`` over pixels outside the border."""
    prob = np.asarray(prob)
    gt = np.asarray(gt, bool)
    if prob.shape != gt.shape:
        raise ValueError(f"extent mismatch {prob.shape} vs {gt.shape}")
    valid = border_mask(gt.shape, border) if gt.ndim == 2 else np.ones(gt.shape, bool)
    pred = (prob >= t) & valid
    g = gt & valid
    tp = int(np.sum(pred & g))
    fp = int(np.sum(pred & ~g))
    fn = int(np.sum(~pred & g))
    tn = int(np.sum(valid)) - tp - fp - fn
    return PixelScore(tp, fp, fn, tn)


def threshold_grid(n=101):
    return np.round(np.linspace(0.0, 1.0, n), 12)


def f1_curve(probs, labels, grid):
    """F1 of ``probs >= t`` for every t in ``grid`` (vectorised)."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, bool).ravel()
    pos = np.sort(p[y])
    neg = np.sort(p[~y])
    tp = len(pos) - np.searchsorted(pos, grid, side="left")
    fp = len(neg) - np.searchsorted(neg, grid, side="left")
    fn = len(pos) - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def select_threshold(probs, labels, grid=None):
    """Grid threshold maximising F1; ties go to the grid point nearest 0.5.

    ``probs``/``labels`` may be arrays or lists of per-image maps.
    """
    if isinstance(probs, (list, tuple)):
        probs = np.concatenate([np.ravel(p) for p in probs])
        labels = np.concatenate([np.ravel(l) for l in labels])
    labels = np.asarray(labels, bool)
    if labels.size == 0:
        raise UndefinedMetricError("empty validation set")
    if labels.all() or not labels.any():
        raise UndefinedMetricError("validation set contains a single class; F1 is undefined")
    grid = threshold_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    f1 = f1_curve(probs, labels, grid)
    best = f1.max()
    cand = np.flatnonzero(f1 >= best - 1e-15)
    k = cand[np.argmin(np.abs(grid[cand] - 0.5))]
    return float(grid[k]), float(f1[k])


# ---------------------------------------------------------------------------
# detections


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (det index, truth index)
    false_positives: list = field(default_factory=list)
    false_negatives: list = field(default_factory=list)

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fp(self):
        return len(self.false_positives)

    @property
    def fn(self):
        return len(self.false_negatives)

    @property
    def f1(self):
        return f1_from_counts(self.tp, self.fp, self.fn)


def _centre(d):
    if hasattr(d, "row"):
        return float(d.row), float(d.col), float(d.radius)
    return float(d[0]), float(d[1]), float(d[2])


def match_detections(dets, truths, order="distance"):
    """Greedy one-to-one matching of detections to truth circles.

    A pair is admissible when the detection centre lies within the truth
    radius. ``order="distance"`` accepts admissible pairs by ascending
    distance (ties by detection then truth index); ``order="detection"``
    walks detections in index order, each taking its nearest free truth.
    """
    D = np.array([_centre(d)[:2] for d in dets], dtype=np.float64).reshape(-1, 2)
    T = np.array([_centre(t) for t in truths], dtype=np.float64).reshape(-1, 3)
    res = MatchResult()
    used_d, used_t = set(), set()
    if len(D) and len(T):
        dist = np.sqrt(((D[:, None, :] - T[None, :, :2]) ** 2).sum(-1))
        ok = dist <= T[None, :, 2]
        if order == "distance":
            di, ti = np.nonzero(ok)
            for k in np.lexsort((ti, di, dist[di, ti])):
                a, b = int(di[k]), int(ti[k])
                if a not in used_d and b not in used_t:
                    used_d.add(a)
                    used_t.add(b)
                    res.pairs.append((a, b))
        elif order == "detection":
            for a in range(len(D)):
                cands = [b for b in np.argsort(dist[a], kind="stable") if ok[a, b] and b not in used_t]
                if cands:
                    used_d.add(a)
                    used_t.add(int(cands[0]))
                    res.pairs.append((a, int(cands[0])))
        else:
            raise ValueError(f"unknown matching order {order!r}")
    res.pairs.sort()
    res.false_positives = [a for a in range(len(D)) if a not in used_d]
    res.false_negatives = [b for b in range(len(T)) if b not in used_t]
    return res


# ---------------------------------------------------------------------------
# regression


def linear_fit(x, y):
    """Least-squares ``y = a x + b``; returns (a, b, r^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise UndefinedMetricError("need at least two paired points")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    syy = np.sum((y - ym) ** 2)
    if sxx == 0:
        raise UndefinedMetricError("estimates have zero variance")
    if syy == 0:
        raise UndefinedMetricError("truths have zero variance")
    a = np.sum((x - xm) * (y - ym)) / sxx
    b = ym - a * xm
    resid = y - (a * x + b)
    r2 = 1.0 - np.sum(resid ** 2) / syy
    return float(a), float(b), float(r2)


def r_squared(estimates, truths):
    """Coefficient of determination of the linear fit of truths on estimates."""
    y = np.asarray(truths, dtype=np.float64)
    if len(y) >= 2 and np.all(y == y[0]):
        raise UndefinedMetricError("truths have zero variance")
    return linear_fit(estimates, truths)[2]


def yield_error_percent(estimates, truths):
    e = np.asarray(estimates, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if e.shape != t.shape:
        raise ValueError("estimate and truth lists differ in length")
    total = t.sum()
    if total == 0:
        raise UndefinedMetricError("total true count is zero")
    return float(np.abs(e - t).sum() / total * 100)
