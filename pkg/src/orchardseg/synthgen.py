"""Synthetic orchard scenes with exact ground truth.

Scenes are foliage backgrounds with shaded fruit disks, optional fruit
clusters, foreground leaf occluders and a vertical illumination gradient
tied to the frame row coordinate. Shapes are rasterised with integer
arithmetic so masks are platform independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .metadata import ImageMeta

# mean RGB of the three fruit varieties: red, pink-green, green
PALETTES = (
    (0.78, 0.16, 0.14),
    (0.80, 0.50, 0.36),
    (0.50, 0.68, 0.24),
)
LEAF = (0.22, 0.45, 0.15)
BRANCH = (0.38, 0.27, 0.17)
SUNLIT = (0.48, 0.66, 0.22)


@dataclass
class Fruit:
    row: int
    col: int
    radius: int
    palette: int = 0
    fruit_id: int = -1


@dataclass
class SceneSpec:
    height: int = 120
    width: int = 160
    fruit_count: tuple[int, int] = (3, 8)
    radius: tuple[int, int] = (10, 28)
    cluster_prob: float = 0.2
    cluster_size: tuple[int, int] = (2, 3)
    occluder_density: float = 0.25  # expected foreground leaves per fruit
    illumination: float = 0.5
    palette_weights: tuple[float, float, float] = (0.4, 0.35, 0.25)
    min_visible: float = 0.3
    # metadata-correlated mode: target fruit pixel fraction per p_i band
    band_coverage: tuple[float, ...] | None = None
    # fruit-like background blobs per band (labelled non-fruit)
    band_distractors: tuple[float, ...] | None = None
    frame_height: int | None = None
    frame_width: int | None = None

    def __post_init__(self):
        if min(self.radius) <= 0 or self.radius[0] > self.radius[1]:
            raise ValueError("radius range must be positive and ordered")
        for p in (self.cluster_prob, self.min_visible):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if 2 * self.radius[0] + 1 > min(self.height, self.width):
            raise ValueError("fruit too large for the image")

    @property
    def n_bands(self):
        if self.band_coverage is not None:
            return len(self.band_coverage)
        if self.band_distractors is not None:
            return len(self.band_distractors)
        return 1

    @property
    def frame_h(self):
        return self.frame_height or self.height

    @property
    def frame_w(self):
        return self.frame_width or self.width


@dataclass
class SceneTruth:
    mask: np.ndarray
    circles: list  # (row, col, radius)
    meta: ImageMeta
    fruit_ids: list = field(default_factory=list)
    occluded: np.ndarray | None = None  # pixels covered by foreground leaves


def _grid(h, w):
    return np.mgrid[0:h, 0:w]


def disk(h, w, cy, cx, r):
    yy, xx = _grid(h, w)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def ellipse(h, w, cy, cx, a, b):
    """Axis-aligned ellipse with integer semi-axes a (rows) and b (cols)."""
    yy, xx = _grid(h, w)
    return (b * (yy - cy)) ** 2 + (a * (xx - cx)) ** 2 <= (a * b) ** 2


def bar(h, w, cy, cx, uy, ux, half_width, half_length=None):
    """Band of integer half width around the line through (cy, cx) along (uy, ux)."""
    yy, xx = _grid(h, w)
    dy, dx = yy - cy, xx - cx
    n2 = uy * uy + ux * ux
    across = (dy * ux - dx * uy) ** 2 <= half_width * half_width * n2
    if half_length is None:
        return across
    along = (dy * uy + dx * ux) ** 2 <= half_length * half_length * n2
    return across & along


def _smooth_field(rng, h, w, cell=16):
    small = rng.random((h // cell + 2, w // cell + 2))
    big = ndimage.zoom(small, cell, order=1)
    return big[:h, :w]


def render_background(rng, h, w):
    img = np.empty((h, w, 3))
    tone = _smooth_field(rng, h, w)
    for c in range(3):
        img[..., c] = LEAF[c] * (0.6 + 0.8 * tone)
    n_leaves = int(h * w / 150)
    for _ in range(n_leaves):
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        a, b = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        m = ellipse(h, w, cy, cx, a, b)
        base = SUNLIT if rng.random() < 0.2 else LEAF
        col = np.array(base) * rng.uniform(0.6, 1.3) + rng.normal(0, 0.03, 3)
        img[m] = col
    for _ in range(int(rng.integers(0, 3))):
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        uy, ux = int(rng.integers(-3, 4)), int(rng.integers(1, 4))
        m = bar(h, w, cy, cx, uy, ux, int(rng.integers(1, 3)))
        img[m] = np.array(BRANCH) * rng.uniform(0.7, 1.2)
    # sky gaps near the top of the frame are handled by the caller's gradient
    return img


def _shade_disk(img, rng, cy, cx, r, colour):
    h, w, _ = img.shape
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    if y0 >= y1 or x0 >= x1:
        return np.zeros((h, w), bool)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # highlight up-left of the centre
    hy, hx = cy - 0.35 * r, cx - 0.35 * r
    d = np.sqrt((yy - hy) ** 2 + (xx - hx) ** 2) / (1.35 * r)
    shade = 1.2 - 0.5 * np.clip(d, 0, 1)
    patch = np.asarray(colour)[None, None, :] * shade[..., None]
    patch = patch + rng.normal(0, 0.025, patch.shape)
    region = img[y0:y1, x0:x1]
    region[inside] = patch[inside]
    full = np.zeros((h, w), bool)
    full[y0:y1, x0:x1] = inside
    return full


def _fruit_colour(rng, palette):
    base = np.array(PALETTES[palette])
    return np.clip(base + rng.normal(0, 0.05, 3), 0, 1)


def _separated(d, r1, r2):
    # each centre stays outside the other disk by 0.3 of the smaller radius
    return d >= max(r1, r2) + 0.3 * min(r1, r2)


def sample_cluster(rng, radius_range, size, anchor, bounds=None):
    """Centres/radii of ``size`` mutually touching fruits around ``anchor``.

    Consecutive members are placed at 0.65-0.85 of the sum of radii from a
    previous member (its parent) and clear of all other members, so clusters
    are chains in which every fruit keeps its own distance peak.
    """
    lo, hi = radius_range
    members = []
    cy, cx = anchor
    for k in range(size):
        r = int(rng.integers(lo, hi + 1))
        if k == 0:
            members.append((int(cy), int(cx), r))
            continue
        for _ in range(100):
            parent = int(rng.integers(0, len(members)))
            py, px, pr = members[parent]
            d_lo = max(0.65 * (pr + r), max(pr, r) + 0.3 * min(pr, r))
            d = rng.uniform(d_lo, max(d_lo, 0.85 * (pr + r)))
            ang = rng.uniform(0, 2 * np.pi)
            ny, nx = int(round(py + d * np.sin(ang))), int(round(px + d * np.cos(ang)))
            ok = _separated(np.hypot(ny - py, nx - px), pr, r) and all(
                np.hypot(ny - my, nx - mx) >= mr + r for q, (my, mx, mr) in enumerate(members) if q != parent)
            if bounds is not None:
                h, w = bounds
                ok = ok and 0 <= ny < h and 0 <= nx < w
            if ok:
                members.append((ny, nx, r))
                break
    return members


def _palette(rng, weights):
    w = np.asarray(weights, float)
    return int(rng.choice(len(w), p=w / w.sum()))


def sample_fruits(spec, rng, count):
    """Non-overlapping fruit groups (clusters overlap internally)."""
    h, w = spec.height, spec.width
    fruits = []
    placed = []  # (row, col, radius, group)
    group = 0
    attempts = 0
    while len(fruits) < count and attempts < 200:
        attempts += 1
        r0 = spec.radius[0]
        anchor = (rng.integers(r0 // 2, h - r0 // 2), rng.integers(r0 // 2, w - r0 // 2))
        size = 1
        if rng.random() < spec.cluster_prob:
            size = int(rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1))
        size = min(size, count - len(fruits))
        members = sample_cluster(rng, spec.radius, size, anchor, bounds=(h, w))
        clash = any((my - py) ** 2 + (mx - px) ** 2 < (1.05 * (mr + pr)) ** 2
                    for my, mx, mr in members for py, px, pr, _ in placed)
        if clash:
            continue
        pal = _palette(rng, spec.palette_weights)
        for my, mx, mr in members:
            fruits.append(Fruit(my, mx, mr, pal))
            placed.append((my, mx, mr, group))
        group += 1
    return fruits


def _band_of(meta, spec):
    n = spec.n_bands
    centre = meta.row_offset + spec.height / 2
    return min(int(centre / spec.frame_h * n), n - 1)


def render_scene(spec, fruits, rng, meta, distractors=0):
    """Draw ``fruits`` over a fresh background. Returns (image, SceneTruth)."""
    h, w = spec.height, spec.width
    img = render_background(rng, h, w)
    label = np.full((h, w), -1, dtype=np.int64)
    areas = []
    for _ in range(distractors):
        r = int(rng.integers(max(3, spec.radius[0] // 2), max(4, spec.radius[0]) + 1))
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        col = _fruit_colour(rng, _palette(rng, spec.palette_weights)) * 0.85
        m = _shade_disk(img, rng, cy, cx, r, col)
        label[m] = -1
    for k, f in enumerate(fruits):
        m = _shade_disk(img, rng, f.row, f.col, f.radius, _fruit_colour(rng, f.palette))
        label[m] = k
        areas.append(int(m.sum()))
    occl = np.zeros((h, w), bool)
    n_occ = rng.poisson(spec.occluder_density * len(fruits)) if fruits else 0
    for _ in range(n_occ):
        f = fruits[int(rng.integers(0, len(fruits)))]
        cy = int(f.row + rng.integers(-f.radius, f.radius + 1))
        cx = int(f.col + rng.integers(-f.radius, f.radius + 1))
        if rng.random() < 0.5:
            m = ellipse(h, w, cy, cx, int(rng.integers(3, 8)), int(rng.integers(3, 8)))
        else:
            uy, ux = int(rng.integers(-3, 4)), int(rng.integers(1, 4))
            m = bar(h, w, cy, cx, uy, ux, int(rng.integers(1, 3)), int(rng.integers(6, 16)))
        img[m] = np.array(LEAF) * rng.uniform(0.7, 1.3) + rng.normal(0, 0.03, 3)
        label[m] = -1
        occl |= m
    # illumination falls off down the frame
    p = (meta.row_offset + np.arange(h)) / spec.frame_h
    gain = 1.0 + spec.illumination * (0.5 - p)
    img = img * gain[:, None, None]
    img = np.clip(img + rng.normal(0, 0.03, img.shape), 0, 1)
    img = np.round(img * 255).astype(np.uint8).astype(np.float64) / 255
    mask = label >= 0
    circles, ids = [], []
    for k, f in enumerate(fruits):
        vis = int((label == k).sum())
        if areas[k] and vis / areas[k] >= spec.min_visible and 0 <= f.row < h and 0 <= f.col < w:
            circles.append((f.row, f.col, f.radius))
            ids.append(f.fruit_id)
    return img, SceneTruth(mask=mask, circles=circles, meta=meta, fruit_ids=ids, occluded=occl)


def generate_scene(spec, seed, meta=None):
    """Deterministic (image, truth) for ``spec`` and ``seed``."""
    rng = np.random.default_rng(seed)
    meta = meta or ImageMeta()
    distractors = 0
    if spec.band_coverage is not None:
        band = _band_of(meta, spec)
        fruits = _fruits_for_coverage(spec, rng, spec.band_coverage[band])
    else:
        count = int(rng.integers(spec.fruit_count[0], spec.fruit_count[1] + 1))
        fruits = sample_fruits(spec, rng, count) if count else []
    if spec.band_distractors is not None:
        distractors = int(rng.poisson(spec.band_distractors[_band_of(meta, spec)]))
    return render_scene(spec, fruits, rng, meta, distractors)


def _fruits_for_coverage(spec, rng, target):
    """Add fruit groups until the disk coverage is closest to ``target``."""
    h, w = spec.height, spec.width
    pool = sample_fruits(spec, rng, 200)
    covered = np.zeros((h, w), bool)
    best, best_err = [], abs(target)
    chosen = []
    for f in pool:
        covered |= disk(h, w, f.row, f.col, f.radius)
        chosen.append(f)
        err = abs(covered.mean() - target)
        if err < best_err:
            best, best_err = list(chosen), err
        if covered.mean() > target:
            break
    return best


def segmentation_set(spec, n_images, seed, n_rows=15):
    """Sub-image dataset: image k sits in a random band of its capture frame.

    Returns a list of (image_id, image, truth).
    """
    rng = np.random.default_rng(seed)
    n_bands = max(spec.frame_h // spec.height, 1)
    out = []
    for k in range(n_images):
        band = int(rng.integers(0, n_bands))
        row_id = int(rng.integers(0, n_rows))
        meta = ImageMeta(
            row_id=row_id,
            azimuth=float(90.0 if row_id % 2 == 0 else -90.0) + float(rng.normal(0, 5)),
            row_offset=band * spec.height,
            col_offset=int(rng.integers(0, max(spec.frame_w - spec.width, 0) + 1)),
        )
        img, truth = generate_scene(spec, int(rng.integers(0, 2**31)), meta)
        out.append((f"img{k:04d}", img, truth))
    return out


def metadata_correlated_spec(**kw):
    """Preset where fruit density and distractor blobs vary with frame height."""
    base = dict(
        height=120, width=160, frame_height=960, frame_width=640,
        band_coverage=(0.03, 0.05, 0.08, 0.11, 0.14, 0.18, 0.22, 0.26),
        band_distractors=(8.0, 7.0, 6.0, 5.0, 3.0, 2.0, 1.0, 0.5),
        radius=(8, 18), illumination=0.6,
    )
    base.update(kw)
    return SceneSpec(**base)


# ---------------------------------------------------------------------------
# orchard rows


@dataclass
class OrchardSpec:
    rows: int = 15
    row_length_m: float = 10.0
    frame_spacing_m: float = 0.25
    frame_width_m: float = 0.8
    row_spacing_m: float = 4.0
    density_per_m: tuple[float, float] = (4.0, 14.0)
    hidden_fraction: float = 0.1
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(
        height=96, width=128, radius=(7, 11), cluster_prob=0.15, occluder_density=0.15))

    @property
    def px_per_m(self):
        return self.scene.width / self.frame_width_m

    def frames_per_row(self):
        return int(np.floor(self.row_length_m / self.frame_spacing_m + 1e-9)) + 1


@dataclass
class FramePose:
    image_id: str
    easting: float
    northing: float
    heading: float
    row_id: int


def orchard_world(spec, seed):
    """World fruits per row: list of arrays (fruit_id, x_px, row_px, radius, palette, hidden)."""
    rng = np.random.default_rng(seed)
    sc = spec.scene
    rows = []
    next_id = 0
    ppm = spec.px_per_m
    length_px = spec.row_length_m * ppm
    for r in range(spec.rows):
        density = rng.uniform(*spec.density_per_m)
        n = int(round(density * spec.row_length_m))
        fruits = []
        tries = 0
        while len(fruits) < n and tries < 50 * n:
            tries += 1
            x = int(rng.integers(0, int(length_px)))
            # more fruit lower in the canopy
            y = int(sc.height * np.sqrt(rng.uniform(0.05, 1.0)))
            y = min(max(y, 0), sc.height - 1)
            size = 1
            if rng.random() < sc.cluster_prob:
                size = int(rng.integers(sc.cluster_size[0], sc.cluster_size[1] + 1))
            size = min(size, n - len(fruits))
            members = sample_cluster(rng, sc.radius, size, (y, x), bounds=(sc.height, int(length_px)))
            clash = any((my - f[2]) ** 2 + (mx - f[1]) ** 2 < (1.05 * (mr + f[3])) ** 2
                        for my, mx, mr in members for f in fruits)
            if clash:
                continue
            pal = _palette(rng, sc.palette_weights)
            for my, mx, mr in members:
                hidden = int(rng.random() < spec.hidden_fraction)
                fruits.append((next_id, mx, my, mr, pal, hidden))
                next_id += 1
        rows.append(np.array(fruits, dtype=np.int64).reshape(-1, 6))
    return rows


def frame_fruits(spec, world_row, x_centre_px):
    """Fruits of one row as seen from a frame centred at ``x_centre_px``."""
    sc = spec.scene
    half = (sc.width - 1) / 2
    out = []
    for fid, x, y, r, pal, hidden in world_row:
        col = int(np.floor(x - x_centre_px + half + 0.5))
        if hidden or col + r < 0 or col - r >= sc.width:
            continue
        out.append(Fruit(int(y), col, int(r), int(pal), int(fid)))
    return out


def orchard_frames(spec, seed):
    """Yield (image_id, image, truth, pose) for every frame of every row."""
    world = orchard_world(spec, seed)
    ppm = spec.px_per_m
    for r, row in enumerate(world):
        for k in range(spec.frames_per_row()):
            x_m = k * spec.frame_spacing_m
            fruits = frame_fruits(spec, row, x_m * ppm)
            heading = 0.0 if r % 2 == 0 else 180.0
            azimuth = 90.0 if r % 2 == 0 else -90.0
            meta = ImageMeta(row_id=r, azimuth=azimuth)
            frng = np.random.default_rng([seed, r, k])
            img, truth = render_scene(spec.scene, fruits, frng, meta)
            pose = FramePose(f"r{r:02d}f{k:03d}", easting=r * spec.row_spacing_m - spec.row_spacing_m / 2,
                             northing=x_m, heading=heading, row_id=r)
            yield pose.image_id, img, truth, pose


def row_truths(world):
    """Harvest count per row (hidden fruit included)."""
    return [int(len(row)) for row in world]


# ---------------------------------------------------------------------------
# detection oracles


def cluster_mask(rng, size, radius_range=(10, 25), shape=(200, 200)):
    """Mask of one chained cluster of ``size`` fruits centred in the raster."""
    h, w = shape
    members = sample_cluster(rng, radius_range, size, (h // 2, w // 2), bounds=shape)
    mask = np.zeros(shape, bool)
    for y, x, r in members:
        mask |= disk(h, w, y, x, r)
    return mask, members


def split_disk_mask(rng, radius_range=(12, 24), bar_half_width=2, shape=(200, 200)):
    """One disk cut in two by a straight occluding bar near its centre.

    Returns the mask and the true circle (row, col, radius).
    """
    h, w = shape
    r = int(rng.integers(radius_range[0], radius_range[1] + 1))
    cy, cx = h / 2 + rng.uniform(-3, 3), w / 2 + rng.uniform(-3, 3)
    ang = rng.uniform(0, np.pi)
    off = rng.uniform(-0.3, 0.3) * r
    cut = bar(h, w, cy + off * np.cos(ang), cx - off * np.sin(ang), np.sin(ang), np.cos(ang), bar_half_width)
    return disk(h, w, cy, cx, r) & ~cut, (cy, cx, r)
