"""On-disk formats: images, masks, probability maps, tables, dataset descriptors, models.

Dataset layout::

    dataset.ini          descriptor (extents, split, rows, metadata ranges, ROI)
    images/<id>.png      8-bit RGB
    masks/<id>.png       8-bit, 0/255 (optional)
    annotations.csv      image_id, center_row, center_col, radius
    metadata.csv         image_id, row_id, azimuth, row_offset, col_offset, easting, northing, heading
    harvest.csv          row_id, count (orchards only)
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import metadata as md
from .cnn import Cnn, CnnArch
from .detect import Detection
from .msmlp import MsMlp, MsMlpArch
from .pretrain import ZcaTransform
from .synthgen import FramePose


class DatasetError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class IntegrityError(ModelFormatError):
    pass


# ---------------------------------------------------------------------------
# primitives


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _png_bytes(arr, mode=None):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def write_image(path, img):
    """Float RGB in [0, 1] (or uint8) to an 8-bit PNG."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    atomic_write(path, _png_bytes(a))


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask):
    atomic_write(path, _png_bytes(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)))


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im) > 127


def quantise_prob(prob):
    return np.round(np.clip(prob, 0, 1) * 65535).astype(np.uint16)


def write_prob(path, prob):
    """Probability map as 16-bit grayscale PNG."""
    q = quantise_prob(prob)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_prob(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0


def write_table(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_table(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetDescriptor:
    root: Path
    height: int
    width: int
    kind: str = "scenes"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    n_rows: int = 15
    frame_height: int | None = None
    frame_width: int | None = None
    azimuth_range: tuple[float, float] = (-180.0, 180.0)
    channels: int = 8
    roi: tuple[float, float, float, float] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if len(self.split) != 3 or any(r < 0 for r in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise DatasetError(f"split ratios {self.split} must be non-negative and sum to 1")

    def encoder(self, enabled=()):
        return md.EncoderSpec(enabled=tuple(enabled), frame_height=float(self.frame_height or self.height),
                              frame_width=float(self.frame_width or self.width), n_rows=self.n_rows,
                              azimuth_range=tuple(self.azimuth_range), channels=self.channels)

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["dataset"] = {
            "kind": self.kind, "height": str(self.height), "width": str(self.width),
            "split": ", ".join(repr(float(r)) for r in self.split), "split_seed": str(self.split_seed),
            "n_rows": str(self.n_rows),
        }
        if self.roi is not None:
            cp["dataset"]["roi"] = ", ".join(repr(float(v)) for v in self.roi)
        cp["metadata"] = {
            "frame_height": str(self.frame_height or self.height), "frame_width": str(self.frame_width or self.width),
            "azimuth_range": ", ".join(repr(float(v)) for v in self.azimuth_range), "channels": str(self.channels),
        }
        if self.extra:
            cp["extra"] = {k: str(v) for k, v in sorted(self.extra.items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "dataset.ini"
        if not path.exists():
            raise DatasetError(f"descriptor not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path, encoding="utf-8")
        try:
            d, m = cp["dataset"], cp["metadata"]

            def floats(s):
                return tuple(float(v) for v in s.split(","))

            return cls(
                root=path.parent, height=d.getint("height"), width=d.getint("width"), kind=d.get("kind", "scenes"),
                split=floats(d.get("split", "0.8, 0.1, 0.1")), split_seed=d.getint("split_seed", 0),
                n_rows=d.getint("n_rows", 15), roi=floats(d["roi"]) if "roi" in d else None,
                frame_height=m.getint("frame_height"), frame_width=m.getint("frame_width"),
                azimuth_range=floats(m.get("azimuth_range", "-180, 180")), channels=m.getint("channels", 8),
                extra=dict(cp["extra"]) if "extra" in cp else {},
            )
        except (KeyError, ValueError) as e:
            if isinstance(e, DatasetError):
                raise
            raise DatasetError(f"invalid descriptor {path}: {e}") from e


def split_ids(ids, ratios, seed):
    """Deterministic permutation split into train/val/test lists."""
    ids = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    order = [ids[k] for k in perm]
    return {"train": sorted(order[:n_train]), "val": sorted(order[n_train:n_train + n_val]),
            "test": sorted(order[n_train + n_val:])}


class Dataset:
    """Lazily loaded images, masks, annotations and metadata."""

    def __init__(self, desc: DatasetDescriptor):
        self.desc = desc
        root = desc.root
        meta_path = root / "metadata.csv"
        if not meta_path.exists():
            raise DatasetError(f"missing metadata table {meta_path}")
        self._meta = {}
        self._poses = {}
        for row in read_table(meta_path):
            iid = row["image_id"]
            rid = int(row["row_id"])
            if not 0 <= rid < desc.n_rows:
                raise DatasetError(f"image {iid}: unknown row id {rid}")
            self._meta[iid] = md.ImageMeta(row_id=rid, azimuth=float(row["azimuth"]),
                                           row_offset=int(row["row_offset"]), col_offset=int(row["col_offset"]))
            self._poses[iid] = FramePose(iid, float(row["easting"]), float(row["northing"]),
                                         float(row["heading"]), rid)
        self.ids = list(self._meta)
        for iid in self.ids:
            if not self.image_path(iid).exists():
                raise DatasetError(f"missing image file {self.image_path(iid)}")
        self._ann = {iid: [] for iid in self.ids}
        ann_path = root / "annotations.csv"
        if ann_path.exists():
            for row in read_table(ann_path):
                if row["image_id"] not in self._ann:
                    raise DatasetError(f"annotation for unknown image {row['image_id']}")
                self._ann[row["image_id"]].append(
                    (float(row["center_row"]), float(row["center_col"]), float(row["radius"])))
        self.split = split_ids(self.ids, desc.split, desc.split_seed)

    def image_path(self, iid):
        return self.desc.root / "images" / f"{iid}.png"

    def mask_path(self, iid):
        return self.desc.root / "masks" / f"{iid}.png"

    def image(self, iid):
        img = read_image(self.image_path(iid))
        if img.shape[:2] != (self.desc.height, self.desc.width):
            raise DatasetError(f"image {iid} is {img.shape[:2]}, descriptor says "
                               f"{(self.desc.height, self.desc.width)}")
        return img

    def mask(self, iid):
        p = self.mask_path(iid)
        if not p.exists():
            raise DatasetError(f"missing mask file {p}")
        m = read_mask(p)
        if m.shape != (self.desc.height, self.desc.width):
            raise DatasetError(f"mask {iid} extent mismatch")
        return m

    def annotations(self, iid):
        return list(self._ann[iid])

    def meta(self, iid):
        return self._meta[iid]

    def pose(self, iid):
        return self._poses[iid]

    def harvest(self):
        p = self.desc.root / "harvest.csv"
        if not p.exists():
            raise DatasetError(f"missing harvest table {p}")
        return {int(r["row_id"]): int(r["count"]) for r in read_table(p)}

    def load(self, subset):
        ids = self.split[subset] if isinstance(subset, str) else list(subset)
        return ids, [self.image(i) for i in ids], [self.mask(i) for i in ids], [self.meta(i) for i in ids]


def load_dataset(path):
    return Dataset(DatasetDescriptor.read(path))


def write_dataset(desc, items, harvest=None):
    """Write ``items`` of (image_id, image, SceneTruth, FramePose or None)."""
    root = desc.root
    meta_rows, ann_rows = [], []
    for iid, img, truth, pose in items:
        write_image(root / "images" / f"{iid}.png", img)
        write_mask(root / "masks" / f"{iid}.png", truth.mask)
        m = truth.meta
        pose = pose or FramePose(iid, 0.0, 0.0, 0.0, m.row_id)
        meta_rows.append((iid, m.row_id, float(m.azimuth), m.row_offset, m.col_offset,
                          float(pose.easting), float(pose.northing), float(pose.heading)))
        for r, c, rad in truth.circles:
            ann_rows.append((iid, r, c, rad))
    write_table(root / "metadata.csv", ["image_id", "row_id", "azimuth", "row_offset", "col_offset",
                                        "easting", "northing", "heading"], meta_rows)
    write_table(root / "annotations.csv", ["image_id", "center_row", "center_col", "radius"], ann_rows)
    if harvest is not None:
        write_table(root / "harvest.csv", ["row_id", "count"], sorted(harvest.items()))
    atomic_write(root / "dataset.ini", desc.to_ini().encode("utf-8"))


# ---------------------------------------------------------------------------
# models

MAGIC = b"ORCHSEG\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _model_arrays(model):
    arrays = []
    if isinstance(model, MsMlp):
        for k, z in enumerate(model.zca):
            arrays += [(f"zca/{k}/mean", z.mean), (f"zca/{k}/matrix", z.matrix)]
    for i, layer in enumerate(model.network.layers):
        for name in sorted(layer.params):
            arrays.append((f"layers/{i}/{name}", layer.params[name]))
    return arrays


def model_bytes(model, provenance=None):
    arrays = _model_arrays(model)
    entries, blobs, offset = [], [], 0
    for name, a in arrays:
        a = np.ascontiguousarray(a)
        data = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"arch": model.arch.to_dict(), "arrays": entries, "provenance": provenance or {}}
    if isinstance(model, MsMlp):
        header["zca_eps"] = [float(z.eps) for z in model.zca]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hjson)) + hjson + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_model(path, model, provenance=None):
    atomic_write(path, model_bytes(model, provenance))


def parse_model(data: bytes):
    if len(data) < _PREFIX.size + 32:
        raise IntegrityError("model file truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if version != VERSION:
        raise ModelVersionError(f"model format version {version} is not supported (expected {VERSION})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("model file checksum mismatch")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    blob = body[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    arch_d = header["arch"]
    if arch_d["kind"] == "msmlp":
        model = MsMlp.empty(MsMlpArch.from_dict(arch_d))
        model.zca = [ZcaTransform(arrays[f"zca/{k}/mean"], arrays[f"zca/{k}/matrix"], eps)
                     for k, eps in enumerate(header["zca_eps"])]
    elif arch_d["kind"] == "cnn":
        model = Cnn.empty(CnnArch.from_dict(arch_d))
    else:
        raise ModelFormatError(f"unknown architecture kind {arch_d['kind']!r}")
    for i, layer in enumerate(model.network.layers):
        for name in list(layer.params):
            key = f"layers/{i}/{name}"
            if key not in arrays or arrays[key].shape != layer.params[name].shape:
                raise ModelFormatError(f"parameter {key} missing or misshapen")
            layer.params[name] = arrays[key]
    model.provenance = header.get("provenance", {})
    return model


def load_model(path):
    return parse_model(Path(path).read_bytes())


def write_detections(path, rows):
    """rows of (image_id, Detection)."""
    write_table(path, ["image_id", "row", "col", "radius", "score"],
                [(iid, float(d.row), float(d.col), float(d.radius), "" if d.score is None else float(d.score))
                 for iid, d in rows])


def read_detections(path):
    out = {}
    for r in read_table(path):
        out.setdefault(r["image_id"], []).append(
            Detection(float(r["row"]), float(r["col"]), float(r["radius"]),
                      float(r["score"]) if r["score"] else None))
    return out
