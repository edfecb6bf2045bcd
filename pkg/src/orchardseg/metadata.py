"""One-hot encoding of capture metadata into the vector D.

Fields are always concatenated in the fixed order ``p_i, p_j, r_n, s_psi,
noise``. Continuous fields are binned (8 channels by default); the row
number is categorical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FIELD_ORDER = ("p_i", "p_j", "r_n", "s_psi", "noise")


class EncodingError(ValueError):
    pass


@dataclass
class MetadataRecord:
    """Per-pixel capture context. Pixel coordinates are frame coordinates."""

    p_i: float | None = None
    p_j: float | None = None
    r_n: int | None = None
    s_psi: float | None = None
    noise: float | None = None


@dataclass
class ImageMeta:
    """Per-image metadata from which per-pixel records are derived.

    ``row_offset``/``col_offset`` place the image inside its capture frame,
    so pixel (i, j) has frame position (row_offset + i, col_offset + j).
    """

    row_id: int = 0
    azimuth: float = 0.0
    row_offset: int = 0
    col_offset: int = 0

    def record(self, i, j, noise=None):
        return MetadataRecord(p_i=self.row_offset + i, p_j=self.col_offset + j,
                              r_n=self.row_id, s_psi=self.azimuth, noise=noise)


def one_hot_continuous(value, lo, hi, channels=8):
    """Single active bin ``min(floor((v - lo) / (hi - lo) * c), c - 1)``, clamped."""
    if hi <= lo:
        raise EncodingError(f"degenerate range [{lo}, {hi}]")
    out = np.zeros(channels)
    out[continuous_bin(value, lo, hi, channels)] = 1.0
    return out


def continuous_bin(value, lo, hi, channels=8):
    if hi <= lo:
        raise EncodingError(f"degenerate range [{lo}, {hi}]")
    v = np.clip(np.asarray(value, dtype=np.float64), lo, hi)
    b = np.floor((v - lo) / (hi - lo) * channels).astype(np.int64)
    b = np.minimum(b, channels - 1)
    return int(b) if b.ndim == 0 else b


def one_hot_categorical(index, cardinality):
    if not 0 <= index < cardinality:
        raise EncodingError(f"category {index} outside [0, {cardinality})")
    out = np.zeros(cardinality)
    out[index] = 1.0
    return out


@dataclass
class EncoderSpec:
    """Which fields are encoded and how.

    ``frame_height``/``frame_width`` bound the pixel-position encoders;
    ``n_rows`` is the row-number cardinality.
    """

    enabled: tuple[str, ...] = ()
    frame_height: float = 1616.0
    frame_width: float = 1232.0
    n_rows: int = 15
    azimuth_range: tuple[float, float] = (-180.0, 180.0)
    channels: int = 8
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.enabled) - set(FIELD_ORDER)
        if unknown:
            raise EncodingError(f"unknown metadata fields {sorted(unknown)}")
        if self.channels < 1:
            raise EncodingError("channel count must be >= 1")
        self.enabled = tuple(f for f in FIELD_ORDER if f in self.enabled)

    def field_range(self, name):
        if name in self.ranges:
            return tuple(self.ranges[name])
        return {
            "p_i": (0.0, float(self.frame_height)),
            "p_j": (0.0, float(self.frame_width)),
            "s_psi": tuple(self.azimuth_range),
            "noise": (0.0, 1.0),
        }[name]

    def width(self, name):
        return self.n_rows if name == "r_n" else self.channels

    @property
    def dim(self):
        return sum(self.width(f) for f in self.enabled)

    def offsets(self):
        out, acc = {}, 0
        for f in self.enabled:
            out[f] = acc
            acc += self.width(f)
        return out

    def to_dict(self):
        return {
            "enabled": list(self.enabled), "frame_height": self.frame_height,
            "frame_width": self.frame_width, "n_rows": self.n_rows,
            "azimuth_range": list(self.azimuth_range), "channels": self.channels,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["enabled"] = tuple(d.get("enabled", ()))
        d["azimuth_range"] = tuple(d.get("azimuth_range", (-180.0, 180.0)))
        return cls(**d)


def combine_metadata(record, spec):
    """Concatenate the enabled one-hot encodings into D."""
    parts = []
    for name in spec.enabled:
        value = getattr(record, name)
        if value is None:
            raise EncodingError(f"record lacks enabled field {name!r}")
        if name == "r_n":
            parts.append(one_hot_categorical(int(value), spec.n_rows))
        else:
            lo, hi = spec.field_range(name)
            parts.append(one_hot_continuous(value, lo, hi, spec.channels))
    return np.concatenate(parts) if parts else np.zeros(0)


def active_indices(spec, meta, rows, cols, noise=None):
    """Indices of the active units of D for many pixels of one image.

    Returns an int array (N, n_enabled); each row lists one index per field,
    already offset into D. ``noise`` supplies per-pixel noise values when the
    noise field is enabled.
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    offs = spec.offsets()
    out = np.empty((rows.size, len(spec.enabled)), dtype=np.int64)
    for k, name in enumerate(spec.enabled):
        if name == "r_n":
            if not 0 <= meta.row_id < spec.n_rows:
                raise EncodingError(f"row id {meta.row_id} outside [0, {spec.n_rows})")
            idx = np.full(rows.size, meta.row_id)
        else:
            lo, hi = spec.field_range(name)
            if name == "p_i":
                v = meta.row_offset + rows.reshape(-1)
            elif name == "p_j":
                v = meta.col_offset + cols.reshape(-1)
            elif name == "s_psi":
                v = np.full(rows.size, meta.azimuth)
            else:
                if noise is None:
                    raise EncodingError("noise field enabled but no noise values supplied")
                v = np.asarray(noise).reshape(-1)
            idx = np.atleast_1d(continuous_bin(v, lo, hi, spec.channels))
        out[:, k] = offs[name] + idx
    return out


def dense_from_indices(idx, dim, dtype=np.float64):
    D = np.zeros((len(idx), dim), dtype=dtype)
    if idx.size:
        np.put_along_axis(D, idx, 1.0, axis=1)
    return D


def encode_pixels(spec, meta, rows, cols, noise=None, dtype=np.float64):
    """Dense D matrix (N, |D|) for the given pixels of one image."""
    return dense_from_indices(active_indices(spec, meta, rows, cols, noise), spec.dim, dtype)
