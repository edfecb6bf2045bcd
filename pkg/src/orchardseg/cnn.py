"""Patch CNN with optional metadata at a fully connected layer.

Whole-image inference uses shift-and-stitch: the network is run fully
convolutionally on ``f*f`` shifted copies of the padded image and the
downsampled outputs are interlaced. Each output pixel then goes through the
same im2col/matmul arithmetic as a sliding-window forward on its own patch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metadata as md
from .msmlp import pixel_metadata
from .nn import (Conv2D, Dense, DimensionError, Dropout, Flatten, MaxPool2D, Network, TrainConfig, _im2col,
                 conv2d_forward, matmul, maxpool_forward, relu, softmax_forward)
from .training import balanced_instances, fit, random_instances

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


@dataclass
class CnnArch:
    input_side: int = 48
    channels: int = 3
    conv: tuple[tuple[int, int], ...] = ((64, 7), (128, 6))  # (kernels, side) per block
    fc: tuple[int, ...] = (256, 256)
    keep_prob: float = 0.5
    meta_layer: int = 0  # index into ``fc`` receiving U D
    metadata: md.EncoderSpec | None = None

    def __post_init__(self):
        self.conv = tuple(tuple(c) for c in self.conv)
        self.fc = tuple(self.fc)
        self.geometry()
        if not 0 <= self.meta_layer < len(self.fc):
            raise GeometryError("metadata layer index outside the fully connected stack")

    def geometry(self):
        """Spatial sides after every conv and pool, validated."""
        side, chain = self.input_side, [self.input_side]
        for _, k in self.conv:
            side = side - k + 1
            if side < 2:
                raise GeometryError(f"convolution leaves a {side}-pixel map")
            chain.append(side)
            if side % 2:
                raise GeometryError(f"pooling needs an even side, got {side}")
            side //= 2
            chain.append(side)
        return chain

    @property
    def factor(self):
        return 2 ** len(self.conv)

    @property
    def final_side(self):
        return self.geometry()[-1]

    @property
    def flat_dim(self):
        return self.final_side ** 2 * self.conv[-1][0]

    @property
    def meta_dim(self):
        return self.metadata.dim if self.metadata is not None else 0

    def to_dict(self):
        return {"kind": "cnn", "input_side": self.input_side, "channels": self.channels,
                "conv": [list(c) for c in self.conv], "fc": list(self.fc), "keep_prob": self.keep_prob,
                "meta_layer": self.meta_layer,
                "metadata": self.metadata.to_dict() if self.metadata is not None else None}

    @classmethod
    def from_dict(cls, d):
        meta = md.EncoderSpec.from_dict(d["metadata"]) if d.get("metadata") else None
        return cls(input_side=d["input_side"], channels=d["channels"], conv=tuple(map(tuple, d["conv"])),
                   fc=tuple(d["fc"]), keep_prob=d["keep_prob"], meta_layer=d["meta_layer"], metadata=meta)


class Cnn:
    def __init__(self, arch: CnnArch, network: Network):
        self.arch = arch
        self.network = network

    @classmethod
    def empty(cls, arch, dtype=np.float64):
        layers = []
        c = arch.channels
        for n, k in arch.conv:
            layers += [Conv2D(c, n, k, "relu", dtype=dtype), MaxPool2D()]
            c = n
        layers.append(Flatten())
        width = arch.flat_dim
        for i, n in enumerate(arch.fc):
            nm = arch.meta_dim if i == arch.meta_layer else 0
            layers += [Dense(width, n, "relu", n_meta=nm, dtype=dtype), Dropout(arch.keep_prob)]
            width = n
        layers.append(Dense(width, 2, "identity", dtype=dtype))
        return cls(arch, Network(layers))

    @classmethod
    def initialised(cls, arch, rng, dtype=np.float64):
        """He-normal weights, zero biases, zero metadata and softmax weights."""
        model = cls.empty(arch, dtype=np.float64)
        for layer in model.network.layers:
            if isinstance(layer, (Conv2D, Dense)):
                W = layer.params["W"]
                fan_in = int(np.prod(W.shape[1:]))
                if layer is not model.network.layers[-1]:
                    W[:] = rng.normal(0.0, np.sqrt(2.0 / fan_in), W.shape)
        return model.astype(dtype)

    @property
    def dtype(self):
        return self.network.layers[0].params["W"].dtype

    def astype(self, dtype):
        self.network.astype(dtype)
        return self

    def convs(self):
        return [l for l in self.network.layers if isinstance(l, Conv2D)]

    def denses(self):
        return [l for l in self.network.layers if isinstance(l, Dense)]


def pad_image(image, arch, extra=0):
    half = arch.input_side // 2
    return np.pad(image, ((half, half + extra), (half, half + extra), (0, 0)))


def extract_cnn_patches(padded, rows, cols, side):
    """(N, side, side, C) windows whose top-left is (row, col) in padded coordinates,
    i.e. centred on (row, col) of the unpadded image."""
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(padded, (side, side), axis=(0, 1))  # H', W', C, s, s
    return np.ascontiguousarray(win[np.asarray(rows), np.asarray(cols)].transpose(0, 2, 3, 1))


def cnn_forward(patch, D, model):
    """Fruit probability for one (side, side, C) patch."""
    arch = model.arch
    patch = np.asarray(patch)
    if patch.shape != (arch.input_side, arch.input_side, arch.channels):
        raise DimensionError(f"patch shape {patch.shape} != {(arch.input_side,) * 2 + (arch.channels,)}")
    if arch.meta_dim == 0 and D is not None and np.size(D) > 0:
        raise ValueError("model has no metadata input; refusing metadata vector")
    if arch.meta_dim and D is None:
        raise ValueError("metadata-enabled model needs a metadata vector")
    meta = None if not arch.meta_dim else np.asarray(D, dtype=model.dtype).reshape(1, -1)
    return float(model.network.predict_proba(patch[None].astype(model.dtype), meta)[0, 1])


def cnn_forward_batch(model, patches, D=None):
    meta = None if not model.arch.meta_dim else np.asarray(D, dtype=model.dtype)
    return model.network.predict_proba(np.asarray(patches, dtype=model.dtype), meta)[:, 1]


def sliding_window_map(image, meta, model, noise_seed=0, batch=32):
    """Per-pixel reference path: one patch forward per pixel."""
    arch = model.arch
    h, w = image.shape[:2]
    padded = pad_image(np.asarray(image, dtype=model.dtype), arch)
    rows, cols = (a.ravel() for a in np.mgrid[0:h, 0:w])
    D = None
    if arch.meta_dim:
        noise = pixel_noise_map(arch.metadata, noise_seed, h, w)
        D = md.encode_pixels(arch.metadata, meta, rows, cols, None if noise is None else noise.ravel(), model.dtype)
    out = np.empty(h * w)
    for s in range(0, h * w, batch):
        sl = slice(s, s + batch)
        P = extract_cnn_patches(padded, rows[sl], cols[sl], arch.input_side)
        out[sl] = cnn_forward_batch(model, P, None if D is None else D[sl])
    return out.reshape(h, w)


def pixel_noise_map(spec, noise_seed, h, w):
    if spec is None or "noise" not in spec.enabled:
        return None
    return np.random.default_rng(noise_seed).random((h, w))


def _fully_conv(model, crop, meta_rows):
    """Run the network fully convolutionally on one shifted crop.

    ``meta_rows`` is the (ny*nx, M) metadata matrix for the output grid
    or None. Returns (ny, nx) fruit probabilities.
    """
    arch = model.arch
    x = crop
    for conv in model.convs():
        z = conv2d_forward(x, conv.params["W"], conv.params["b"])
        x, _ = maxpool_forward(relu(z))
    fs = arch.final_side
    ny, nx = x.shape[0] - fs + 1, x.shape[1] - fs + 1
    h = _im2col(x[None], fs, fs)  # (ny*nx, fs*fs*C), same order as Flatten
    for i, dense in enumerate(model.denses()):
        W, b = dense.params["W"], dense.params["b"]
        z = matmul(h, W.T)
        if dense.n_meta:
            z = z + matmul(meta_rows, dense.params["U"].T)
        z = z + b
        h = relu(z) if dense.activation == "relu" else z
    return softmax_forward(h)[:, 1].reshape(ny, nx)


def cnn_infer_image(image, meta, model, noise_seed=0, return_coverage=False):
    """Dense probability map by shift-and-stitch over ``f*f`` shifted inputs."""
    arch = model.arch
    f, side = arch.factor, arch.input_side
    h, w = image.shape[:2]
    padded = pad_image(np.asarray(image, dtype=model.dtype), arch, extra=f)
    noise = pixel_noise_map(arch.metadata, noise_seed, h, w) if arch.meta_dim else None
    out = np.zeros((h, w))
    coverage = np.zeros((h, w), np.int64)
    for dy in range(f):
        for dx in range(f):
            ny, nx = -(-(h - dy) // f), -(-(w - dx) // f)
            if ny <= 0 or nx <= 0:
                continue
            crop = padded[dy:dy + side + f * (ny - 1), dx:dx + side + f * (nx - 1)]
            D = None
            if arch.meta_dim:
                rr, cc = np.mgrid[dy:h:f, dx:w:f]
                D = md.encode_pixels(arch.metadata, meta, rr.ravel(), cc.ravel(),
                                     None if noise is None else noise[dy::f, dx::f].ravel(), model.dtype)
            out[dy::f, dx::f] = _fully_conv(model, crop, D)
            coverage[dy::f, dx::f] += 1
    if not np.all(coverage == 1):
        raise AssertionError("interlace did not cover every pixel exactly once")
    return (out, coverage) if return_coverage else out


# ---------------------------------------------------------------------------
# training


@dataclass
class CnnTraining:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.02, momentum=0.9, l2=1e-5, epochs=8, batch_size=64))
    val_instances: int = 2000
    patience: int = 10


def train_cnn(images, masks, metas, arch, n_instances, settings=None, val=None, seed=0, history=None):
    """Train a CNN on balanced patches; ``val`` is ``(images, masks, metas)``."""
    st = settings or CnnTraining()
    cfg = st.train
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng([seed, 2])
    model = Cnn.initialised(arch, rng, dtype)
    padded = [pad_image(np.asarray(im, dtype=dtype), arch) for im in images]
    ii, rr, cc, y = balanced_instances(masks, n_instances, rng)
    D = pixel_metadata(arch.metadata, metas, ii, rr, cc, rng, dtype)

    def gather(pads, ii, rr, cc, idx):
        X = np.empty((len(idx), arch.input_side, arch.input_side, arch.channels), dtype)
        for k in np.unique(ii[idx]):
            sel = ii[idx] == k
            X[sel] = extract_cnn_patches(pads[k], rr[idx][sel], cc[idx][sel], arch.input_side)
        return X

    def features(idx):
        return gather(padded, ii, rr, cc, idx), (None if D is None else D[idx])

    vset = None
    if val is not None:
        vimgs, vmasks, vmetas = val
        vpad = [pad_image(np.asarray(im, dtype=dtype), arch) for im in vimgs]
        vi, vr, vc, vy = random_instances(vmasks, st.val_instances, rng)
        VD = pixel_metadata(arch.metadata, vmetas, vi, vr, vc, rng, dtype)
        vset = (lambda idx: (gather(vpad, vi, vr, vc, idx), None if VD is None else VD[idx]), vy)
    fit(model.network, features, y, cfg, val=vset, patience=st.patience, history=history)
    return model
