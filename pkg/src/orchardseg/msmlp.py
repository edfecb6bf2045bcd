"""Multi-scale MLP pixel classifier.

Each pixel is described by one 8x8x3 window per pyramid level. The window
at scale ``s`` is centred on the continuous level coordinate ``(i*s, j*s)``
and sampled bilinearly with zeros outside the level, which is exactly what
bilinear upsampling of a convolved level produces. That identity is what
lets :func:`msmlp_infer_image` reproduce per-pixel classification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metadata as md
from .nn import Dense, DimensionError, MultiScaleDense, Network, TrainConfig, conv2d_forward, sigmoid, softmax_forward
from .pretrain import DaeConfig, ZcaTransform, dae_train, sparse_init, zca_fit
from .training import balanced_instances, fit, random_instances

log = logging.getLogger(__name__)


def round_half_up(x):
    return int(np.floor(x + 0.5))


def level_factor(scale):
    f = round_half_up(1.0 / scale)
    if f < 1 or abs(1.0 / f - scale) > 1e-9:
        raise ValueError(f"scale {scale} is not the reciprocal of an integer")
    return f


def build_pyramid(image, scales, min_side=8):
    """Box-filtered pyramid; level ``s`` has sides ``round(side * s)``."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    levels = []
    for s in scales:
        f = level_factor(s)
        hs, ws = round_half_up(h * s), round_half_up(w * s)
        if min(hs, ws) < min_side:
            raise DimensionError(f"level {s} of a {h}x{w} image is smaller than {min_side} pixels")
        if f == 1:
            levels.append(image.copy())
            continue
        padded = np.pad(image, ((0, max(hs * f - h, 0)), (0, max(ws * f - w, 0)), (0, 0)), mode="edge")
        padded = padded[:hs * f, :ws * f]
        levels.append(padded.reshape(hs, f, ws, f, -1).mean(axis=(1, 3)))
    return levels


@dataclass
class MsMlpArch:
    scales: tuple[float, ...] = (1.0, 0.5, 0.25, 0.125)
    patch: int = 8
    channels: int = 3
    hidden: int = 200
    dense: tuple[int, ...] = (200, 200)
    metadata: md.EncoderSpec | None = None

    def __post_init__(self):
        s = list(self.scales)
        if s[0] != 1.0 or any(b >= a for a, b in zip(s, s[1:])):
            raise ValueError("scales must start at 1 and strictly decrease")
        if self.patch % 2:
            raise ValueError("patch side must be even")

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def meta_dim(self):
        return self.metadata.dim if self.metadata is not None else 0

    def to_dict(self):
        return {"kind": "msmlp", "scales": list(self.scales), "patch": self.patch, "channels": self.channels,
                "hidden": self.hidden, "dense": list(self.dense),
                "metadata": self.metadata.to_dict() if self.metadata is not None else None}

    @classmethod
    def from_dict(cls, d):
        meta = md.EncoderSpec.from_dict(d["metadata"]) if d.get("metadata") else None
        return cls(scales=tuple(d["scales"]), patch=d["patch"], channels=d["channels"], hidden=d["hidden"],
                   dense=tuple(d["dense"]), metadata=meta)


def ms_mlp_2(**kw):
    return MsMlpArch(dense=(200,), **kw)


def ms_mlp_3(**kw):
    return MsMlpArch(dense=(200, 200), **kw)


def extract_patches(pyramid, rows, cols, scales, patch=8):
    """Raw windows (N, S, patch*patch*C) for pixels (rows, cols), flattened (dy, dx, c)."""
    rows = np.atleast_1d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.float64))
    half = patch // 2
    out = []
    for level, s in zip(pyramid, scales):
        pad = half + 2
        lp = np.pad(level, ((pad, pad), (pad, pad), (0, 0)))
        cy, cx = rows * s, cols * s
        r0, c0 = np.floor(cy).astype(np.int64), np.floor(cx).astype(np.int64)
        fy, fx = (cy - r0)[:, None, None, None], (cx - c0)[:, None, None, None]
        offs = np.arange(-half, half + 1)
        ri = r0[:, None] + offs + pad
        ci = c0[:, None] + offs + pad
        block = lp[ri[:, :, None], ci[:, None, :]]  # N, P+1, P+1, C
        win = ((1 - fy) * (1 - fx) * block[:, :-1, :-1] + (1 - fy) * fx * block[:, :-1, 1:]
               + fy * (1 - fx) * block[:, 1:, :-1] + fy * fx * block[:, 1:, 1:])
        out.append(win.reshape(len(rows), -1))
    return np.stack(out, axis=1)


def extract_multiscale_patch(pyramid, i, j, scales, patch=8):
    """Windows for a single pixel, shape (S, patch, patch, C)."""
    c = pyramid[0].shape[2]
    return extract_patches(pyramid, [i], [j], scales, patch)[0].reshape(len(scales), patch, patch, c)


class MsMlp:
    """Trained ms-MLP: per-scale whitening plus a network over whitened patches."""

    def __init__(self, arch: MsMlpArch, zca: list[ZcaTransform], network: Network):
        self.arch = arch
        self.zca = zca
        self.network = network

    @classmethod
    def empty(cls, arch, dtype=np.float64):
        S, P = len(arch.scales), arch.patch_dim
        layers = [MultiScaleDense(S, P, arch.hidden, n_meta=arch.meta_dim, dtype=dtype)]
        width = S * arch.hidden
        for n in arch.dense:
            layers.append(Dense(width, n, "sigmoid", dtype=dtype))
            width = n
        layers.append(Dense(width, 2, "identity", dtype=dtype))
        eye = ZcaTransform(np.zeros(P), np.eye(P), 0.0)
        return cls(arch, [eye] * S, Network(layers))

    @property
    def dtype(self):
        return self.network.layers[0].params["W"].dtype

    def whiten(self, raw):
        """Raw (N, S, P) windows -> whitened, in the model dtype."""
        out = np.empty(raw.shape, dtype=self.dtype)
        for k, z in enumerate(self.zca):
            out[:, k] = z.apply(raw[:, k])
        return out

    def astype(self, dtype):
        self.network.astype(dtype)
        return self


def _check_meta(model, D):
    if model.arch.meta_dim == 0 and D is not None and np.size(D) > 0:
        raise ValueError("model has no metadata input; refusing metadata vector")
    if model.arch.meta_dim and D is None:
        raise ValueError("metadata-enabled model needs a metadata vector")


def msmlp_forward(patch, D, model):
    """Fruit probability for one pixel's (S, p, p, C) windows."""
    _check_meta(model, D)
    raw = np.asarray(patch, dtype=np.float64).reshape(1, len(model.arch.scales), -1)
    x = model.whiten(raw)
    meta = None if not model.arch.meta_dim else np.asarray(D, dtype=model.dtype).reshape(1, -1)
    return float(model.network.predict_proba(x, meta)[0, 1])


def msmlp_forward_batch(model, raw, D=None):
    _check_meta(model, D)
    x = model.whiten(raw)
    meta = None if not model.arch.meta_dim else np.asarray(D, dtype=model.dtype)
    return model.network.predict_proba(x, meta)[:, 1]


# ---------------------------------------------------------------------------
# training


@dataclass
class MsMlpTraining:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.1, momentum=0.9, l2=1e-5, epochs=20, batch_size=100))
    dae: DaeConfig = field(default_factory=lambda: DaeConfig(epochs=5, learning_rate=0.005))
    zca_eps: float = 0.1
    pretrain_patches: int = 10000
    sparse_k: int = 15
    val_instances: int = 4000
    patience: int = 10


def pixel_metadata(spec, metas, img_idx, rows, cols, rng, dtype=np.float64):
    """Dense D rows for sampled pixels of several images."""
    if spec is None:
        return None
    D = np.zeros((len(rows), spec.dim), dtype=dtype)
    noise = rng.random(len(rows)) if "noise" in spec.enabled else None
    for k in np.unique(img_idx):
        sel = img_idx == k
        D[sel] = md.encode_pixels(spec, metas[k], rows[sel], cols[sel],
                                  None if noise is None else noise[sel], dtype)
    return D


def sample_raw(pyramids, img_idx, rows, cols, scales, patch):
    raw = np.empty((len(rows), len(scales), patch * patch * pyramids[0][0].shape[2]))
    for k in np.unique(img_idx):
        sel = img_idx == k
        raw[sel] = extract_patches(pyramids[k], rows[sel], cols[sel], scales, patch)
    return raw


def train_msmlp(images, masks, metas, arch, n_instances, settings=None, val=None, pretrain_images=None,
                seed=0, history=None):
    """Train an ms-MLP on pixel-labelled images.

    ``val`` is ``(images, masks, metas)`` used to pick the best epoch.
    ``pretrain_images`` is the held-out set for whitening and DAE filters
    (defaults to the training images).
    """
    st = settings or MsMlpTraining()
    cfg = st.train
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng([seed, 1])
    S = len(arch.scales)
    pyr = [build_pyramid(im, arch.scales) for im in images]
    pre_imgs = pretrain_images if pretrain_images is not None else images
    pre_pyr = pyr if pretrain_images is None else [build_pyramid(im, arch.scales) for im in pre_imgs]
    pre_masks = [np.zeros(im.shape[:2], bool) for im in pre_imgs]
    pi, pr, pc, _ = random_instances(pre_masks, st.pretrain_patches, rng)
    pre_raw = sample_raw(pre_pyr, pi, pr, pc, arch.scales, arch.patch)

    model = MsMlp.empty(arch, dtype=np.float64)
    first = model.network.layers[0]
    zcas = []
    for k in range(S):
        z = zca_fit(pre_raw[:, k], st.zca_eps)
        zcas.append(z)
        dcfg = DaeConfig(**{**st.dae.__dict__, "hidden": arch.hidden, "seed": int(rng.integers(2**31))})
        W, b = dae_train(z.apply(pre_raw[:, k]), dcfg)
        first.params["W"][k] = W
        first.params["b"][k] = b
    model.zca = zcas
    for layer in model.network.layers[1:-1]:
        n_out, n_in = layer.params["W"].shape
        layer.params["W"][:] = sparse_init((n_out, n_in), min(st.sparse_k, n_in), rng)
    model.astype(dtype)

    ii, rr, cc, y = balanced_instances(masks, n_instances, rng)
    X = model.whiten(sample_raw(pyr, ii, rr, cc, arch.scales, arch.patch))
    D = pixel_metadata(arch.metadata, metas, ii, rr, cc, rng, dtype)

    def features(idx):
        return X[idx], (None if D is None else D[idx])

    vset = None
    if val is not None:
        vimgs, vmasks, vmetas = val
        vpyr = [build_pyramid(im, arch.scales) for im in vimgs]
        vi, vr, vc, vy = random_instances(vmasks, st.val_instances, rng)
        VX = model.whiten(sample_raw(vpyr, vi, vr, vc, arch.scales, arch.patch))
        VD = pixel_metadata(arch.metadata, vmetas, vi, vr, vc, rng, dtype)
        vset = (lambda idx: (VX[idx], None if VD is None else VD[idx]), vy)
    fit(model.network, features, y, cfg, val=vset, patience=st.patience, history=history)
    return model


# ---------------------------------------------------------------------------
# whole-image inference


def _upsample_axis(A, n, s, axis):
    c = np.arange(n) * s
    i0 = np.floor(c).astype(np.int64)
    f = (c - i0).astype(A.dtype)
    shape = [1] * A.ndim
    shape[axis] = n
    f = f.reshape(shape)
    return np.take(A, i0, axis=axis) * (1 - f) + np.take(A, i0 + 1, axis=axis) * f


def level_response(level, kernels, patch, out_h, out_w):
    """Correlation of the zero-padded level with per-window kernels.

    Entry (r, c) is the dot product of each kernel with the window whose
    top-left corner is (r - patch/2, c - patch/2).
    """
    half = patch // 2
    h, w, ch = level.shape
    big = np.zeros((max(h, out_h) + patch, max(w, out_w) + patch, ch), dtype=kernels.dtype)
    big[half:half + h, half:half + w] = level
    big = big[:out_h + patch - 1, :out_w + patch - 1]
    W = kernels.reshape(len(kernels), patch, patch, ch)
    return conv2d_forward(big, W, np.zeros(len(kernels), dtype=kernels.dtype))


def msmlp_infer_image(image, meta, model, noise_seed=0, chunk_rows=64):
    """Dense fruit probability map with the same extents as ``image``."""
    arch = model.arch
    dtype = model.dtype
    h, w = image.shape[:2]
    pyr = build_pyramid(np.asarray(image, dtype=np.float64), arch.scales)
    first = model.network.layers[0]
    W, b = first.params["W"], first.params["b"]
    pre = []
    for k, (level, s) in enumerate(zip(pyr, arch.scales)):
        Wf, bf = model.zca[k].fold(W[k].astype(np.float64), b[k].astype(np.float64))
        oh = int(np.floor((h - 1) * s)) + 2
        ow = int(np.floor((w - 1) * s)) + 2
        A = level_response(level.astype(dtype), Wf.astype(dtype), arch.patch, oh, ow)
        if s != 1.0:
            A = _upsample_axis(_upsample_axis(A, h, s, 0), w, s, 1)
        else:
            A = A[:h, :w]
        pre.append(A + bf.astype(dtype))
    spec = arch.metadata
    noise_rng = np.random.default_rng(noise_seed)
    noise = noise_rng.random((h, w)) if spec is not None and "noise" in spec.enabled else None
    out = np.empty((h, w))
    rows_all, cols_all = np.mgrid[0:h, 0:w]
    for r0 in range(0, h, chunk_rows):
        r1 = min(r0 + chunk_rows, h)
        z = np.stack([p[r0:r1].reshape(-1, p.shape[-1]) for p in pre], axis=1)  # N,S,H
        if spec is not None and arch.meta_dim:
            idx = md.active_indices(spec, meta, rows_all[r0:r1].ravel(), cols_all[r0:r1].ravel(),
                                    None if noise is None else noise[r0:r1].ravel())
            U = first.params["U"]  # S,H,M
            z = z + U[:, :, idx].sum(axis=-1).transpose(2, 0, 1)
        hcur = sigmoid(z).reshape(len(z), -1)
        for layer in model.network.layers[1:]:
            hcur = layer.forward(hcur)
        out[r0:r1] = softmax_forward(hcur)[:, 1].reshape(r1 - r0, w)
    return out


def pixel_noise(noise_seed, h, w):
    return np.random.default_rng(noise_seed).random((h, w))
