"""Minimal numpy neural-network toolkit.

Layers operate on batches in NHWC layout (images) or (N, features) layout
(dense). Every layer caches what it needs during ``forward`` and exposes
``params`` / ``grads`` dicts keyed by parameter name. ``Network`` chains
layers, optionally injecting a metadata vector into one layer, and computes
the softmax cross-entropy loss with an L2 penalty on weight matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


ROW_BLOCK = 256


def matmul(a, b):
    """``a @ b`` evaluated in fixed blocks of ``ROW_BLOCK`` rows.

    BLAS picks kernels by matrix shape, and some of them accumulate in a
    different order, so a row's result could depend on how many rows are
    multiplied together. Every call here has the same left-operand shape
    (the tail block is zero padded), which makes each output row bitwise
    independent of batch size and position.
    """
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    full = m - m % ROW_BLOCK
    for s in range(0, full, ROW_BLOCK):
        np.matmul(a[s:s + ROW_BLOCK], b, out=out[s:s + ROW_BLOCK])
    if full < m:
        tail = np.zeros((ROW_BLOCK,) + a.shape[1:], dtype=a.dtype)
        tail[:m - full] = a[full:]
        out[full:] = (tail @ b)[:m - full]
    return out


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0)


_ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu, "identity": lambda z: z}


def dense_forward(x, W, b, activation="identity"):
    """activation(W x + b) for a single vector or a batch of row vectors."""
    x = np.asarray(x)
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"input extent {x.shape[-1]} != weight input extent {W.shape[1]}")
    single = x.ndim == 1
    xb = x[None] if single else x
    z = matmul(xb, W.T) + b
    out = _ACTIVATIONS[activation](z)
    return out[0] if single else out


def _im2col(x, kh, kw):
    # (N, H, W, C) -> (N*Ho*Wo, kh*kw*C), column order (row, col, channel)
    n, h, w, c = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N,Ho,Wo,C,kh,kw
    ho, wo = h - kh + 1, w - kw + 1
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def conv_output_side(side, kernel):
    return side - kernel + 1


def conv2d_forward(x, W, b, cols_out=None):
    """Valid-mode cross-correlation.

    ``x`` is (H, W, C) or (N, H, W, C); ``W`` is (K, kh, kw, C); ``b`` is (K,).
    Returns (N, Ho, Wo, K) (batch axis dropped for a single map stack).
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    n, h, w, c = xb.shape
    k, kh, kw, kc = W.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if kc != c:
        raise DimensionError(f"kernel depth {kc} != input maps {c}")
    cols = _im2col(xb, kh, kw)
    if cols_out is not None:
        cols_out.append(cols)
    out = matmul(cols, W.reshape(k, -1).T) + b
    out = out.reshape(n, h - kh + 1, w - kw + 1, k)
    return out[0] if single else out


def maxpool_forward(x, size=2, stride=2):
    """2x2 / stride-2 max pooling. Returns (pooled, argmax in 0..3)."""
    if size != 2 or stride != 2:
        raise ValueError("only 2x2 pooling with stride 2 is supported")
    single = x.ndim == 3
    xb = x[None] if single else x
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max pooling needs even sides, got {h}x{w}")
    r = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = r.argmax(axis=-1)
    out = np.take_along_axis(r, arg[..., None], axis=-1)[..., 0]
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(dout, arg):
    n, ho, wo, c = dout.shape
    g = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(g, arg[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return g.reshape(n, ho * 2, wo * 2, c)


def softmax_forward(z):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, label, weights=(), l2=0.0):
    """-log p(label) + l2 * sum ||W||^2, with p floored at ``LOG_FLOOR``.

    ``probs``/``label`` may be a single distribution and index or a batch,
    in which case the data term is averaged.
    """
    probs = np.asarray(probs)
    label = np.asarray(label)
    if probs.ndim == 1:
        p = probs[label]
    else:
        p = probs[np.arange(len(probs)), label]
    data = float(np.mean(-np.log(np.maximum(p, LOG_FLOOR))))
    penalty = sum(float(np.sum(np.square(w, dtype=np.float64))) for w in weights)
    return data + l2 * penalty


def dropout_forward(x, keep, training, rng):
    """Inverted dropout; returns (output, mask) with mask None at inference."""
    if not 0.0 < keep <= 1.0:
        raise ValueError("keep probability must lie in (0, 1]")
    if not training or keep == 1.0:
        return x, None
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


# ---------------------------------------------------------------------------
# layers


class Layer:
    takes_meta = False
    # names of parameters that receive the L2 penalty
    penalised: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self


class Dense(Layer):
    """Fully connected layer ``act(W x + U d + b)``; ``U`` exists when n_meta > 0."""

    penalised = ("W", "U")

    def __init__(self, n_in, n_out, activation="sigmoid", n_meta=0, dtype=np.float64):
        super().__init__()
        self.activation = activation
        self.n_meta = n_meta
        self.takes_meta = n_meta > 0
        self.params["W"] = np.zeros((n_out, n_in), dtype)
        self.params["b"] = np.zeros(n_out, dtype)
        if n_meta:
            self.params["U"] = np.zeros((n_out, n_meta), dtype)

    def forward(self, x, meta=None, training=False):
        W, b = self.params["W"], self.params["b"]
        if x.shape[-1] != W.shape[1]:
            raise DimensionError(f"input extent {x.shape[-1]} != {W.shape[1]}")
        z = matmul(x, W.T)
        if self.n_meta:
            if meta is None:
                raise ValueError("metadata-enabled layer needs a metadata vector")
            z = z + matmul(meta, self.params["U"].T)
        z = z + b
        out = _ACTIVATIONS[self.activation](z)
        self._cache = (x, meta, out)
        return out

    def backward(self, dy):
        x, meta, out = self._need_cache()
        if self.activation == "sigmoid":
            dz = dy * out * (1 - out)
        elif self.activation == "relu":
            dz = dy * (out > 0)
        else:
            dz = dy
        self.grads["W"] = dz.T @ x
        self.grads["b"] = dz.sum(axis=0)
        if self.n_meta:
            self.grads["U"] = dz.T @ meta
        return dz @ self.params["W"]


class MultiScaleDense(Layer):
    """Per-scale sigmoid layers whose outputs are concatenated.

    Input is (N, S, P): one flattened patch per scale. ``W`` is (S, H, P),
    ``b`` is (S, H) and the optional metadata weights ``U`` are (S, H, M).
    Output is (N, S*H) ordered scale-major.
    """

    penalised = ("W", "U")

    def __init__(self, n_scales, n_in, n_hidden, n_meta=0, dtype=np.float64):
        super().__init__()
        self.n_meta = n_meta
        self.takes_meta = n_meta > 0
        self.params["W"] = np.zeros((n_scales, n_hidden, n_in), dtype)
        self.params["b"] = np.zeros((n_scales, n_hidden), dtype)
        if n_meta:
            self.params["U"] = np.zeros((n_scales, n_hidden, n_meta), dtype)

    def preactivation(self, x, meta=None):
        W = self.params["W"]
        s, h, p = W.shape
        if x.shape[1:] != (s, p):
            raise DimensionError(f"expected (N, {s}, {p}) patches, got {x.shape}")
        z = np.stack([matmul(x[:, k], W[k].T) for k in range(s)], axis=1)
        if self.n_meta:
            if meta is None:
                raise ValueError("metadata-enabled layer needs a metadata vector")
            U = self.params["U"]
            z = z + np.stack([matmul(meta, U[k].T) for k in range(s)], axis=1)
        return z + self.params["b"]

    def forward(self, x, meta=None, training=False):
        out = sigmoid(self.preactivation(x, meta))
        self._cache = (x, meta, out)
        return out.reshape(len(x), -1)

    def backward(self, dy):
        x, meta, out = self._need_cache()
        dz = dy.reshape(out.shape) * out * (1 - out)  # N,S,H
        self.grads["W"] = np.einsum("nsh,nsp->shp", dz, x)
        self.grads["b"] = dz.sum(axis=0)
        if self.n_meta:
            self.grads["U"] = np.einsum("nsh,nm->shm", dz, meta)
        return np.einsum("nsh,shp->nsp", dz, self.params["W"])


class Conv2D(Layer):
    """Valid cross-correlation followed by an optional ReLU."""

    penalised = ("W",)

    def __init__(self, n_in, n_out, kernel, activation="relu", dtype=np.float64):
        super().__init__()
        self.activation = activation
        # the first layer of a network has no use for the input gradient
        self.input_grad = True
        self.params["W"] = np.zeros((n_out, kernel, kernel, n_in), dtype)
        self.params["b"] = np.zeros(n_out, dtype)

    def forward(self, x, meta=None, training=False):
        cols = []
        z = conv2d_forward(x, self.params["W"], self.params["b"], cols_out=cols if training else None)
        out = _ACTIVATIONS[self.activation](z)
        self._cache = (x.shape, cols[0] if cols else None, out)
        return out

    def backward(self, dy):
        xshape, cols, out = self._need_cache()
        if cols is None:
            raise StateError("Conv2D.backward needs a forward pass with training=True")
        if self.activation == "relu":
            dy = dy * (out > 0)
        W = self.params["W"]
        k, kh, kw, c = W.shape
        n, ho, wo, _ = dy.shape
        d2 = dy.reshape(-1, k)
        self.grads["W"] = (d2.T @ cols).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = (d2 @ W.reshape(k, -1)).reshape(n, ho, wo, kh, kw, c)
        dx = np.zeros(xshape, dtype=dy.dtype)
        for a in range(kh):
            for bb in range(kw):
                dx[:, a:a + ho, bb:bb + wo, :] += dcols[:, :, :, a, bb, :]
        return dx


class MaxPool2D(Layer):
    def forward(self, x, meta=None, training=False):
        out, arg = maxpool_forward(x)
        self._cache = arg
        return out

    def backward(self, dy):
        return maxpool_backward(dy, self._need_cache())


class Flatten(Layer):
    def forward(self, x, meta=None, training=False):
        self._cache = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dy):
        return dy.reshape(self._need_cache())


class Dropout(Layer):
    def __init__(self, keep=0.5):
        super().__init__()
        self.keep = keep
        self.rng = np.random.default_rng(0)

    def forward(self, x, meta=None, training=False):
        out, mask = dropout_forward(x, self.keep, training, self.rng)
        self._cache = mask
        return out

    def backward(self, dy):
        if self._cache is None:
            return dy
        return dy * self._cache


class Network:
    """A stack of layers ending in logits; softmax is applied by the loss."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._probs = None
        if self.layers and hasattr(self.layers[0], "input_grad"):
            self.layers[0].input_grad = False

    @property
    def meta_dim(self):
        return sum(getattr(l, "n_meta", 0) for l in self.layers)

    def forward(self, x, meta=None, training=False):
        if meta is not None and self.meta_dim == 0:
            raise ValueError("network has no metadata input; refusing metadata vector")
        if meta is None and self.meta_dim:
            raise ValueError("network expects a metadata vector")
        h = x
        for layer in self.layers:
            h = layer.forward(h, meta if layer.takes_meta else None, training=training)
        self._probs = softmax_forward(h)
        return self._probs

    def predict_proba(self, x, meta=None):
        return self.forward(x, meta, training=False)

    def penalised_weights(self):
        for layer in self.layers:
            for name in layer.penalised:
                if name in layer.params:
                    yield layer.params[name]

    def loss(self, probs, labels, l2=0.0):
        return cross_entropy_loss(probs, labels, tuple(self.penalised_weights()), l2)

    def backward(self, labels, l2=0.0):
        """Gradients of the mean cross-entropy plus ``l2 * sum ||W||^2``."""
        if self._probs is None:
            raise StateError("backward called before forward")
        p = self._probs
        n = len(p)
        d = p.copy()
        d[np.arange(n), labels] -= 1
        d /= n
        for layer in reversed(self.layers):
            d = layer.backward(d)
        if l2:
            for layer in self.layers:
                for name in layer.penalised:
                    if name in layer.params:
                        layer.grads[name] = layer.grads[name] + 2 * l2 * layer.params[name]
        return [(layer, name) for layer in self.layers for name in layer.params]

    def parameters(self):
        return [(layer, name) for layer in self.layers for name in layer.params]

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    lr_end: float | None = None  # defaults to learning_rate / 100
    momentum: float = 0.9
    l2: float = 1e-5
    keep_prob: float = 1.0
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr_end is None:
            self.lr_end = self.learning_rate / 100
        if self.learning_rate <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_end > self.learning_rate:
            raise ValueError("decay endpoint must not exceed the initial learning rate")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.l2 < 0:
            raise ValueError("L2 penalty must be nonnegative")
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep probability must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")

    def lr_at(self, epoch):
        """Linear interpolation from the initial rate toward ``lr_end``."""
        if self.epochs == 0:
            return self.learning_rate
        t = min(epoch, self.epochs) / self.epochs
        return self.learning_rate + (self.lr_end - self.learning_rate) * t


def sgd_momentum_step(params, grads, velocity, cfg, epoch):
    """In-place ``v <- mu v - lr_t g; W <- W + v`` over parallel lists."""
    lr = cfg.lr_at(epoch)
    for p, g, v in zip(params, grads, velocity):
        v *= cfg.momentum
        v -= lr * g
        p += v
    return params


class SGDMomentum:
    def __init__(self, network, cfg):
        self.network = network
        self.cfg = cfg
        self.velocity = {(id(l), n): np.zeros_like(l.params[n]) for l, n in network.parameters()}

    def step(self, epoch):
        params, grads, vel = [], [], []
        for layer, name in self.network.parameters():
            params.append(layer.params[name])
            grads.append(layer.grads[name])
            vel.append(self.velocity[(id(layer), name)])
        sgd_momentum_step(params, grads, vel, self.cfg, epoch)


def train_epoch(network, optimizer, batches, cfg, epoch):
    """One pass over ``batches`` of (x, meta, y); returns mean training loss."""
    total, count = 0.0, 0
    for x, meta, y in batches:
        probs = network.forward(x, meta, training=True)
        total += network.loss(probs, y) * len(y)
        count += len(y)
        network.backward(y, cfg.l2)
        optimizer.step(epoch)
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic, numeric, floor=1e-5):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor turns the comparison into an absolute one (scaled by 1/floor)
    for entries where both gradients are tiny.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(network, x, labels, meta=None, l2=0.0, h=1e-5, seed=0, max_entries=None):
    """Compare backprop against central differences for every parameter.

    Runs in training mode; dropout layers are reseeded before every
    evaluation so that each perturbed forward pass sees the same mask. Returns a dict mapping
    ``"<layer index>.<param>"`` to the max relative error.
    """
    dropouts = [l for l in network.layers if isinstance(l, Dropout)]

    def run(backward=False):
        for d in dropouts:
            d.rng = np.random.default_rng(seed)
        probs = network.forward(x, meta, training=True)
        if backward:
            network.backward(labels, l2)
        return network.loss(probs, labels, l2)

    run(backward=True)
    analytic = {(i, n): l.grads[n].copy() for i, l in enumerate(network.layers) for n in l.params}
    rng = np.random.default_rng(seed + 1)
    report = {}
    for (i, name), g in analytic.items():
        p = network.layers[i].params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for t, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + h
            up = run()
            flat[j] = old - h
            down = run()
            flat[j] = old
            num[t] = (up - down) / (2 * h)
        report[f"{i}.{name}"] = float(relative_error(g.reshape(-1)[idx], num).max())
    return report
