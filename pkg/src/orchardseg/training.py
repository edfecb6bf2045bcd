"""Instance sampling and the minibatch training loop shared by both networks."""

from __future__ import annotations

import copy
import logging

import numpy as np

from .evaluate import f1_curve, threshold_grid
from .nn import SGDMomentum, TrainConfig, train_epoch

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


def balanced_instances(masks, n, rng, margin=0):
    """Pick floor(n/2) fruit and ceil(n/2) non-fruit pixels uniformly.

    Returns (image index, row, col, label) arrays, shuffled.
    """
    pos, neg = [], []
    for k, m in enumerate(masks):
        m = np.asarray(m, bool)
        valid = np.ones_like(m)
        if margin:
            valid[:margin] = valid[-margin:] = False
            valid[:, :margin] = valid[:, -margin:] = False
        for store, sel in ((pos, m & valid), (neg, ~m & valid)):
            r, c = np.nonzero(sel)
            store.append(np.stack([np.full(len(r), k), r, c], axis=1))
    pos = np.concatenate(pos) if pos else np.zeros((0, 3), int)
    neg = np.concatenate(neg) if neg else np.zeros((0, 3), int)
    if len(pos) == 0 or len(neg) == 0:
        raise SamplingError("both classes must be present in the training labels")
    n_pos, n_neg = n // 2, n - n // 2
    a = pos[rng.integers(0, len(pos), n_pos)]
    b = neg[rng.integers(0, len(neg), n_neg)]
    idx = np.concatenate([a, b])
    y = np.concatenate([np.ones(n_pos, np.int64), np.zeros(n_neg, np.int64)])
    order = rng.permutation(n)
    idx, y = idx[order], y[order]
    return idx[:, 0], idx[:, 1], idx[:, 2], y


def random_instances(masks, n, rng, margin=0):
    """Pixels drawn uniformly over all images (natural class balance)."""
    sizes = [np.asarray(m).size for m in masks]
    shapes = [np.asarray(m).shape for m in masks]
    img = rng.choice(len(masks), size=n, p=np.asarray(sizes) / sum(sizes))
    rows = np.empty(n, np.int64)
    cols = np.empty(n, np.int64)
    for k in range(len(masks)):
        sel = img == k
        h, w = shapes[k]
        rows[sel] = rng.integers(margin, h - margin, sel.sum())
        cols[sel] = rng.integers(margin, w - margin, sel.sum())
    y = np.array([masks[k][r, c] for k, r, c in zip(img, rows, cols)], dtype=np.int64)
    return img, rows, cols, y


def predict_in_batches(network, features, n, batch=512):
    out = np.empty(n)
    for s in range(0, n, batch):
        x, meta = features(np.arange(s, min(s + batch, n)))
        out[s:s + len(x)] = network.predict_proba(x, meta)[:, 1]
    return out


def best_f1(probs, labels):
    y = np.asarray(labels, bool)
    if y.all() or not y.any():
        return 0.0
    return float(f1_curve(probs, y, threshold_grid()).max())


def fit(network, features, labels, cfg: TrainConfig, val=None, patience=10, history=None):
    """Train with SGD + momentum; keep the best-validation-F1 parameters.

    ``features(idx)`` returns ``(x, meta)`` for training instances ``idx``;
    ``val`` is ``(features, labels)`` for validation instances or None.
    """
    rng = np.random.default_rng(cfg.seed)
    for layer in network.layers:
        if hasattr(layer, "rng"):
            layer.rng = np.random.default_rng([cfg.seed, 7])
    opt = SGDMomentum(network, cfg)
    labels = np.asarray(labels)
    n = len(labels)
    best_score, best_params, since = -1.0, None, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)

        def batches():
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                x, meta = features(idx)
                yield x, meta, labels[idx]

        loss = train_epoch(network, opt, batches(), cfg, epoch)
        entry = {"epoch": epoch, "loss": loss}
        if val is not None:
            vf, vy = val
            score = best_f1(predict_in_batches(network, vf, len(vy)), vy)
            entry["val_f1"] = score
            if score > best_score:
                best_score, since = score, 0
                best_params = copy.deepcopy([l.params for l in network.layers])
            else:
                since += 1
        log.info("epoch %d loss %.4f %s", epoch, loss, entry.get("val_f1", ""))
        if history is not None:
            history.append(entry)
        if val is not None and since >= patience:
            break
    if best_params is not None:
        for layer, params in zip(network.layers, best_params):
            layer.params = params
    return network
