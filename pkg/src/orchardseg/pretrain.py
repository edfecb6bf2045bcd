"""ZCA whitening, denoising-autoencoder filter learning and sparse init."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import sigmoid


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class ZcaTransform:
    mean: np.ndarray
    matrix: np.ndarray  # symmetric (d, d)
    eps: float

    def apply(self, x):
        return (x - self.mean) @ self.matrix  # matrix is symmetric

    def fold(self, W, b):
        """Compose a linear layer with the transform.

        Returns (W', b') such that ``W' p + b' == W @ apply(p) + b``.
        """
        Wf = W @ self.matrix
        return Wf, b - Wf @ self.mean


def zca_fit(patches, eps=0.1):
    """Fit ``U (L + eps I)^-1/2 U^T`` on rows of ``patches`` after mean removal."""
    x = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
    n, d = x.shape
    if n < d:
        raise ValueError(f"need at least {d} patches to fit a {d}-dimensional whitening, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    if eps <= 0 and evals.min() <= 1e-12 * max(evals.max(), 1e-300):
        raise SingularCovarianceError("covariance is rank deficient; use eps > 0")
    scale = 1.0 / np.sqrt(evals + eps)
    matrix = (evecs * scale) @ evecs.T
    matrix = (matrix + matrix.T) / 2
    return ZcaTransform(mean=mean, matrix=matrix, eps=float(eps))


def sparse_init(shape, k, rng, scale=1.0):
    """Each row (unit) gets exactly ``k`` nonzero N(0, scale^2) incoming weights."""
    n_out, fan_in = shape
    if not 0 < k <= fan_in:
        raise ValueError(f"nonzeros per unit must be in [1, {fan_in}], got {k}")
    W = np.zeros(shape)
    for row in W:
        idx = rng.choice(fan_in, size=k, replace=False)
        row[idx] = rng.normal(0.0, scale, size=k)
    return W


@dataclass
class DaeConfig:
    corruption: float = 0.2
    sparsity_weight: float = 0.1
    sparsity_target: float = 0.05
    hidden: int = 200
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 100
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.corruption < 1:
            raise ValueError("corruption probability must lie in [0, 1)")
        if not 0 < self.sparsity_target < 1:
            raise ValueError("sparsity target must lie in (0, 1)")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity weight must be nonnegative")


class DenoisingAutoencoder:
    """Tied-weight autoencoder: sigmoid encoder, linear decoder.

    Training minimises the squared reconstruction error of clean inputs from
    masked-noise corrupted ones, plus ``beta * KL(rho || mean activation)``
    summed over hidden units and a small weight decay.
    """

    def __init__(self, n_in, cfg, rng):
        self.cfg = cfg
        bound = 4 * np.sqrt(6.0 / (n_in + cfg.hidden))
        self.W = rng.uniform(-bound, bound, size=(cfg.hidden, n_in)) * 0.25
        self.b = np.zeros(cfg.hidden)
        self.c = np.zeros(n_in)

    def encode(self, x):
        return sigmoid(x @ self.W.T + self.b)

    def reconstruct(self, x):
        return self.encode(x) @ self.W + self.c

    def reconstruction_error(self, x):
        r = self.reconstruct(x) - x
        return float(0.5 * np.mean(np.sum(r * r, axis=1)))

    def loss_and_grads(self, x_clean, x_noisy):
        cfg = self.cfg
        n = len(x_clean)
        h = self.encode(x_noisy)
        r = h @ self.W + self.c - x_clean
        loss = 0.5 * np.sum(r * r) / n
        dr = r / n
        gW = h.T @ dr  # decoder contribution
        gc = dr.sum(axis=0)
        dh = dr @ self.W.T
        if cfg.sparsity_weight:
            rho, beta = cfg.sparsity_target, cfg.sparsity_weight
            rho_hat = np.clip(h.mean(axis=0), 1e-8, 1 - 1e-8)
            loss += beta * np.sum(rho * np.log(rho / rho_hat) + (1 - rho) * np.log((1 - rho) / (1 - rho_hat)))
            dh = dh + beta * (-rho / rho_hat + (1 - rho) / (1 - rho_hat)) / n
        dz = dh * h * (1 - h)
        gW = gW + dz.T @ x_noisy
        gb = dz.sum(axis=0)
        if cfg.weight_decay:
            loss += cfg.weight_decay * np.sum(self.W * self.W)
            gW = gW + 2 * cfg.weight_decay * self.W
        return loss, (gW, gb, gc)


def dae_train(patches, cfg=None, held_out=None, history=None):
    """Learn first-layer filters from (whitened) patches.

    Returns ``(W, b)`` with ``W`` of shape (hidden, patch_dim). When
    ``history`` is a list, the held-out clean reconstruction error is
    appended before training and after each epoch.
    """
    cfg = cfg or DaeConfig()
    x = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
    rng = np.random.default_rng(cfg.seed)
    dae = DenoisingAutoencoder(x.shape[1], cfg, rng)
    val = x if held_out is None else np.asarray(held_out, dtype=np.float64).reshape(len(held_out), -1)
    if history is not None:
        history.append(dae.reconstruction_error(val))
    vel = [np.zeros_like(dae.W), np.zeros_like(dae.b), np.zeros_like(dae.c)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            xb = x[order[start:start + cfg.batch_size]]
            noisy = xb * (rng.random(xb.shape) >= cfg.corruption) if cfg.corruption else xb
            _, grads = dae.loss_and_grads(xb, noisy)
            for p, g, v in zip((dae.W, dae.b, dae.c), grads, vel):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
        if history is not None:
            history.append(dae.reconstruction_error(val))
    return dae.W, dae.b
