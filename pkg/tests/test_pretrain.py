import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orchardseg.pretrain import (
    DaeConfig, DenoisingAutoencoder, SingularCovarianceError, dae_train, sparse_init, zca_fit,
)


def exactly_white(n, d, rng):
    x = rng.normal(size=(n, d))
    x -= x.mean(axis=0)
    L = np.linalg.cholesky(x.T @ x / n)
    return x @ np.linalg.inv(L).T


class TestZca:
    def test_white_input_gives_identity(self):
        x = exactly_white(5000, 6, np.random.default_rng(0))
        z = zca_fit(x, eps=1e-9)
        np.testing.assert_allclose(z.matrix, np.eye(6), atol=1e-6)

    def test_correlated_gaussian(self):
        rng = np.random.default_rng(1)
        C = np.array([[2.0, 1.5], [1.5, 2.0]])
        x = rng.multivariate_normal([3.0, -1.0], C, size=100_000)
        z = zca_fit(x, eps=1e-8)
        y = z.apply(x)
        np.testing.assert_allclose(np.cov(y.T, bias=True), np.eye(2), atol=0.02)
        assert np.abs(y.mean(axis=0)).max() < 1e-8

    def test_matrix_symmetric(self):
        z = zca_fit(np.random.default_rng(2).random((500, 12)))
        np.testing.assert_array_equal(z.matrix, z.matrix.T)

    def test_constant_patches(self):
        z = zca_fit(np.full((100, 5), 0.7), eps=0.1)
        np.testing.assert_allclose(z.apply(np.full((3, 5), 0.7)), 0.0, atol=1e-12)

    def test_rank_deficient_without_regulariser(self):
        with pytest.raises(SingularCovarianceError):
            zca_fit(np.full((100, 5), 0.7), eps=0.0)

    def test_too_few_patches(self):
        with pytest.raises(ValueError):
            zca_fit(np.zeros((3, 5)))

    def test_many_patches_near_identity(self):
        # 10k image-like patches, regulariser small relative to the spectrum
        rng = np.random.default_rng(3)
        base = rng.normal(size=(10_000, 8))
        mix = rng.normal(size=(8, 8))
        z = zca_fit(base @ mix, eps=1e-6)
        y = z.apply(base @ mix)
        cov = np.cov(y.T, bias=True)
        assert np.abs(y.mean(axis=0)).max() < 1e-8
        assert np.abs(cov - np.eye(8)).max() < 0.05

    def test_fold_matches_apply(self):
        rng = np.random.default_rng(4)
        z = zca_fit(rng.random((300, 6)))
        W, b = rng.normal(size=(4, 6)), rng.normal(size=4)
        p = rng.random((10, 6))
        Wf, bf = z.fold(W, b)
        np.testing.assert_allclose(p @ Wf.T + bf, z.apply(p) @ W.T + b, atol=1e-12)


class TestSparseInit:
    def test_dense_when_k_is_fan_in(self):
        W = sparse_init((20, 7), 7, np.random.default_rng(0))
        assert np.all(W != 0)

    def test_exact_row_counts(self):
        W = sparse_init((200, 200), 15, np.random.default_rng(0))
        np.testing.assert_array_equal((W != 0).sum(axis=1), 15)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 30), fan=st.integers(1, 40), data=st.data())
    def test_counts_property(self, n, fan, data):
        k = data.draw(st.integers(1, fan))
        W = sparse_init((n, fan), k, np.random.default_rng(data.draw(st.integers(0, 1000))))
        assert np.all((W != 0).sum(axis=1) == k)

    def test_deterministic(self):
        a = sparse_init((30, 50), 15, np.random.default_rng(9))
        b = sparse_init((30, 50), 15, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            sparse_init((3, 4), 5, np.random.default_rng(0))


class TestDae:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            DaeConfig(corruption=1.0)
        with pytest.raises(ValueError):
            DaeConfig(sparsity_target=0.0)

    def test_zero_epochs_returns_initialisation(self):
        cfg = DaeConfig(hidden=10, epochs=0, seed=4)
        W, b = dae_train(np.random.default_rng(0).random((50, 6)), cfg)
        init = DenoisingAutoencoder(6, cfg, np.random.default_rng(4))
        np.testing.assert_array_equal(W, init.W)
        np.testing.assert_array_equal(b, init.b)
        assert W.shape == (10, 6)

    def test_overcomplete_reconstruction(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1000, 16)) @ rng.normal(size=(16, 16)) * 0.3
        hist = []
        cfg = DaeConfig(corruption=0.0, sparsity_weight=0.0, hidden=32, epochs=100, learning_rate=0.01,
                        weight_decay=0.0, batch_size=50)
        dae_train(x, cfg, history=hist)
        assert hist[-1] < hist[0] / 10

    def test_stripe_filters(self):
        rng = np.random.default_rng(6)
        n, side = 2000, 8
        rows = np.arange(side)
        patches = []
        for _ in range(n):
            period, phase = int(rng.integers(2, 5)), int(rng.integers(0, 8))
            stripe = (((rows + phase) // period) % 2).astype(float)
            patches.append(np.tile(stripe[:, None], (1, side)).ravel())
        x = np.array(patches)
        x = x - x.mean(axis=0)
        cfg = DaeConfig(corruption=0.3, sparsity_weight=0.1, hidden=20, epochs=30, learning_rate=0.01)
        W, _ = dae_train(x, cfg)
        # horizontal stripes: each filter row constant, rows varying; correlate with row-profile template
        filt = W.reshape(-1, side, side)
        horiz = np.array([np.corrcoef(f.ravel(), np.tile(f.mean(axis=1)[:, None], (1, side)).ravel())[0, 1]
                          for f in filt])
        assert np.nanmax(np.abs(horiz)) > 0.5

    def test_held_out_loss_decreases(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1200, 12)) @ rng.normal(size=(12, 12)) * 0.3
        hist = []
        dae_train(x[:1000], DaeConfig(hidden=24, epochs=5), held_out=x[1000:], history=hist)
        assert hist[-1] < hist[0]
