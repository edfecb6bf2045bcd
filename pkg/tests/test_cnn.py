import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orchardseg import metadata as md
from orchardseg.cnn import (
    Cnn, CnnArch, CnnTraining, GeometryError, cnn_forward, cnn_infer_image, extract_cnn_patches, pad_image,
    sliding_window_map, train_cnn,
)
from orchardseg.nn import Dense, TrainConfig


def small_arch(metadata=None, meta_layer=0):
    # 18 -> 16 -> 8 -> 6 -> 3
    return CnnArch(input_side=18, conv=((4, 3), (6, 3)), fc=(8, 5), metadata=metadata, meta_layer=meta_layer)


def random_cnn(arch, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    m = Cnn.initialised(arch, rng, dtype)
    for layer in m.network.layers:
        for p in layer.params.values():
            p[...] = rng.normal(0, 0.3, p.shape)
    return m


class TestArch:
    def test_default_geometry(self):
        a = CnnArch()
        assert a.geometry() == [48, 42, 21, 16, 8]
        assert a.factor == 4 and a.flat_dim == 8 * 8 * 128

    def test_odd_side_before_pool(self):
        with pytest.raises(GeometryError):
            CnnArch(input_side=47)

    def test_vanishing_map(self):
        with pytest.raises(GeometryError):
            CnnArch(input_side=12, conv=((4, 7), (4, 6)))

    def test_bad_meta_layer(self):
        with pytest.raises(GeometryError):
            CnnArch(meta_layer=2)

    def test_dict_roundtrip(self):
        a = small_arch(md.EncoderSpec(enabled=("r_n",), n_rows=4), meta_layer=1)
        assert CnnArch.from_dict(a.to_dict()).to_dict() == a.to_dict()

    def test_init(self):
        m = Cnn.initialised(CnnArch(), np.random.default_rng(0))
        last = m.network.layers[-1]
        assert np.all(last.params["W"] == 0)
        W = m.convs()[0].params["W"]
        assert abs(W.std() - np.sqrt(2 / (7 * 7 * 3))) < 0.01
        assert all(np.all(l.params["b"] == 0) for l in m.denses())


class TestPatches:
    def test_patch_is_centred(self):
        img = np.random.default_rng(0).random((20, 30, 3))
        arch = small_arch()
        pad = pad_image(img, arch)
        P = extract_cnn_patches(pad, np.array([5]), np.array([7]), 18)
        assert P.shape == (1, 18, 18, 3)
        np.testing.assert_array_equal(P[0, 9, 9], img[5, 7])

    def test_zero_outside(self):
        img = np.ones((20, 30, 3))
        P = extract_cnn_patches(pad_image(img, small_arch()), np.array([0]), np.array([0]), 18)
        assert np.all(P[0, :9, :] == 0) and np.all(P[0, 9:, 9:] == 1)


class TestForward:
    def test_zero_weights_half(self):
        m = Cnn.empty(CnnArch())
        assert cnn_forward(np.zeros((48, 48, 3)), None, m) == 0.5

    def test_metadata_enters_chosen_layer(self):
        spec = md.EncoderSpec(enabled=("p_i",), frame_height=20)
        m = random_cnn(small_arch(spec, meta_layer=1), 1)
        dense = m.denses()
        assert dense[0].n_meta == 0 and dense[1].n_meta == spec.dim
        patch = np.random.default_rng(2).random((18, 18, 3))
        a = cnn_forward(patch, np.eye(8)[0], m)
        b = cnn_forward(patch, np.eye(8)[5], m)
        assert a != b

    def test_zero_d_equals_plain(self):
        spec = md.EncoderSpec(enabled=("p_i",))
        m = random_cnn(small_arch(spec), 3)
        plain = Cnn.empty(small_arch())
        for la, lb in zip(plain.network.layers, m.network.layers):
            for k in la.params:
                la.params[k][...] = lb.params[k]
        patch = np.random.default_rng(4).random((18, 18, 3))
        assert cnn_forward(patch, np.zeros(8), m) == cnn_forward(patch, None, plain)


class TestShiftAndStitch:
    @pytest.mark.parametrize("shape", [(1, 1), (4, 4), (13, 7), (21, 30)])
    def test_matches_sliding_window(self, shape):
        m = random_cnn(small_arch(), 5)
        img = np.random.default_rng(6).random(shape + (3,))
        fast, cov = cnn_infer_image(img, None, m, return_coverage=True)
        slow = sliding_window_map(img, None, m)
        assert np.all(cov == 1)
        np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)

    def test_with_metadata_and_noise(self):
        spec = md.EncoderSpec(enabled=("p_i", "p_j", "noise"), frame_height=60, frame_width=60)
        m = random_cnn(small_arch(spec), 7)
        img = np.random.default_rng(8).random((19, 22, 3))
        meta = md.ImageMeta(row_offset=30, col_offset=10)
        fast = cnn_infer_image(img, meta, m, noise_seed=4)
        slow = sliding_window_map(img, meta, m, noise_seed=4)
        np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)

    def test_float32_default_arch_bit_exact(self):
        m = random_cnn(CnnArch(), 9, dtype=np.float32)
        for layer in m.network.layers:
            for p in layer.params.values():
                p *= 0.2
        img = np.random.default_rng(10).random((9, 11, 3))
        assert np.array_equal(cnn_infer_image(img, None, m), sliding_window_map(img, None, m))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 25), st.integers(1, 25))
    def test_coverage_property(self, h, w):
        m = Cnn.empty(small_arch())
        _, cov = cnn_infer_image(np.zeros((h, w, 3)), None, m, return_coverage=True)
        assert cov.shape == (h, w) and np.all(cov == 1)

    def test_constant_image_constant_interior(self):
        m = random_cnn(small_arch(), 11)
        out = cnn_infer_image(np.full((40, 40, 3), 0.5), None, m)
        inner = out[9:31, 9:31]
        np.testing.assert_allclose(inner, inner[0, 0], atol=1e-12)


def test_train_deterministic_and_learns():
    rng = np.random.default_rng(12)
    imgs, masks = [], []
    for _ in range(4):
        img = rng.random((30, 30, 3)) * 0.2
        m = np.zeros((30, 30), bool)
        m[8:20, 5:17] = True
        img[m] = [0.9, 0.2, 0.1]
        imgs.append(img)
        masks.append(m)
    metas = [md.ImageMeta()] * 4
    st_ = CnnTraining(train=TrainConfig(learning_rate=0.01, epochs=4, batch_size=16, dtype="float64"),
                      val_instances=200)
    a = train_cnn(imgs, masks, metas, small_arch(), 400, st_, val=(imgs, masks, metas), seed=3)
    b = train_cnn(imgs, masks, metas, small_arch(), 400, st_, val=(imgs, masks, metas), seed=3)
    for la, lb in zip(a.network.layers, b.network.layers):
        for k in la.params:
            assert la.params[k].tobytes() == lb.params[k].tobytes()
    prob = cnn_infer_image(imgs[0], None, a)
    assert prob[m].mean() > prob[~m].mean()
    assert isinstance(a.network.layers[-1], Dense)
