import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orchardseg.metadata import (
    EncoderSpec, EncodingError, ImageMeta, MetadataRecord, active_indices, combine_metadata, encode_pixels,
    one_hot_categorical, one_hot_continuous,
)

FULL = ("p_i", "p_j", "r_n", "s_psi", "noise")


class TestContinuous:
    @pytest.mark.parametrize("value,expect", [(0, 0), (1616, 7), (808, 4), (-5, 0), (5000, 7), (201.99, 0), (202, 1)])
    def test_bins(self, value, expect):
        v = one_hot_continuous(value, 0, 1616, 8)
        assert v.sum() == 1 and v[expect] == 1

    def test_degenerate_range(self):
        with pytest.raises(EncodingError):
            one_hot_continuous(1.0, 3.0, 3.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1e4, 1e4), st.integers(1, 16))
    def test_single_active_unit(self, v, c):
        out = one_hot_continuous(v, -100.0, 250.0, c)
        assert out.shape == (c,) and out.sum() == 1 and set(np.unique(out)) <= {0.0, 1.0}


class TestCategorical:
    def test_first_and_last(self):
        np.testing.assert_array_equal(one_hot_categorical(0, 15), np.eye(15)[0])
        np.testing.assert_array_equal(one_hot_categorical(14, 15), np.eye(15)[14])

    def test_all_sum_to_one(self):
        assert all(one_hot_categorical(i, 15).sum() == 1 for i in range(15))

    @pytest.mark.parametrize("i", [-1, 15])
    def test_out_of_range(self, i):
        with pytest.raises(EncodingError):
            one_hot_categorical(i, 15)


class TestCombine:
    def test_lengths(self):
        assert EncoderSpec(enabled=("p_i",)).dim == 8
        assert EncoderSpec(enabled=("p_i", "p_j", "r_n", "s_psi"), n_rows=15).dim == 39
        spec = EncoderSpec()
        assert spec.dim == 0 and combine_metadata(MetadataRecord(), spec).shape == (0,)

    def test_fixed_order_regardless_of_declaration(self):
        a = EncoderSpec(enabled=("s_psi", "p_i"))
        assert a.enabled == ("p_i", "s_psi")
        rec = MetadataRecord(p_i=0, s_psi=179.0)
        d = combine_metadata(rec, a)
        assert d[0] == 1 and d[8 + 7] == 1

    def test_missing_field(self):
        with pytest.raises(EncodingError):
            combine_metadata(MetadataRecord(p_i=3), EncoderSpec(enabled=("p_i", "r_n")))

    def test_unknown_field(self):
        with pytest.raises(EncodingError):
            EncoderSpec(enabled=("sun_elevation",))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.sampled_from(FULL), unique=True), st.integers(0, 1615), st.integers(0, 1231),
           st.integers(0, 14), st.floats(-180, 179.99), st.floats(0, 1))
    def test_active_count_and_determinism(self, enabled, pi, pj, rn, psi, noise):
        spec = EncoderSpec(enabled=tuple(enabled))
        rec = MetadataRecord(pi, pj, rn, psi, noise)
        d = combine_metadata(rec, spec)
        assert d.shape == (spec.dim,) and d.sum() == len(enabled)
        np.testing.assert_array_equal(d, combine_metadata(rec, spec))

    def test_pixel_encoder_matches_record_encoder(self):
        spec = EncoderSpec(enabled=FULL, frame_height=400, frame_width=300, n_rows=5)
        meta = ImageMeta(row_id=3, azimuth=-45.0, row_offset=120, col_offset=40)
        rng = np.random.default_rng(0)
        rows, cols, noise = rng.integers(0, 200, 50), rng.integers(0, 200, 50), rng.random(50)
        D = encode_pixels(spec, meta, rows, cols, noise)
        for k in range(50):
            np.testing.assert_array_equal(D[k], combine_metadata(meta.record(rows[k], cols[k], noise[k]), spec))

    def test_pixel_encoder_needs_noise(self):
        with pytest.raises(EncodingError):
            active_indices(EncoderSpec(enabled=("noise",)), ImageMeta(), np.arange(3), np.arange(3))

    def test_roundtrip_dict(self):
        spec = EncoderSpec(enabled=("p_i", "r_n"), frame_height=96, n_rows=4, ranges={"p_i": (0, 50)})
        again = EncoderSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()
        assert again.field_range("p_i") == (0, 50)
