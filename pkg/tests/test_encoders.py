import numpy as np
import pytest

from forkseq import autodiff as ad
from forkseq.autodiff import ParamStore
from forkseq.encoders import (FAMILIES, UNBOUNDED, EncoderSpec, encode_full, encode_window, init_encoder,
                              param_count, receptive_field)
from forkseq.errors import ShapeError


def _setup(family, hidden=8, seed=0, **kw):
    spec = EncoderSpec.default(family, 6, hidden=hidden, **kw)
    store = ParamStore(seed)
    init_encoder(spec, store)
    return spec, store


class TestReceptiveField:
    def test_cnn_default(self):
        assert receptive_field(EncoderSpec.default("cnn")) == 64

    def test_mlp_is_two_h(self):
        assert receptive_field(EncoderSpec.default("mlp", 18)) == 36

    @pytest.mark.parametrize("family", ["rnn", "lstm", "transformer"])
    def test_unbounded(self, family):
        assert receptive_field(EncoderSpec.default(family)) is UNBOUNDED


class TestEncoders:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_shape_and_single_point(self, family, rng):
        spec, store = _setup(family)
        x = rng.normal(size=(30, 1))
        assert encode_full(spec, store, x).shape == (30, 8)
        one = encode_full(spec, store, x[:1]).data
        np.testing.assert_allclose(one[0], encode_window(spec, store, x[:1]).data, atol=1e-12)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_causality(self, family, rng):
        spec, store = _setup(family)
        x = rng.normal(size=(2, 40, 1))
        a = encode_full(spec, store, x).data
        x2 = x.copy()
        x2[:, 25:] += rng.normal(size=(2, 15, 1)) * 10
        b = encode_full(spec, store, x2).data
        assert np.array_equal(a[:, :25], b[:, :25])

    @pytest.mark.parametrize("family", ["rnn", "lstm", "transformer", "mlp"])
    def test_prefix_consistency(self, family, rng):
        spec, store = _setup(family)
        x = rng.normal(size=(50, 1))
        full = encode_full(spec, store, x).data
        for t in (1, 7, 33, 50):
            np.testing.assert_allclose(encode_window(spec, store, x[:t]).data, full[t - 1], atol=1e-12, rtol=0)

    @pytest.mark.parametrize("family", ["rnn", "lstm"])
    def test_recurrent_prefix_bitwise(self, family, rng):
        spec, store = _setup(family)
        x = rng.normal(size=(37, 1))
        full = encode_full(spec, store, x).data
        assert all(np.array_equal(encode_window(spec, store, x[:t]).data, full[t - 1]) for t in (5, 20, 37))

    def test_cnn_window_covering_receptive_field(self, rng):
        spec, store = _setup("cnn")
        x = rng.normal(size=(200, 1))
        full = encode_full(spec, store, x).data
        for t in (64, 100, 200):
            np.testing.assert_allclose(encode_window(spec, store, x[t - 64:t]).data, full[t - 1], atol=1e-12, rtol=0)

    def test_cnn_short_window_is_defined(self, rng):
        spec, store = _setup("cnn")
        assert np.all(np.isfinite(encode_window(spec, store, rng.normal(size=(10, 1))).data))

    def test_identity_kernel_conv(self, rng):
        x = rng.normal(size=(1, 9, 1))
        np.testing.assert_array_equal(ad.dilated_causal_conv1d(x, np.ones((1, 1, 1)), 1).data, x)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_param_count_pure(self, family):
        spec = EncoderSpec.default(family, 6, hidden=8)
        assert param_count(spec) == param_count(spec)
        assert param_count(spec) == sum(p.size for p in _setup(family)[1].values())

    def test_cnn_param_shapes(self):
        _, store = _setup("cnn")
        assert store["enc.conv0.K"].shape == (2, 1, 8)
        assert store["enc.conv5.K"].shape == (2, 8, 8)

    def test_bad_input_shape(self):
        spec, store = _setup("cnn")
        with pytest.raises(ShapeError):
            encode_full(spec, store, np.zeros((3, 4, 2)))

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            EncoderSpec("gru")

    def test_dropout_only_in_training(self, rng):
        spec, store = _setup("transformer")
        x = rng.normal(size=(20, 1))
        a = encode_full(spec, store, x).data
        assert np.array_equal(a, encode_full(spec, store, x).data)
        b = encode_full(spec, store, x, training=True, rng=np.random.default_rng(0)).data
        c = encode_full(spec, store, x, training=True, rng=np.random.default_rng(0)).data
        assert np.array_equal(b, c) and not np.array_equal(a, b)
