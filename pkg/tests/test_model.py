import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entk.errors import DimensionError, SpecError
from entk.model import (
    Activation,
    Conv2d,
    Dense,
    Flatten,
    ModelSpec,
    data_fingerprint,
    forward,
    init_params,
    make_params,
    model_fingerprint,
    param_count,
    param_layout,
    parse_spec,
)
from entk.rng import SplitMix64
from oracles import conv2d_direct


@st.composite
def mlp_specs(draw):
    widths = draw(st.lists(st.integers(1, 6), min_size=2, max_size=5))
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append(Dense(a, b, bias=draw(st.booleans())))
        if i < len(widths) - 2:
            layers.append(Activation(draw(st.sampled_from(["relu", "tanh"]))))
    return ModelSpec((widths[0],), tuple(layers))


class TestSpec:
    def test_dense_bias_layout(self):
        spec = ModelSpec((2,), (Dense(2, 3, bias=True),))
        params = init_params(spec, 0)
        assert params.size == 9
        assert params.offsets == ((0, 6), (6, 3))

    def test_conv_count(self):
        spec = ModelSpec((1, 5, 5), (Conv2d(1, 2, 3, 3, bias=True), Flatten(), Dense(18, 1)))
        assert param_layout(spec)[1][0] == (0, 20)

    def test_incompatible_pair_named(self):
        with pytest.raises(SpecError, match=r"layer 2 \(dense 5 2\).*layer 1 \(relu\)"):
            ModelSpec((3,), (Dense(3, 4), Activation("relu"), Dense(5, 2)))

    def test_must_end_flat(self):
        with pytest.raises(SpecError):
            ModelSpec((1, 4, 4), (Conv2d(1, 1, 2, 2),))

    def test_text_round_trip(self):
        text = "input 2,6,6\nconv2d 2 3 3 3 bias\nrelu\nflatten\ndense 48 3\n"
        spec = parse_spec(text)
        assert spec.to_text() == text
        assert ModelSpec.from_text(spec.to_text()) == spec
        assert spec.output_count == 3

    def test_parse_errors(self):
        with pytest.raises(SpecError):
            parse_spec("dense 2 2\n")
        with pytest.raises(SpecError):
            parse_spec("input 2\ndense 2\n")
        with pytest.raises(SpecError):
            parse_spec("input 2\nsoftmax\n")

    @given(mlp_specs())
    def test_offsets_tile_parameter_range(self, spec):
        offsets, slices, total = param_layout(spec)
        pos = 0
        for start, length in offsets:
            assert start == pos and length >= 1
            pos += length
        assert pos == total == param_count(spec) == sum(n for _, n in slices)


class TestInit:
    def test_deterministic(self):
        spec = parse_spec("input 3\ndense 3 4 bias\nrelu\ndense 4 2\n")
        np.testing.assert_array_equal(init_params(spec, 11).data, init_params(spec, 11).data)
        assert not np.array_equal(init_params(spec, 11).data, init_params(spec, 12).data)

    def test_stream_order_and_scales(self):
        spec = parse_spec("input 3\ndense 3 4 bias\nrelu\ndense 4 2\n")
        p = init_params(spec, 5)
        z = SplitMix64(5).normal(12 + 8)
        np.testing.assert_array_equal(p.data[:12], z[:12] * math.sqrt(2.0 / 3))
        np.testing.assert_array_equal(p.data[12:16], 0.0)
        np.testing.assert_array_equal(p.data[16:], z[12:] * math.sqrt(1.0 / 4))

    def test_params_read_only(self):
        p = init_params(ModelSpec((2,), (Dense(2, 2),)), 0)
        with pytest.raises(ValueError):
            p.data[0] = 1.0

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            make_params(ModelSpec((2,), (Dense(2, 2),)), np.zeros(3))


class TestForward:
    def test_identity_dense(self):
        spec = ModelSpec((2,), (Dense(2, 2),))
        np.testing.assert_array_equal(forward(spec, make_params(spec, np.eye(2)), [[3.0, 4.0]]), [[3.0, 4.0]])

    def test_relu(self):
        spec = ModelSpec((2,), (Dense(2, 2), Activation("relu")))
        # a relu output is not flat-ended by a dense, but the shape is still (B, 2)
        np.testing.assert_array_equal(forward(spec, make_params(spec, np.eye(2)), [[-1.0, 2.0]]), [[0.0, 2.0]])

    def test_mlp_matches_per_sample_loop(self):
        spec = parse_spec("input 4\ndense 4 8 bias\ntanh\ndense 8 3\n")
        p = init_params(spec, 2)
        x = SplitMix64(1).normal(20).reshape(5, 4)
        full = forward(spec, p, x)
        for i in range(5):
            np.testing.assert_array_equal(full[i], forward(spec, p, x[i:i + 1])[0])

    def test_conv_matches_direct_loops(self):
        spec = parse_spec("input 2,6,5\nconv2d 2 3 3 2 bias\nflatten\n" + "dense 48 2\n")
        data = SplitMix64(3).normal(param_count(spec))
        p = make_params(spec, data)
        x = SplitMix64(4).normal(2 * 60).reshape(2, 2, 6, 5)
        w, b = p.layer_tensors(spec, 0)
        wd, _ = p.layer_tensors(spec, 1)
        for i in range(2):
            ref = wd @ conv2d_direct(x[i], w, b).reshape(-1)
            np.testing.assert_allclose(forward(spec, p, x[i:i + 1])[0], ref, rtol=1e-12)

    @given(mlp_specs(), st.integers(1, 6), st.integers(0, 1000))
    def test_batch_independence_and_permutation(self, spec, n, seed):
        p = init_params(spec, seed)
        x = SplitMix64(seed).normal(n * spec.input_shape[0]).reshape(n, -1)
        out = forward(spec, p, x)
        perm = np.random.default_rng(seed).permutation(n)
        np.testing.assert_array_equal(forward(spec, p, x[perm]), out[perm])
        for i in range(n):
            np.testing.assert_array_equal(forward(spec, p, x[i:i + 1])[0], out[i])

    def test_shape_mismatch(self):
        spec = ModelSpec((3,), (Dense(3, 1),))
        with pytest.raises(DimensionError):
            forward(spec, init_params(spec, 0), np.zeros((2, 4)))


class TestFingerprints:
    def test_model_fingerprint_sensitivity(self):
        spec = ModelSpec((3,), (Dense(3, 2),))
        a, b = init_params(spec, 0), init_params(spec, 1)
        assert model_fingerprint(spec, a) == model_fingerprint(spec, init_params(spec, 0))
        assert model_fingerprint(spec, a) != model_fingerprint(spec, b)
        assert len(model_fingerprint(spec, a)) == 32

    def test_data_fingerprint_is_raw_bytes_digest(self):
        import hashlib
        x = np.arange(6.0).reshape(2, 3)
        assert data_fingerprint(x) == hashlib.sha256(x.astype("<f8").tobytes()).digest()
