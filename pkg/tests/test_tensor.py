import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bilinear_loops, conv2d_loops
from priordepth import kernels
from priordepth.tensor import (
    ConvParams,
    ShapeError,
    TensorFormatError,
    activation,
    batch_norm,
    bilinear_resize,
    conv2d,
    global_avg_pool,
    init_conv,
    read_tensor,
    softmax,
    write_pgm,
    write_tensor,
)


@pytest.fixture(params=kernels.available())
def backend(request, monkeypatch):
    monkeypatch.setattr(kernels, "impl", kernels.load(request.param))
    return request.param


class TestConv2d:
    def test_identity_1x1(self, backend):
        x = np.full((1, 1, 1, 1), 3.5, dtype=np.float32)
        p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        assert conv2d(x, p)[0, 0, 0, 0] == 3.5

    def test_sum_of_ones(self, backend):
        p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
        out = conv2d(np.ones((1, 1, 3, 3)), p)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_depthwise_matches_loops(self, backend):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        p = init_conv(rng, 2, 2, 3, groups=2)
        ref = conv2d_loops(x, p.weight, p.bias, p.stride, p.padding, p.groups)
        np.testing.assert_allclose(conv2d(x, p), ref, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(
        n=st.integers(1, 2), groups=st.sampled_from([1, 2, 4]), per_group=st.integers(1, 2),
        out_per_group=st.integers(1, 2), h=st.integers(1, 8), w=st.integers(1, 8),
        k=st.sampled_from([1, 3]), stride=st.integers(1, 2), padding=st.integers(0, 1),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_random_shapes_match_loops(self, n, groups, per_group, out_per_group, h, w, k,
                                       stride, padding, seed):
        c = groups * per_group
        if c > 4 or h + 2 * padding < k or w + 2 * padding < k:
            return
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        p = init_conv(rng, c, groups * out_per_group, k, stride=stride, padding=padding, groups=groups)
        ref = conv2d_loops(x, p.weight, p.bias, stride, padding, groups)
        for name in kernels.available():
            np.testing.assert_allclose(kernels.load(name).conv2d(x, p.weight, p.bias, stride, padding, groups),
                                       ref, atol=1e-5)

    def test_channel_mismatch(self):
        p = ConvParams(np.ones((1, 2, 1, 1)), np.zeros(1))
        with pytest.raises(ShapeError, match="channels"):
            conv2d(np.ones((1, 3, 2, 2)), p)

    def test_kernel_larger_than_input(self):
        p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeError, match="does not fit"):
            conv2d(np.ones((1, 1, 2, 2)), p)

    def test_groups_must_divide(self):
        with pytest.raises(ShapeError):
            ConvParams(np.ones((3, 1, 1, 1)), np.zeros(3), groups=2)

    def test_rank_checked(self):
        p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        with pytest.raises(ShapeError, match="rank 4"):
            conv2d(np.ones((1, 2, 2)), p)


class TestActivation:
    def test_hardswish_breakpoints(self):
        x = np.array([0.0, 3.0, -3.0, 1.0]).reshape(1, 1, 1, 4)
        out = activation(x, "hardswish").ravel()
        assert out[0] == 0.0 and out[1] == 3.0 and out[2] == 0.0
        assert out[3] == pytest.approx(4.0 / 6.0, abs=1e-6)

    def test_sigmoid_zero(self):
        assert activation(np.zeros((1, 1, 1, 1)), "sigmoid")[0, 0, 0, 0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = activation(np.array([-1000.0, 1000.0]).reshape(1, 1, 1, 2), "sigmoid")
        assert np.all(np.isfinite(out))
        assert out.ravel().tolist() == [0.0, 1.0]

    def test_elu(self):
        out = activation(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2), "elu").ravel()
        assert out[0] == pytest.approx(math.expm1(-1.0), rel=1e-6)
        assert out[1] == 2.0

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown activation"):
            activation(np.zeros((1, 1, 1, 1)), "relu6")


class TestBatchNorm:
    def test_constant_channel_is_zero(self):
        out = batch_norm(np.full((2, 1, 3, 3), 4.0), [1.0], [0.0])
        assert np.all(out == 0)

    def test_gamma_zero(self):
        rng = np.random.default_rng(1)
        out = batch_norm(rng.normal(size=(1, 2, 3, 3)), [0.0, 0.0], [5.0, 5.0])
        assert np.all(out == 5.0)

    def test_hand_values(self):
        vals = [1.0, 2.0, 4.0, 7.0]
        mu = sum(vals) / 4
        var = sum((v - mu) ** 2 for v in vals) / 4
        want = [(v - mu) / math.sqrt(var + 1e-5) for v in vals]
        out = batch_norm(np.array(vals).reshape(1, 1, 2, 2), [1.0], [0.0])
        np.testing.assert_allclose(out.ravel(), want, atol=1e-6)

    def test_running_stats(self):
        out = batch_norm(np.full((1, 1, 1, 2), 3.0), [2.0], [1.0], running_mean=[1.0], running_var=[4.0])
        np.testing.assert_allclose(out.ravel(), 2.0 * 2.0 / math.sqrt(4.0 + 1e-5) + 1.0, rtol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1.0, 50.0))
    def test_standardises(self, seed, scale):
        x = np.random.default_rng(seed).normal(0.0, scale, size=(2, 3, 6, 6))
        out = batch_norm(x, np.ones(3), np.zeros(3)).astype(np.float64)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            batch_norm(np.ones((1, 1, 1, 1)), [1.0], [0.0], eps=0.0)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros((1, 1, 1, 4)), axis=-1), 0.25)

    def test_ln3(self):
        out = softmax(np.array([0.0, math.log(3.0)]).reshape(1, 1, 1, 2), axis=-1).ravel()
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), axis=st.integers(0, 3), shift=st.floats(-100, 100))
    def test_normalised_and_shift_invariant(self, seed, axis, shift):
        # float64 so the shift itself does not round the inputs
        x = np.random.default_rng(seed).normal(0, 3, size=(2, 3, 4, 5))
        out = softmax(x, axis=axis)
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax(x + shift, axis=axis), out, atol=1e-6)

    def test_float32_sums_to_one(self):
        x = np.random.default_rng(3).normal(0, 3, size=(1, 2, 3, 7)).astype(np.float32)
        out = softmax(x, axis=-1)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_shift_by_100(self):
        x = np.array([0.3, -1.2, 2.0, 0.0]).reshape(1, 1, 1, 4)
        np.testing.assert_allclose(softmax(x + 100.0, axis=-1), softmax(x, axis=-1), atol=1e-6)


class TestPoolAndResize:
    def test_pool(self):
        assert global_avg_pool(np.full((1, 1, 3, 3), 7.0))[0, 0] == 7.0
        assert global_avg_pool(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))[0, 0] == 2.5
        assert global_avg_pool(np.zeros((2, 3, 2, 2))).sum() == 0.0

    def test_resize_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 3, 5)).astype(np.float32)
        np.testing.assert_array_equal(bilinear_resize(x, 3, 5), x)

    def test_resize_constant(self):
        out = bilinear_resize(np.full((1, 1, 3, 2), 1.5), 7, 4)
        assert np.all(out == 1.5)

    def test_resize_2x2_to_4x4(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_resize(img.reshape(1, 1, 2, 2), 4, 4)[0, 0]
        np.testing.assert_allclose(out, bilinear_loops(img, 4, 4), atol=1e-6)
        # corners clamp to the source corners, centre cells are quarter-pixel blends
        assert out[0, 0] == 0.0 and out[3, 3] == 3.0
        assert out[1, 1] == pytest.approx(0.75 * 0.75 * 0 + 0.75 * 0.25 * (1 + 2) + 0.25 * 0.25 * 3)

    def test_resize_down(self):
        img = np.random.default_rng(2).normal(size=(5, 7))
        out = bilinear_resize(img.reshape(1, 1, 5, 7), 2, 3)[0, 0]
        np.testing.assert_allclose(out, bilinear_loops(img, 2, 3), atol=1e-6)


class TestTensorFiles:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
        write_tensor(x, tmp_path / "x.plt")
        y = read_tensor(tmp_path / "x.plt")
        assert y.dtype == np.float32 and y.shape == x.shape
        assert y.tobytes() == x.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=24))
    def test_round_trip_bit_exact(self, tmp_path_factory, values):
        x = np.array(values + [-0.0], dtype=np.float32).reshape(1, 1, 1, -1)
        path = tmp_path_factory.mktemp("plt") / "v.plt"
        write_tensor(x, path)
        assert read_tensor(path).tobytes() == x.tobytes()

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.plt").write_bytes(b"")
        with pytest.raises(TensorFormatError, match="truncated header"):
            read_tensor(tmp_path / "e.plt")

    def test_bad_magic(self, tmp_path):
        write_tensor(np.zeros((1, 1, 1, 1)), tmp_path / "m.plt")
        data = bytearray((tmp_path / "m.plt").read_bytes())
        data[:4] = b"PLT2"
        (tmp_path / "m.plt").write_bytes(bytes(data))
        with pytest.raises(TensorFormatError, match="bad magic"):
            read_tensor(tmp_path / "m.plt")

    def test_truncated_data(self, tmp_path):
        write_tensor(np.zeros((1, 1, 2, 2)), tmp_path / "t.plt")
        data = (tmp_path / "t.plt").read_bytes()
        (tmp_path / "t.plt").write_bytes(data[:-2])
        with pytest.raises(TensorFormatError, match="truncated data"):
            read_tensor(tmp_path / "t.plt")

    def test_trailing_bytes(self, tmp_path):
        write_tensor(np.zeros((1, 1, 2, 2)), tmp_path / "t.plt")
        with open(tmp_path / "t.plt", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(TensorFormatError, match="trailing"):
            read_tensor(tmp_path / "t.plt")

    def test_dimension_overflow(self, tmp_path):
        import struct

        (tmp_path / "o.plt").write_bytes(struct.pack("<4s4I", b"PLT1", 65536, 65536, 2, 1))
        with pytest.raises(TensorFormatError, match="overflow"):
            read_tensor(tmp_path / "o.plt")

    def test_rank_4_only(self, tmp_path):
        with pytest.raises(ShapeError):
            write_tensor(np.zeros((2, 2)), tmp_path / "r.plt")

    def test_pgm(self, tmp_path):
        write_pgm(np.array([[0.0, 1.0], [2.0, 4.0]]), tmp_path / "a.pgm")
        data = (tmp_path / "a.pgm").read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert list(data[-4:]) == [0, 64, 128, 255]
