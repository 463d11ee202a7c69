import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from slicekit import tensor as tc
from slicekit.errors import OddSpatialDims, ShapeMismatch
from slicekit.tensor import (Block, Conv2D, Dense, DeviceTL, EdgeTL, Flatten,
                             GlobalAvgPool, MaxPool, ReLU, Tensor)


def t(values):
    return Tensor(np.asarray(values, dtype=np.float32))


def brute_max_pool(a):
    c, h, w = a.shape
    out = np.empty((c, h // 2, w // 2), dtype=a.dtype)
    for ch in range(c):
        for y in range(h // 2):
            for x in range(w // 2):
                out[ch, y, x] = max(a[ch, 2 * y, 2 * x], a[ch, 2 * y, 2 * x + 1],
                                    a[ch, 2 * y + 1, 2 * x], a[ch, 2 * y + 1, 2 * x + 1])
    return out


def brute_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for y in range(ho):
            for xx in range(wo):
                patch = xp[:, y * stride:y * stride + k, xx * stride:xx * stride + k]
                out[oc, y, xx] = (patch * w[oc]).sum() + b[oc]
    return out


class TestTensor:
    def test_flat_layout_is_channel_major(self):
        x = Tensor.from_flat(2, 2, 3, np.arange(12))
        assert x.data[1, 0, 2] == 8
        assert list(x.flat()) == list(range(12))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            t([[[np.nan]]])

    def test_rejects_wrong_length(self):
        with pytest.raises(ShapeMismatch):
            Tensor.from_flat(2, 2, 2, np.zeros(7))

    def test_immutable(self):
        x = t(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            x.data[0, 0, 0] = 1.0


class TestMaxPool:
    def test_single_window(self):
        assert max_pool(t([[[1, 3], [2, 4]]])) == t([[[4]]])

    def test_4x4_against_brute_force(self):
        a = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        expected = brute_max_pool(a)
        np.testing.assert_array_equal(expected, [[[5, 7], [13, 15]]])
        assert tc.max_pool_2x2(Tensor(a)) == Tensor(expected)

    def test_quarter_size_shape(self):
        x = Tensor(np.zeros((64, 56, 56), dtype=np.float32))
        y = tc.max_pool_2x2(x)
        assert y.shape == (64, 28, 28)
        assert y.size * 4 == x.size
        assert y.data.nbytes * 4 == x.data.nbytes

    @pytest.mark.parametrize("shape", [(1, 3, 4), (1, 4, 5), (2, 1, 2)])
    def test_odd_dims_rejected(self, shape):
        with pytest.raises(OddSpatialDims):
            tc.max_pool_2x2(Tensor(np.zeros(shape, dtype=np.float32)))

    def test_device_tl_layer_matches_kernel(self, rng):
        x = Tensor(rng.standard_normal((3, 6, 8)).astype(np.float32))
        assert tc.forward(DeviceTL(), x) == tc.max_pool_2x2(x)
        assert tc.forward(MaxPool(2, 2), x) == tc.max_pool_2x2(x)

    def test_general_maxpool_odd_input(self):
        a = np.arange(49, dtype=np.float32).reshape(1, 7, 7)
        y = tc.forward(MaxPool(2, 2), Tensor(a))
        assert y.shape == (1, 3, 3)
        assert y.data[0, 2, 2] == a[0, 5, 5]

    def test_overlapping_maxpool(self):
        a = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        y = tc.forward(MaxPool(3, 1), Tensor(a))
        np.testing.assert_array_equal(y.data, [[[10, 11], [14, 15]]])


def max_pool(x):
    return tc.max_pool_2x2(x)


class TestUpsample:
    def test_constant_replication(self):
        assert tc.nn_upsample_2x(t([[[5]]])) == t([[[5, 5], [5, 5]]])

    def test_index_formula(self):
        a = np.array([[[1, 2], [3, 4]]], dtype=np.float32)
        expected = np.empty((1, 4, 4), dtype=np.float32)
        for y in range(4):
            for x in range(4):
                expected[0, y, x] = a[0, y // 2, x // 2]
        np.testing.assert_array_equal(
            expected, [[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]])
        assert tc.nn_upsample_2x(Tensor(a)) == Tensor(expected)

    def test_edge_tl_layer_matches_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
        assert tc.forward(EdgeTL(), x) == tc.nn_upsample_2x(x)


even_tensors = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)).flatmap(
    lambda s: hnp.arrays(np.float32, (s[0], 2 * s[1], 2 * s[2]),
                         elements=st.floats(-1e3, 1e3, width=32)))


class TestPoolProperties:
    @given(even_tensors)
    @settings(max_examples=200, deadline=None)
    def test_quarter_size_law(self, a):
        assert tc.max_pool_2x2(Tensor(a)).size * 4 == a.size

    @given(even_tensors)
    @settings(max_examples=200, deadline=None)
    def test_round_trip_shape_and_window_max(self, a):
        up = tc.nn_upsample_2x(tc.max_pool_2x2(Tensor(a)))
        assert up.shape == a.shape
        c, h, w = a.shape
        for y in range(h):
            for x in range(w):
                wy, wx = 2 * (y // 2), 2 * (x // 2)
                np.testing.assert_array_equal(up.data[:, y, x], a[:, wy:wy + 2, wx:wx + 2].max(axis=(1, 2)))

    @given(even_tensors)
    @settings(max_examples=200, deadline=None)
    def test_pool_commutes_with_relu(self, a):
        x = Tensor(a)
        assert tc.max_pool_2x2(tc.forward(ReLU(), x)) == tc.forward(ReLU(), tc.max_pool_2x2(x))

    @given(even_tensors)
    @settings(max_examples=100, deadline=None)
    def test_brute_force_agreement(self, a):
        # value comparison: max(-0.0, 0.0) may legitimately return either zero
        np.testing.assert_array_equal(tc.max_pool_2x2(Tensor(a)).data, brute_max_pool(a))


class TestForward:
    def test_relu(self):
        assert tc.forward(ReLU(), t([[[-1, 0, 2]]])) == t([[[0, 0, 2]]])

    def test_dense_identity(self, rng):
        x = Tensor(rng.standard_normal((5, 1, 1)).astype(np.float32))
        params = (np.eye(5, dtype=np.float32), np.zeros(5, dtype=np.float32))
        assert tc.forward(Dense(5), x, params) == x

    def test_dense_needs_flat_input(self):
        x = Tensor(np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            tc.forward(Dense(3), x, (np.zeros((3, 8), np.float32), np.zeros(3, np.float32)))

    def test_conv_1x1_doubles(self, rng):
        x = Tensor(rng.standard_normal((1, 5, 6)).astype(np.float32))
        w = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        oracle = brute_conv(x.data.astype(np.float64), w, b, 1, 0)
        np.testing.assert_array_equal(oracle, 2 * x.data)
        assert tc.forward(Conv2D(1, 1), x, (w, b)) == Tensor(oracle.astype(np.float32))

    @pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (5, 1, 2)])
    def test_conv_against_direct_oracle(self, rng, k, s, p):
        x = rng.standard_normal((3, 7, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = tc.forward(Conv2D(4, k, s, p), Tensor(x), (w, b))
        want = brute_conv(x.astype(np.float64), w, b, s, p)
        assert got.shape == want.shape
        np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-5)

    def test_conv_channel_mismatch(self):
        x = Tensor(np.zeros((2, 4, 4), dtype=np.float32))
        w = np.zeros((1, 3, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeMismatch):
            tc.forward(Conv2D(1, 3, 1, 1), x, (w, np.zeros(1, np.float32)))

    def test_global_avg_pool_and_flatten(self):
        a = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        assert tc.forward(GlobalAvgPool(), Tensor(a)) == t([[[1.5]], [[5.5]]])
        assert tc.forward(Flatten(), Tensor(a)).shape == (8, 1, 1)

    def test_block_applies_in_order(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4)).astype(np.float32))
        blk = Block((ReLU(), MaxPool(2, 2)))
        assert tc.forward(blk, x, None) == tc.max_pool_2x2(tc.forward(ReLU(), x))

    def test_block_needs_two_layers(self):
        with pytest.raises(ValueError):
            Block((ReLU(),))

    def test_deterministic(self, rng):
        x = Tensor(rng.standard_normal((3, 8, 8)).astype(np.float32))
        layer = Conv2D(4, 3, 1, 1)
        p = tc.init_params(layer, x.shape, np.random.default_rng(3))
        outs = {tc.forward(layer, x, p).data.tobytes() for _ in range(5)}
        assert len(outs) == 1


class TestBackward:
    def test_relu(self):
        dx, grads = tc.backward(ReLU(), t([[[-1, 2]]]), t([[[1, 1]]]))
        assert dx == t([[[0, 1]]])
        assert grads is None

    def test_maxpool_routes_to_argmax(self):
        dx, _ = tc.backward(DeviceTL(), t([[[1, 3], [2, 4]]]), t([[[7]]]))
        assert dx == t([[[0, 0], [0, 7]]])

    def test_maxpool_tie_goes_to_first(self):
        dx, _ = tc.backward(MaxPool(2, 2), t([[[5, 5], [5, 5]]]), t([[[1]]]))
        assert dx == t([[[1, 0], [0, 0]]])

    def test_upsample_sums_groups(self):
        g = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        dx, _ = tc.backward(EdgeTL(), t(np.zeros((1, 2, 2))), Tensor(g))
        assert dx == t([[[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            tc.backward(ReLU(), t(np.zeros((1, 2, 2))), t(np.zeros((1, 1, 1))))


from oracles import gradient_cases, gradient_errors  # noqa: E402

GRAD_TOL = 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed):
    for name, layer, x, params in gradient_cases(seed):
        errs = gradient_errors(layer, x, params, seed)
        worst = max(errs.values())
        assert worst < GRAD_TOL, (name, errs)
