"""Forward/backward kernels of the tensor layer."""

import math
import operator

import numpy as np
import pytest

from voxnet import ops
from voxnet.errors import ConfigError, ShapeError
from voxnet.verify import direct_conv3d


def naive_maxpool(x, w, s):
    b, c, D, H, W = x.shape
    od, oh, ow = [(n - w) // s + 1 for n in (D, H, W)]
    out = np.empty((b, c, od, oh, ow), dtype=x.dtype)
    for n in range(b):
        for ch in range(c):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        out[n, ch, z, y, xx] = x[n, ch, z * s:z * s + w, y * s:y * s + w, xx * s:xx * s + w].max()
    return out


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = rng.random((1, 1, 3, 3, 3), dtype=np.float32)
        out = ops.conv3d(x, np.ones((1, 1, 1, 1, 1), np.float32), np.zeros(1, np.float32),
                         ops.ConvSpec(1, 1, 1, 1, 0))
        np.testing.assert_array_equal(out, x)

    def test_counting_kernel(self):
        x = np.ones((1, 1, 3, 3, 3), np.float32)
        out = ops.conv3d(x, np.ones((1, 1, 2, 2, 2), np.float32), np.zeros(1, np.float32),
                         ops.ConvSpec(1, 1, 2, 1, 0))
        assert out.shape == (1, 1, 2, 2, 2)
        np.testing.assert_array_equal(out, 8.0)

    def test_coordinate_sum_input_strided(self):
        z, y, x = np.meshgrid(*[np.arange(5)] * 3, indexing="ij")
        vol = (z + y + x).astype(np.float32)[None, None]
        w = np.ones((1, 1, 3, 3, 3), np.float32)
        out = ops.conv3d(vol, w, np.zeros(1, np.float32), ops.ConvSpec(1, 1, 3, 2, 1))
        want = direct_conv3d(vol, w, [0.0], (2, 2, 2), (1, 1, 1))
        np.testing.assert_allclose(out, want, rtol=1e-6)
        # corner window sees the 2x2x2 block z,y,x in {0,1}
        assert out[0, 0, 0, 0, 0] == 12.0

    def test_multichannel_matches_oracle(self, rng):
        x = rng.standard_normal((2, 3, 6, 5, 7)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 2, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        spec = ops.ConvSpec(3, 4, (3, 2, 3), (1, 2, 2), (1, 0, 2))
        want = direct_conv3d(x, w, b, spec.stride, spec.padding)
        np.testing.assert_allclose(ops.conv3d(x, w, b, spec), want, rtol=1e-4, atol=1e-5)

    def test_channel_mismatch_names_axis(self, rng):
        x = rng.random((1, 2, 4, 4, 4), dtype=np.float32)
        with pytest.raises(ShapeError) as exc:
            ops.conv3d(x, np.ones((1, 3, 3, 3, 3), np.float32), np.zeros(1, np.float32),
                       ops.ConvSpec(3, 1, 3, 1, 1))
        assert exc.value.axis == 1

    def test_nonpositive_output_extent(self):
        with pytest.raises(ConfigError):
            ops.ConvSpec(1, 1, 5, 1, 0).output_extents((3, 3, 3))

    def test_backward_against_finite_differences(self, rng):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        spec = ops.ConvSpec(2, 2, 3, 2, 1)
        g = rng.standard_normal(ops.conv3d(x, w, np.zeros(2), spec).shape)
        dx, dw, db = ops.conv3d_backward(x, w, g, spec)
        f = lambda xx, ww: float(np.sum(ops.conv3d(xx, ww, np.zeros(2), spec) * g))
        h = 1e-6
        for idx in [(0, 1, 2, 3, 0), (0, 0, 0, 0, 0)]:
            e = np.zeros_like(x)
            e[idx] = h
            assert dx[idx] == pytest.approx((f(x + e, w) - f(x - e, w)) / (2 * h), rel=1e-6)
        for idx in [(1, 0, 2, 1, 0), (0, 1, 1, 1, 1)]:
            e = np.zeros_like(w)
            e[idx] = h
            assert dw[idx] == pytest.approx((f(x, w + e) - f(x, w - e)) / (2 * h), rel=1e-6)
        np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3, 4)))


class TestMaxPool:
    def test_enumeration(self):
        x = np.arange(1, 9, dtype=np.float32).reshape(1, 1, 2, 2, 2)
        out, arg = ops.maxpool3d(x, 2, 2)
        assert out.shape == (1, 1, 1, 1, 1) and out.item() == 8.0

    def test_constant_input_picks_first_index(self):
        x = np.full((1, 1, 4, 4, 4), 3.0, np.float32)
        out, arg = ops.maxpool3d(x, 2, 2)
        np.testing.assert_array_equal(out, 3.0)
        # flat index of each window's first voxel
        want = np.array([(2 * z * 16 + 2 * y * 4 + 2 * xx) for z in range(2) for y in range(2) for xx in range(2)])
        np.testing.assert_array_equal(arg.reshape(-1), want)

    def test_pooled_shape_matches_scan_oracle(self, rng):
        x = rng.random((1, 128, 14, 14, 14), dtype=np.float32)
        out, _ = ops.maxpool3d(x, 7, 7)
        assert out.shape == (1, 128, 2, 2, 2)
        np.testing.assert_array_equal(out, naive_maxpool(x, 7, 7))

    def test_window_too_large(self):
        with pytest.raises(ConfigError):
            ops.maxpool3d(np.zeros((1, 1, 3, 3, 3), np.float32), 4)

    def test_backward_routes_to_argmax(self, rng):
        x = rng.random((2, 3, 4, 4, 4))
        out, arg = ops.maxpool3d(x, 2, 2)
        g = rng.random(out.shape)
        dx = ops.maxpool3d_backward(g, arg, x.shape)
        assert dx.sum() == pytest.approx(g.sum())
        assert np.count_nonzero(dx) == g.size
        np.testing.assert_array_equal(dx[x == np.repeat(np.repeat(np.repeat(out, 2, 2), 2, 3), 2, 4)].sum(), dx.sum())


class TestBatchNorm:
    def _bn(self, x, gamma, beta, eps=ops.BN_EPSILON):
        c = x.shape[1]
        return ops.batchnorm(x, gamma, beta, np.zeros(c), np.ones(c), "train", ops.BN_MOMENTUM, eps)

    def test_normalizes(self, rng):
        x = rng.standard_normal((4, 3, 3, 3, 3)) * 5 + 2
        out, _ = self._bn(x, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3, 4)), 1, atol=1e-3)

    def test_constant_channel_gives_beta(self):
        x = np.full((3, 2, 2, 2, 2), 7.0)
        out, _ = self._bn(x, np.array([2.0, 5.0]), np.array([0.25, -1.0]))
        np.testing.assert_array_equal(out[:, 0], 0.25)
        np.testing.assert_array_equal(out[:, 1], -1.0)

    def test_two_sample_hand_value(self):
        x = np.array([2.0, 4.0]).reshape(2, 1, 1, 1, 1)
        out, _ = self._bn(x, np.array([3.0]), np.array([1.0]), eps=0.0)
        np.testing.assert_allclose(out.reshape(-1), [-2.0, 4.0])

    def test_running_stats_and_infer(self, rng):
        x = rng.standard_normal((8, 2)) + 3
        rm, rv = np.zeros(2), np.ones(2)
        ops.batchnorm(x, np.ones(2), np.zeros(2), rm, rv, "train")
        np.testing.assert_allclose(rm, 0.1 * x.mean(0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0))
        out, _ = ops.batchnorm(x, np.ones(2), np.zeros(2), rm, rv, "infer")
        np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + ops.BN_EPSILON))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            self._bn(rng.random((2, 3, 2, 2, 2)), np.ones(2), np.zeros(2))


class TestDense:
    def test_identity(self, rng):
        x = rng.random((3, 4))
        np.testing.assert_array_equal(ops.dense(x, np.eye(4), np.zeros(4)), x)

    def test_hand_arithmetic(self):
        out = ops.dense(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(out, [[4.0, 2.0]])

    def test_flatten_width_matches_loop_oracle(self, rng):
        x = rng.standard_normal((3, 13824)).astype(np.float32)
        w = rng.standard_normal((128, 13824)).astype(np.float32)
        b = rng.standard_normal(128).astype(np.float32)
        out = ops.dense(x, w, b)
        xl, wl = x.astype(float).tolist(), w.astype(float).tolist()
        for i in range(3):
            for j in range(128):
                want = math.fsum(map(operator.mul, xl[i], wl[j])) + float(b[j])
                assert abs(out[i, j] - want) <= 1e-4 * max(abs(want), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ops.dense(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros(2))


class TestActivations:
    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ops.softmax(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_softmax_large_logits(self):
        p = ops.softmax(np.array([[1000.0, 1000.0 + math.log(3)]]))
        np.testing.assert_allclose(p, [[0.25, 0.75]], rtol=1e-12)

    def test_dropout_law_of_large_numbers(self):
        out, mask = ops.dropout(np.ones(10 ** 6, np.float32), 0.5, "train", np.random.default_rng(0))
        assert abs(out.mean() - 1.0) <= 0.01
        assert abs(np.mean(out == 0) - 0.5) <= 0.005

    def test_dropout_infer_is_identity(self, rng):
        x = rng.random(100)
        out, _ = ops.dropout(x, 0.5, "infer", rng)
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_dropout_rejects_p(self, p, rng):
        with pytest.raises(ConfigError):
            ops.dropout(np.ones(3), p, "train", rng)

    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(ops.relu(x), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(ops.relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert ops.cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) <= 1e-11

    def test_uniform(self):
        assert ops.cross_entropy(np.full((3, 2), 0.5), [0, 1, 1]) == pytest.approx(math.log(2))

    def test_hand_value(self):
        loss = ops.cross_entropy(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1])
        assert loss == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, rel=1e-12)
        assert loss == pytest.approx(0.16425, abs=5e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ops.cross_entropy(np.full((1, 2), 0.5), [2])
