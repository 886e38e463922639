import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmfnet import HIGH_DTYPE, Tape, Tensor
from tmfnet import functional as F
from tmfnet.gradcheck import check_gradients

from oracles import (loop_avg_pool, loop_conv2d, reference_adaptive_pool,
                     reference_bilinear)


class TestConv2d:
    def test_identity_pointwise(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 5, 5)).astype(np.float32))
        w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        y = F.conv2d(x, w)
        assert np.allclose(y.data, x.data, atol=1e-6)

    def test_zero_weight_gives_bias(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        w = Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.array([1.5, -2.0], dtype=np.float32))
        y = F.conv2d(x, w, b)
        assert np.allclose(y.data[:, 0], 1.5) and np.allclose(y.data[:, 1], -2.0)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = F.conv2d(Tensor(x, dtype=HIGH_DTYPE), Tensor(w, dtype=HIGH_DTYPE),
                       Tensor(b, dtype=HIGH_DTYPE), padding=1).data
        assert np.allclose(got, loop_conv2d(x, w, b, padding=1), atol=1e-12)

    @pytest.mark.parametrize("stride,k", [(1, 3), (2, 3), (1, 5), (2, 7), (3, 3)])
    def test_matches_loop_oracle_strided(self, rng, stride, k):
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, k, k))
        got = F.conv2d(Tensor(x, dtype=HIGH_DTYPE), Tensor(w, dtype=HIGH_DTYPE),
                       stride=stride).data
        assert np.allclose(got, loop_conv2d(x, w, stride=stride), atol=1e-10)

    def test_same_padding_preserves_size(self, rng):
        for k in (1, 3, 5, 7):
            x = Tensor(rng.normal(size=(1, 2, 11, 13)).astype(np.float32))
            w = Tensor(rng.normal(size=(2, 2, k, k)).astype(np.float32))
            assert F.conv2d(x, w).shape == (1, 2, 11, 13)

    def test_channel_mismatch_rejected(self, rng):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="channel mismatch"):
            F.conv2d(x, w)


class TestAvgPool:
    def test_k1_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
        assert np.array_equal(F.avg_pool(x, 1).data, x.data)
        assert np.array_equal(F.avg_pool_sat(x, 1).data, x.data)

    def test_constant_interior(self):
        x = Tensor(np.full((1, 1, 7, 7), 3.25, dtype=np.float32))
        y = F.avg_pool(x, 3)
        assert np.allclose(y.data[0, 0, 1:-1, 1:-1], 3.25, atol=1e-6)
        y = F.avg_pool_sat(x, 3)
        assert np.allclose(y.data[0, 0, 1:-1, 1:-1], 3.25, atol=1e-6)

    def test_hand_case_2x2_k3(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)[None, None])
        y = F.avg_pool(x, 3)
        assert y.data[0, 0, 0, 0] == pytest.approx(10.0 / 9.0, rel=1e-6)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            F.avg_pool(Tensor(np.zeros((1, 1, 4, 4))), 2)
        with pytest.raises(ValueError):
            F.avg_pool_sat(Tensor(np.zeros((1, 1, 4, 4))), 4)

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 6, 5))
        got = F.avg_pool(Tensor(x, dtype=HIGH_DTYPE), 3).data
        assert np.allclose(got, loop_avg_pool(x, 3), atol=1e-12)

    def test_sat_equals_naive_many(self, rng):
        worst = 0.0
        for trial in range(120):
            k = (1, 3, 5, 11, 17, 31)[trial % 6]
            h = int(rng.integers(1, 65))
            w = int(rng.integers(1, 65))
            x = Tensor(rng.normal(size=(1, 2, h, w)).astype(np.float32))
            d = np.abs(F.avg_pool(x, k).data - F.avg_pool_sat(x, k).data).max()
            worst = max(worst, float(d))
        assert worst <= 1e-5


class TestBilinear:
    def test_constant_preserved(self):
        x = Tensor(np.full((1, 1, 3, 5), 0.7, dtype=np.float32))
        y = F.bilinear_resize(x, 9, 11)
        assert np.allclose(y.data, 0.7, atol=1e-7)

    def test_1x1_broadcasts(self):
        x = Tensor(np.array([[[[2.5]]]], dtype=np.float32))
        y = F.bilinear_resize(x, 4, 6)
        assert np.allclose(y.data, 2.5)

    def test_matches_reference_2x2_to_4x4(self, rng):
        x = rng.normal(size=(1, 1, 2, 2))
        got = F.bilinear_resize(Tensor(x, dtype=HIGH_DTYPE), 4, 4).data
        want = reference_bilinear(x, 4, 4)
        assert np.allclose(got, want, atol=1e-12)

    def test_matches_reference_random_sizes(self, rng):
        for _ in range(5):
            h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            x = rng.normal(size=(1, 2, h, w))
            got = F.bilinear_resize(Tensor(x, dtype=HIGH_DTYPE), oh, ow).data
            assert np.allclose(got, reference_bilinear(x, oh, ow), atol=1e-12)

    def test_invalid_target_rejected(self):
        with pytest.raises(ValueError):
            F.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


class TestElementwise:
    def test_leaky_relu_values(self):
        x = Tensor(np.array([-1.0, 2.0], dtype=np.float32))
        y = F.leaky_relu(x)
        assert y.data[0] == pytest.approx(-0.01)
        assert y.data[1] == pytest.approx(2.0)

    def test_global_avg_pool_constant(self):
        x = Tensor(np.full((2, 3, 4, 5), 1.25, dtype=np.float32))
        y = F.global_avg_pool(x)
        assert y.shape == (2, 3, 1, 1)
        assert np.allclose(y.data, 1.25)

    def test_concat_mismatch_rejected(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 2, 5, 4)))
        with pytest.raises(ValueError, match="concat"):
            F.concat([a, b])

    def test_concat_splits_gradient(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True, dtype=HIGH_DTYPE)
        b = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True, dtype=HIGH_DTYPE)
        with Tape() as tape:
            y = F.concat([a, b])
            tape.backward(F.total_sum(F.mul(y, 2.0)))
        assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 2.0)

    def test_clamp01_range_and_gradient(self):
        x = Tensor(np.array([-0.5, 0.0, 0.5, 1.0, 1.5]), requires_grad=True,
                   dtype=HIGH_DTYPE)
        with Tape() as tape:
            y = F.clamp01(x)
            tape.backward(F.total_sum(y))
        assert np.array_equal(y.data, [0.0, 0.0, 0.5, 1.0, 1.0])
        assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


class TestPixelShuffle:
    def test_definition_mapping(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 4, 1, 1))
        y = F.pixel_shuffle(x)
        assert y.shape == (1, 1, 2, 2)
        assert np.array_equal(y.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_round_trip_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 8, 3, 4)).astype(np.float32))
        y = F.space_to_depth(F.pixel_shuffle(x))
        assert np.array_equal(y.data, x.data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
    def test_energy_preserved(self, c4, h, w, seed):
        x = np.random.default_rng(seed).normal(size=(1, 4 * c4, h, w))
        y = F.pixel_shuffle(Tensor(x, dtype=HIGH_DTYPE))
        assert np.isclose((y.data ** 2).sum(), (x ** 2).sum(), rtol=1e-12)

    def test_bad_channels_rejected(self):
        with pytest.raises(ValueError):
            F.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))))


class TestAdaptivePool:
    def test_matches_reference(self, rng):
        x = rng.normal(size=(2, 3, 13, 9))
        for bins in (1, 2, 3, 6):
            got = F.adaptive_avg_pool(Tensor(x, dtype=HIGH_DTYPE), bins).data
            assert np.allclose(got, reference_adaptive_pool(x, bins), atol=1e-12)

    def test_bin1_is_global_mean(self, rng):
        x = rng.normal(size=(1, 2, 7, 7))
        got = F.adaptive_avg_pool(Tensor(x, dtype=HIGH_DTYPE), 1).data
        assert np.allclose(got, x.mean(axis=(2, 3), keepdims=True))

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            F.adaptive_avg_pool(Tensor(np.zeros((1, 1, 4, 4))), 6)


class TestBatchNorm:
    def test_train_normalizes_batch(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 2, 8, 8)).astype(np.float32))
        gamma = Tensor(np.ones(2, dtype=np.float32))
        beta = Tensor(np.zeros(2, dtype=np.float32))
        rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
        y = F.batch_norm(x, gamma, beta, rm, rv, training=True)
        assert abs(y.data.mean()) < 1e-5
        assert abs(y.data.std() - 1.0) < 1e-3
        assert rm.max() > 0  # running stats updated

    def test_eval_uses_running_stats(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)).astype(np.float32))
        gamma = Tensor(np.ones(2, dtype=np.float32))
        beta = Tensor(np.zeros(2, dtype=np.float32))
        rm = np.array([1.0, -1.0], np.float32)
        rv = np.array([4.0, 0.25], np.float32)
        y = F.batch_norm(x, gamma, beta, rm, rv, training=False)
        want = (x.data - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
        assert np.allclose(y.data, want, atol=1e-6)


class TestGradients:
    """Elementwise finite-difference checks on randomized shapes."""

    def test_core_op_gradients(self, rng):
        shape = tuple(rng.integers(1, (5, 9, 9, 9)[i] + 1) for i in range(4))
        x = Tensor(rng.normal(size=shape), requires_grad=True, dtype=HIGH_DTYPE)

        cases = {
            "leaky": lambda: F.total_sum(F.mul(F.leaky_relu(x), F.leaky_relu(x))),
            "sqrt": lambda: F.total_sum(F.sqrt(F.add(F.mul(x, x), 1.0))),
            "abs": lambda: F.total_sum(F.mul(F.absolute(x), 0.5)),
            "gap": lambda: F.total_sum(F.mul(F.global_avg_pool(x), F.global_avg_pool(x))),
            "mean": lambda: F.mul(F.mean(F.mul(x, x)), 3.0),
        }
        for name, fn in cases.items():
            x.grad = None
            rep = check_gradients(fn, {name: x})
            assert max(rep.values()) <= 1e-3

    def test_div_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True, dtype=HIGH_DTYPE)
        b = Tensor(rng.random((2, 1, 4, 4)) + 0.5, requires_grad=True, dtype=HIGH_DTYPE)
        rep = check_gradients(lambda: F.total_sum(F.div(a, b)), {"a": a, "b": b})
        assert max(rep.values()) <= 1e-3

    def test_pool_and_resize_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 6, 7)), requires_grad=True, dtype=HIGH_DTYPE)
        cases = {
            "avg_pool": lambda: F.total_sum(F.mul(F.avg_pool(x, 3), F.avg_pool(x, 3))),
            "avg_pool_sat": lambda: F.total_sum(F.mul(F.avg_pool_sat(x, 5), F.avg_pool_sat(x, 5))),
            "adaptive": lambda: F.total_sum(F.mul(F.adaptive_avg_pool(x, 3),
                                                  F.adaptive_avg_pool(x, 3))),
            "bilinear": lambda: F.total_sum(F.mul(F.bilinear_resize(x, 9, 5),
                                                  F.bilinear_resize(x, 9, 5))),
            "downsample2": lambda: F.total_sum(F.mul(F.downsample_avg2(
                F.bilinear_resize(x, 6, 6)), 2.0)),
        }
        for name, fn in cases.items():
            x.grad = None
            rep = check_gradients(fn, {name: x})
            assert max(rep.values()) <= 1e-3
