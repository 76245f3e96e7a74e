import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softprune import tensor as T
from softprune.errors import DimensionError, EmptyBatchError, GeometryError, LabelError
from softprune.gradcheck import check_batchnorm, check_conv2d, check_softmax_ce


def naive_conv(x, w, stride, pad):
    """Loop-by-loop cross-correlation, the oracle for conv2d."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


class TestConv2d:
    img = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])

    def test_zero_filter(self):
        assert T.conv2d(self.img, np.zeros((1, 1, 2, 2))).tolist() == [[[[0.0]]]]

    def test_ones_filter(self):
        assert T.conv2d(self.img, np.ones((1, 1, 2, 2))).tolist() == [[[[10.0]]]]

    def test_identity_kernel(self):
        x = np.eye(3)[None, None]
        np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))), x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        np.testing.assert_allclose(T.conv2d(x, w, stride, pad), naive_conv(x, w, stride, pad), atol=1e-12)

    def test_zero_filter_gives_zero_map_for_any_input(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((5, 3, 3, 3))
        w[2] = 0
        out = T.conv2d(rng.standard_normal((2, 3, 8, 8)), w, 1, 1)
        assert np.all(out[:, 2] == 0)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(GeometryError):
            T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        lhs = T.conv2d(a * x + b * y, w, 1, 1)
        rhs = a * T.conv2d(x, w, 1, 1) + b * T.conv2d(y, w, 1, 1)
        scale = max(1.0, np.abs(lhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-6 * scale


class TestConv2dGrad:
    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3))
        dx, dw = T.conv2d_grad(x, w, np.zeros((1, 3, 4, 4)), 1, 1)
        assert not dx.any() and not dw.any()

    def test_scalar_product_rule(self):
        dx, dw = T.conv2d_grad(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0), np.ones((1, 1, 1, 1)))
        assert dx.item() == 3.0 and dw.item() == 2.0

    def test_filter_without_upstream_has_zero_grad(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        d = rng.standard_normal((2, 3, 5, 5))
        d[:, 1] = 0
        _, dw = T.conv2d_grad(x, w, d, 1, 1)
        assert not dw[1].any()

    def test_bad_upstream_shape(self):
        with pytest.raises(DimensionError):
            T.conv2d_grad(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 4, 4)))

    def test_finite_differences(self):
        assert check_conv2d(np.random.default_rng(7)) < 1e-4
        assert check_conv2d(np.random.default_rng(8), stride=2, pad=1) < 1e-4


class TestBatchNorm:
    def args(self, c, **kw):
        d = dict(gamma=np.ones(c), beta=np.zeros(c), running_mean=np.zeros(c), running_var=np.ones(c))
        d.update(kw)
        return d

    def test_zero_affine_channel(self):
        x = np.random.default_rng(0).standard_normal((3, 2, 4, 4))
        out, _, _ = T.batchnorm(x, **self.args(2, gamma=np.array([1.0, 0.0]), beta=np.array([0.5, 0.0])))
        assert np.all(out[:, 1] == 0)

    def test_eval_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 2, 4, 4))
        out, _, _ = T.batchnorm(x, **self.args(2), eps=1e-5, train=False)
        assert np.abs(out - x).max() < 1e-5 * np.abs(x).max() + 1e-6

    def test_train_two_values(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        out, _, _ = T.batchnorm(x, **self.args(1), eps=1e-5)
        # mean 2, biased var 1
        expected = np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.ravel(), expected, rtol=1e-12)

    def test_running_stats_update(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        _, (rm, rv), _ = T.batchnorm(x, **self.args(1), momentum=0.1)
        assert rm[0] == pytest.approx(0.2)
        assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased batch var = 2

    def test_eval_leaves_running_stats(self):
        a = self.args(1)
        _, (rm, rv), _ = T.batchnorm(np.full((2, 1, 1, 1), 7.0), **a, train=False)
        assert rm.tolist() == [0.0] and rv.tolist() == [1.0]

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.batchnorm(np.zeros((1, 3, 2, 2)), **self.args(2))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatchError):
            T.batchnorm(np.zeros((0, 2, 2, 2)), **self.args(2))

    @pytest.mark.parametrize("train", [True, False])
    def test_finite_differences(self, train):
        assert check_batchnorm(np.random.default_rng(3), train) < 1e-4


class TestRelu:
    def test_definition(self):
        assert T.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]

    def test_grad(self):
        assert T.relu_grad(np.array([-1.0, 2.0]), np.array([5.0, 5.0])).tolist() == [0, 5]

    def test_grad_at_zero_is_zero(self):
        assert T.relu_grad(np.array([0.0]), np.array([1.0])).tolist() == [0]

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_idempotent(self, xs):
        x = np.array(xs)
        np.testing.assert_array_equal(T.relu(T.relu(x)), T.relu(x))


class TestPooling:
    def test_constant(self):
        assert np.all(T.global_avg_pool(np.full((2, 3, 4, 4), 1.5)) == 1.5)

    def test_hand_mean(self):
        assert T.global_avg_pool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 2.5

    def test_zero(self):
        assert not T.global_avg_pool(np.zeros((1, 2, 3, 3))).any()

    def test_avg_pool2(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert T.avg_pool2(x).ravel().tolist() == [2.5, 4.5, 10.5, 12.5]


class TestAffine:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_array_equal(T.affine(x, np.eye(3), np.zeros(3)), x)

    def test_hand_dot(self):
        assert T.affine(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([5.0])).tolist() == [[16.0]]

    def test_constant_map(self):
        b = np.array([1.0, -2.0])
        out = T.affine(np.random.default_rng(0).standard_normal((3, 4)), np.zeros((2, 4)), b)
        assert all((row == b).all() for row in out)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            T.affine(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss, _ = T.softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
        assert abs(loss - math.log(10)) < 1e-9

    def test_saturated_no_overflow(self):
        loss, d = T.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(d))

    def test_bad_label(self):
        with pytest.raises(LabelError, match="index 1"):
            T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_finite_differences(self):
        assert check_softmax_ce(np.random.default_rng(5)) < 1e-4

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 50))
    def test_loss_nonnegative(self, seed, scale):
        rng = np.random.default_rng(seed)
        loss, _ = T.softmax_cross_entropy(rng.standard_normal((4, 5)) * scale, rng.integers(0, 5, 4))
        assert loss >= 0


class TestSgd:
    def test_zero_lr(self):
        p = {"w": np.array([1.0, 2.0])}
        T.sgd_update(p, {"w": np.array([3.0, 4.0])}, {}, lr=0.0, momentum=0.9, weight_decay=0.1)
        assert p["w"].tolist() == [1.0, 2.0]

    def test_one_step(self):
        p = {"w": np.array([1.0])}
        T.sgd_update(p, {"w": np.array([1.0])}, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert p["w"].item() == pytest.approx(0.9)

    def test_stationary(self):
        p = {"w": np.array([1.5])}
        T.sgd_update(p, {"w": np.array([0.0])}, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert p["w"].item() == 1.5

    def test_momentum_accumulates(self):
        p, v = {"w": np.array([0.0])}, {}
        for _ in range(2):
            T.sgd_update(p, {"w": np.array([1.0])}, v, lr=1.0, momentum=0.5)
        assert v["w"].item() == 1.5 and p["w"].item() == -2.5

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        start = {"a": rng.standard_normal(10).astype(np.float32), "b": rng.standard_normal((3, 3)).astype(np.float32)}
        grads = [{k: rng.standard_normal(v.shape).astype(np.float32) for k, v in start.items()} for _ in range(5)]
        results = []
        for _ in range(2):
            p = {k: v.copy() for k, v in start.items()}
            vel = {}
            for g in grads:
                T.sgd_update(p, g, vel, lr=0.05, momentum=0.9, weight_decay=5e-4)
            results.append(p)
        for k in start:
            assert results[0][k].tobytes() == results[1][k].tobytes()


class TestGradCheck:
    def test_linear_function_exact(self):
        c = np.random.default_rng(0).standard_normal(6)
        x = np.random.default_rng(1).standard_normal(6)
        assert T.grad_check(lambda v: float(c @ v), x, c, 1e-5) < 1e-10

    def test_detects_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        assert T.grad_check(lambda v: float(np.sum(v ** 2)), x, np.array([2.0, 5.0])) > 0.1

    def test_requires_float64(self):
        with pytest.raises(TypeError):
            T.grad_check(lambda v: 0.0, np.zeros(2, np.float32), np.zeros(2))
