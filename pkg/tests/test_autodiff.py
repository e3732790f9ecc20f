import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperreg import autodiff as ad


def t(x, rg=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


class TestForward:
    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.random((1, 1, 8, 8)))
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        k[1, 1, 0, 0] = 1.0
        out = ad.conv2d(x, ad.Tensor(k))
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_relu_tanh_points(self):
        assert ad.relu(t(-2.0)).item() == 0.0
        assert ad.relu(t(3.0)).item() == 3.0
        assert ad.tanh(t(0.0)).item() == 0.0

    def test_matmul_hand_case(self):
        # hand-computed 2x3 . 3x1 product
        a = t([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = t([[1.0], [0.5], [-1.0]])
        out = ad.matmul(a, b)
        np.testing.assert_allclose(out.data, [[1 + 1 - 3], [4 + 2.5 - 6]])

    def test_leaky_relu(self):
        out = ad.leaky_relu(t([-1.0, 2.0]), alpha=0.2)
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    def test_avg_pool_and_upsample_shapes(self):
        x = ad.Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        p = ad.avg_pool2d(x)
        assert p.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(p.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        u = ad.upsample2d(p)
        assert u.shape == (1, 1, 4, 4)
        assert u.data[0, 0, 0, 0] == u.data[0, 0, 1, 1] == 2.5

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))),
                      ad.Tensor(np.zeros((3, 3, 3, 1))))


class TestBackward:
    def test_sum_grad_ones(self):
        x = t(np.random.default_rng(1).random((3, 4)), rg=True)
        with ad.record() as tape:
            loss = ad.sum_(x)
        ad.backward(loss, tape)
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_mean_square_hand_grad(self):
        # d/dx mean(x^2) = 2x/n for x=[1,2,3]
        x = t([1.0, 2.0, 3.0], rg=True)
        with ad.record() as tape:
            loss = ad.mean(ad.square(x))
        ad.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0])

    def test_double_backward_accumulates(self):
        x = t([1.0, 2.0], rg=True)
        with ad.record() as tape:
            loss = ad.sum_(ad.square(x))
        ad.backward(loss, tape)
        g1 = x.grad.copy()
        ad.backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * g1)

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], rg=True)
        with ad.record() as tape:
            y = ad.square(x)
        with pytest.raises(ValueError):
            ad.backward(y, tape)

    def test_detached_graph_rejected(self):
        x = t([1.0], rg=False)
        with ad.record() as tape:
            pass
        with pytest.raises(ValueError):
            ad.backward(ad.sum_(x), tape)

    def test_no_grad_empty_tape_same_values(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.random((1, 2, 4, 4)), requires_grad=True)
        k = ad.Tensor(rng.random((3, 3, 2, 2)) - 0.5, requires_grad=True)
        with ad.record() as tape:
            y1 = ad.conv2d(x, k)
        with ad.record() as tape2:
            with ad.no_grad():
                y2 = ad.conv2d(x, k)
        np.testing.assert_array_equal(y1.data, y2.data)
        assert len(tape) == 1 and len(tape2) == 0


class TestCheckGradients:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(3)
        x = ad.Tensor(rng.uniform(-1, 1, (8,)))
        err = ad.check_gradients(lambda xs: ad.sum_(xs[0] * 3.0), [x])
        assert err < 1e-9

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(4)
        vals = rng.uniform(-1, 1, (32,))
        vals[np.abs(vals) < 0.01] = 0.5
        err = ad.check_gradients(lambda xs: ad.sum_(ad.relu(xs[0])), [ad.Tensor(vals)])
        assert err < 1e-4

    @pytest.mark.parametrize("op", [
        lambda x: ad.sum_(ad.tanh(x)),
        lambda x: ad.sum_(ad.sigmoid(x)),
        lambda x: ad.sum_(ad.exp(x)),
        lambda x: ad.sum_(ad.log(ad.square(x) + 1.0)),
        lambda x: ad.sum_(ad.sqrt(ad.square(x) + 1.0)),
        lambda x: ad.mean(ad.square(x)),
        lambda x: ad.sum_(ad.leaky_relu(x * 2.0 + 0.05)),
    ])
    def test_elementwise_ops(self, op):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.uniform(-1, 1, (16,)))
        x.data[np.abs(x.data) < 0.02] = 0.3
        assert ad.check_gradients(lambda xs: op(xs[0]), [x]) < 1e-4

    def test_matmul_dense(self):
        rng = np.random.default_rng(6)
        x = ad.Tensor(rng.uniform(-1, 1, (3, 4)))
        w = ad.Tensor(rng.uniform(-1, 1, (4, 2)))
        b = ad.Tensor(rng.uniform(-1, 1, (2,)))
        err = ad.check_gradients(
            lambda xs: ad.sum_(ad.square(ad.dense(xs[0], xs[1], xs[2]))), [x, w, b])
        assert err < 1e-4

    def test_conv2d(self):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)))
        k = ad.Tensor(rng.uniform(-1, 1, (3, 3, 2, 3)))
        b = ad.Tensor(rng.uniform(-1, 1, (3,)))
        err = ad.check_gradients(
            lambda xs: ad.mean(ad.square(ad.conv2d(xs[0], xs[1], xs[2]))), [x, k, b])
        assert err < 1e-4

    def test_pool_upsample_diff_concat(self):
        rng = np.random.default_rng(8)
        x = ad.Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))

        def f(xs):
            a = ad.avg_pool2d(xs[0])
            b = ad.upsample2d(a)
            c = ad.concat([b, xs[0]], axis=1)
            dx, dy = ad.spatial_gradient(c)
            return ad.sum_(ad.square(dx)) + ad.sum_(ad.square(dy))

        assert ad.check_gradients(f, [x]) < 1e-4

    def test_bilinear_sample(self):
        rng = np.random.default_rng(9)
        img = ad.Tensor(rng.uniform(-1, 1, (1, 1, 6, 6)))
        # keep probe points off the integer lattice and away from borders
        disp = ad.Tensor(rng.uniform(0.1, 0.9, (1, 2, 6, 6)))

        def f(xs):
            return ad.mean(ad.square(ad.bilinear_sample(xs[0], xs[1])))

        assert ad.check_gradients(f, [img, disp]) < 1e-4

    def test_slice_reshape_sum_axis(self):
        rng = np.random.default_rng(10)
        x = ad.Tensor(rng.uniform(-1, 1, (12,)))

        def f(xs):
            a = ad.reshape(ad.slice1d(xs[0], 2, 8), (2, 4))
            return ad.sum_(ad.square(ad.sum_(a, axis=1)))

        assert ad.check_gradients(f, [x]) < 1e-4


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        rng = np.random.default_rng(11)
        xv = rng.random((1, 2, 8, 8)).astype(np.float32)
        kv = (rng.random((3, 3, 2, 2)).astype(np.float32) - 0.5)
        results = []
        for _ in range(2):
            x = ad.Tensor(xv.copy(), requires_grad=True)
            k = ad.Tensor(kv.copy(), requires_grad=True)
            with ad.record() as tape:
                loss = ad.mean(ad.square(ad.conv2d(x, k)))
            ad.backward(loss, tape)
            results.append((loss.item(), x.grad.copy(), k.grad.copy()))
        assert results[0][0] == results[1][0]
        np.testing.assert_array_equal(results[0][1], results[1][1])
        np.testing.assert_array_equal(results[0][2], results[1][2])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_composition_gradients(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.uniform(-1, 1, (4, 4)))
    w = ad.Tensor(rng.uniform(-1, 1, (4, 3)))

    def f(xs):
        h = ad.tanh(ad.matmul(xs[0], xs[1]))
        return ad.mean(ad.square(h)) + 0.1 * ad.sum_(ad.sigmoid(xs[0]))

    assert ad.check_gradients(f, [x, w]) < 1e-4
