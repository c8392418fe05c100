import numpy as np
import pytest
from hypothesis import given, strategies as st

from odenet import autodiff as ad
from odenet.autodiff import Tensor, backward
from odenet.nn import Layer, Mlp, init_weights

from conftest import assert_grad_close, central_diff_grad


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_zero_network_maps_everything_to_zero(self):
        layers = [
            Layer(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), "silu"),
            Layer(Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)), "linear"),
        ]
        out = Mlp(layers)(Tensor(np.random.uniform(-5, 5, (7, 3))))
        assert np.all(out.data == 0.0)

    def test_single_affine_layer(self):
        mlp = Mlp([Layer(Tensor([[2.0]]), Tensor([1.0]), "linear")])
        out = mlp(Tensor([[3.0]]))
        assert out.data[0, 0] == 7.0

    def test_silu_at_zero_is_zero(self):
        layers = [
            Layer(Tensor(np.ones((1, 2))), Tensor(np.zeros(2)), "silu"),
            Layer(Tensor(np.ones((2, 1))), Tensor(np.zeros(1)), "linear"),
        ]
        out = Mlp(layers)(Tensor([[0.0]]))
        assert out.data[0, 0] == 0.0

    def test_input_width_mismatch_raises(self):
        mlp = init_weights([3, 4, 2], seed=0)
        from odenet.errors import ConfigError

        with pytest.raises(ConfigError):
            mlp(Tensor(np.zeros((5, 2))))

    def test_linearity_of_linear_network(self):
        mlp = Mlp([Layer(Tensor(np.random.randn(3, 2)), Tensor(np.zeros(2)), "linear")])
        x = np.random.randn(4, 3)
        a = 3.7
        assert np.allclose(mlp(Tensor(a * x)).data, a * mlp(Tensor(x)).data)


class TestBackward:
    def test_sum_of_squares(self):
        w = leaf([3.0])
        loss = (w * w).sum()
        backward(loss)
        assert w.grad[0] == 6.0

    def test_unreachable_leaf_has_no_gradient(self):
        w = leaf([3.0])
        other = leaf([1.0])
        loss = (other * other).sum()
        backward(loss)
        assert w.grad is None  # reported as zero by the parameter store

    def test_non_scalar_root_rejected(self):
        w = leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(w * w)

    def test_mlp_gradients_match_finite_differences(self):
        mlp = init_weights([3, 64, 64, 2], seed=3)
        for p in mlp.leaves().values():
            p.requires_grad = True
        x = np.random.default_rng(5).normal(size=(4, 3))

        def loss_value():
            return float(mlp(Tensor(x)).sum().data)

        loss = mlp(Tensor(x)).sum()
        backward(loss)
        scale = float(loss.data)
        for name, p in mlp.leaves().items():
            numeric = central_diff_grad(loss_value, p.data)
            assert_grad_close(p.grad, numeric, rtol=1e-5, loss_scale=scale)

    def test_silu_derivative_at_zero_is_half(self):
        x = leaf([[0.0]])
        y = ad.silu(x).sum()
        backward(y)
        assert x.grad[0, 0] == 0.5

    def test_grad_accumulates_over_reuse(self):
        x = leaf([2.0])
        y = (x * x + x * 3.0).sum()  # d/dx = 2x + 3 = 7
        backward(y)
        assert x.grad[0] == 7.0

    def test_intermediate_grads_are_freed(self):
        x = leaf([2.0])
        mid = x * x
        backward((mid * 3.0).sum())
        assert mid.grad is None
        assert x.grad[0] == 12.0


class TestOps:
    @pytest.mark.parametrize(
        "op,dfn",
        [
            (lambda a, b: a + b, lambda a, b: (1.0, 1.0)),
            (lambda a, b: a - b, lambda a, b: (1.0, -1.0)),
            (lambda a, b: a * b, lambda a, b: (b, a)),
            (lambda a, b: a / b, lambda a, b: (1.0 / b, -a / b**2)),
        ],
    )
    def test_binary_ops(self, op, dfn):
        av = np.random.randn(3, 2)
        bv = np.random.randn(3, 2) + 3.0
        a, b = leaf(av), leaf(bv)
        backward(op(a, b).sum())
        da, db = dfn(av, bv)
        assert np.allclose(a.grad, np.broadcast_to(da, av.shape))
        assert np.allclose(b.grad, np.broadcast_to(db, bv.shape))

    def test_broadcast_bias_grad_sums(self):
        a = leaf(np.random.randn(5, 3))
        b = leaf(np.random.randn(3))
        backward((a + b).sum())
        assert np.allclose(b.grad, 5.0)

    def test_exp_sigmoid(self):
        x = leaf(np.array([[0.3, -1.2]]))
        backward(ad.exp(x).sum())
        assert np.allclose(x.grad, np.exp(x.data))
        x2 = leaf(np.array([[0.3, -1.2]]))
        backward(ad.sigmoid(x2).sum())
        s = 1 / (1 + np.exp(-x2.data))
        assert np.allclose(x2.grad, s * (1 - s))

    def test_sigmoid_is_stable_for_large_negative_input(self):
        x = leaf(np.array([[-1e4]]))
        y = ad.sigmoid(x)
        assert y.data[0, 0] == 0.0
        backward(y.sum())
        assert np.isfinite(x.grad).all()

    def test_matmul(self):
        a = leaf(np.random.randn(4, 3))
        b = leaf(np.random.randn(3, 2))
        backward(ad.matmul(a, b).sum())
        g = np.ones((4, 2))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)

    def test_concat_stack_getitem(self):
        a = leaf(np.random.randn(3, 2))
        b = leaf(np.random.randn(3, 1))
        out = ad.concat([a, b], axis=1)
        assert out.data.shape == (3, 3)
        backward((out * 2.0).sum())
        assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 2.0)

        c = leaf(np.random.randn(3, 2))
        st_ = ad.stack([c, c], axis=1)
        assert st_.data.shape == (3, 2, 2)
        backward(st_.sum())
        assert np.allclose(c.grad, 2.0)

        d = leaf(np.random.randn(4, 5))
        backward(d[:, 1:3].sum())
        expect = np.zeros((4, 5))
        expect[:, 1:3] = 1.0
        assert np.array_equal(d.grad, expect)

    def test_take_rows_scatter_adds(self):
        a = leaf(np.arange(12.0).reshape(4, 3))
        idx = np.array([2, 0, 2])
        out = ad.take_rows(a, idx)
        assert np.array_equal(out.data, a.data[idx])
        backward(out.sum())
        expect = np.zeros((4, 3))
        expect[2] = 2.0
        expect[0] = 1.0
        assert np.array_equal(a.grad, expect)

    def test_axpy_and_rk4_combine(self):
        x = leaf(np.random.randn(3, 2))
        k = leaf(np.random.randn(3, 2))
        alpha = np.array([[0.5], [0.0], [2.0]])
        out = ad.axpy(x, k, alpha)
        assert np.allclose(out.data, x.data + k.data * alpha)
        backward(out.sum())
        assert np.allclose(x.grad, 1.0)
        assert np.allclose(k.grad, np.broadcast_to(alpha, (3, 2)))

        ks = [leaf(np.random.randn(2, 2)) for _ in range(4)]
        x2 = leaf(np.random.randn(2, 2))
        dt = 0.3
        out = ad.rk4_combine(x2, *ks, dt)
        expect = x2.data + dt / 6 * (ks[0].data + 2 * ks[1].data + 2 * ks[2].data + ks[3].data)
        assert np.allclose(out.data, expect)
        backward(out.sum())
        assert np.allclose(ks[0].grad, dt / 6)
        assert np.allclose(ks[1].grad, dt / 3)

    def test_mask_mix_blocks_gradient_on_observed_channels(self):
        state = leaf(np.random.randn(2, 3))
        values = np.random.randn(2, 3)
        mask = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        out = ad.mask_mix(state, values, mask)
        assert np.allclose(out.data, state.data * (1 - mask) + values * mask)
        backward(out.sum())
        assert np.array_equal(state.grad, 1.0 - mask)

    def test_no_grad_records_nothing(self):
        x = leaf(np.ones((2, 2)))
        with ad.no_grad():
            y = (x * x).sum()
        assert y._backward is None and not y.requires_grad


class TestGradientCheckProperty:
    @given(
        widths=st.sampled_from([[2, 8, 2], [3, 16, 16, 3], [6, 64, 64, 6]]),
        batch=st.integers(1, 4),
        seed=st.integers(0, 1000),
    )
    def test_forward_plus_arithmetic_losses(self, widths, batch, seed):
        rng = np.random.default_rng(seed)
        mlp = init_weights(widths, seed=seed)
        for p in mlp.leaves().values():
            p.requires_grad = True
        x = rng.normal(size=(batch, widths[0]))
        c = rng.normal(size=(batch, widths[-1]))

        def compute():
            out = mlp(Tensor(x))
            mixed = out * c + out * out
            return mixed.mean()

        loss = compute()
        backward(loss)
        scale = float(loss.data)
        target = mlp.layers[0].w  # checking one leaf keeps the FD cost bounded
        numeric = central_diff_grad(lambda: float(compute().data), target.data)
        assert_grad_close(target.grad, numeric, rtol=1e-5, loss_scale=scale)
