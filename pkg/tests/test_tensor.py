import numpy as np
import pytest

from crossview import tensor as T
from crossview.errors import ContractError, DomainError, ShapeError
from crossview.tensor import CHW, CWH, HWC, WCH, DimOrder, Tensor

ALL_ORDERS = [CHW, HWC, WCH, CWH]


def oracle_permute(arr: np.ndarray, order) -> np.ndarray:
    """Independent element-by-element permutation on small rank-3 arrays."""
    shape = tuple(arr.shape[a] for a in order)
    out = np.empty(shape, dtype=arr.dtype)
    inv = [0] * len(order)
    for i, a in enumerate(order):
        inv[a] = i
    for idx in np.ndindex(*arr.shape):
        out[tuple(idx[a] for a in order)] = arr[idx]
    return out


class TestDimOrder:
    def test_named_orders(self):
        assert CHW.order == (0, 1, 2)
        assert HWC.order == (1, 2, 0)
        assert WCH.order == (2, 0, 1)
        assert CWH.order == (0, 2, 1)

    def test_non_bijection_rejected(self):
        with pytest.raises(ShapeError):
            DimOrder((0, 0, 1))

    def test_inverse(self):
        assert DimOrder(HWC.inverse()).inverse() == HWC.order


class TestPermute:
    def test_shape_example(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert T.permute(t, HWC).shape == (3, 4, 2)

    def test_identity_order(self):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4))
        out = T.permute(Tensor(arr), CHW)
        assert np.array_equal(out.data, arr)

    def test_matches_index_map_oracle(self):
        rng = np.random.default_rng(1)
        for order in ALL_ORDERS:
            arr = rng.normal(size=(2, 3, 4))
            assert np.array_equal(T.permute(Tensor(arr), order).data, oracle_permute(arr, order.order))

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        for i in range(100):
            shape = tuple(rng.integers(1, 5, size=3))
            arr = rng.normal(size=shape)
            order = ALL_ORDERS[i % 4]
            back = T.inverse_permute(T.permute(Tensor(arr), order), order)
            assert np.array_equal(back.data, arr)

    def test_inverse_permute_trivial(self):
        arr = np.random.default_rng(3).normal(size=(2, 3, 4))
        assert np.array_equal(T.inverse_permute(Tensor(arr), CHW).data, arr)
        y = T.permute(Tensor(arr), HWC)
        assert T.inverse_permute(y, HWC).shape == (2, 3, 4)

    def test_rank_mismatch(self):
        with pytest.raises(ShapeError):
            T.permute(Tensor(np.zeros((2, 3))), HWC)

    def test_sum_invariant_under_permute(self):
        rng = np.random.default_rng(4)
        for order in ALL_ORDERS:
            arr = rng.normal(size=(3, 4, 5))
            a = T.tsum(Tensor(arr)).item()
            b = T.tsum(T.permute(Tensor(arr), order)).item()
            assert a == pytest.approx(b, rel=1e-14, abs=1e-12)


class TestPrimitives:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_global_avg_pool_constant(self):
        arr = np.full((3, 5, 7), 2.5)
        out = T.global_avg_pool(Tensor(arr))
        assert out.shape == (3,)
        assert np.allclose(out.data, 2.5)

    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 6, 6))
        kernel = np.eye(3).reshape(3, 3, 1, 1)
        out = T.conv2d(Tensor(x), Tensor(kernel))
        assert np.allclose(out.data, x)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            T.log(Tensor(np.array([1.0, -0.5])))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            T.div(Tensor(1.0), Tensor(0.0))

    def test_sqrt_negative(self):
        with pytest.raises(DomainError):
            T.sqrt(Tensor(-1.0))

    def test_channel_pools(self):
        arr = np.arange(24.0).reshape(2, 3, 4)
        avg = T.channel_avg_pool(Tensor(arr))
        mx = T.channel_max_pool(Tensor(arr))
        assert avg.shape == (1, 3, 4)
        assert np.allclose(avg.data[0], arr.mean(axis=0))
        assert np.allclose(mx.data[0], arr.max(axis=0))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = T.softmax(Tensor(rng.normal(size=(4, 7))))
        assert np.allclose(out.data.sum(axis=1), 1.0)

    def test_no_nan_from_extreme_sigmoid(self):
        out = T.sigmoid(Tensor(np.array([-1e4, 1e4])))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0


class TestBackward:
    def test_sum_gradient_ones(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.backward(T.tsum(x))
        assert np.array_equal(x.grad, np.ones(3))

    def test_square_gradient(self):
        arr = np.array([1.0, -2.0, 0.5])
        x = Tensor(arr, requires_grad=True)
        T.backward(T.tsum(x * x))
        assert np.allclose(x.grad, 2 * arr)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        T.backward(T.tsum(x + x))
        assert np.array_equal(x.grad, np.array([2.0]))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x + x)

    def test_permute_preserves_sum_gradient(self):
        x = Tensor(np.random.default_rng(7).normal(size=(2, 3, 4)), requires_grad=True)
        T.backward(T.tsum(T.permute(x, HWC)))
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_broadcast_add_unbroadcasts(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        T.backward(T.tsum(x + b))
        assert np.array_equal(b.grad, np.full(4, 3.0))
        assert np.array_equal(x.grad, np.ones((3, 4)))


class TestGradCheck:
    def test_sigmoid_sum_spec_example(self):
        x = np.random.default_rng(8).uniform(-2, 2, size=(4, 4))
        err = T.grad_check(lambda t: T.tsum(T.sigmoid(t)), x, h=1e-3)
        assert err < 1e-6

    def test_matmul(self):
        rng = np.random.default_rng(9)
        m = Tensor(rng.normal(size=(4, 3)))
        err = T.grad_check(lambda t: T.tsum(T.matmul(t, m)), rng.uniform(-2, 2, size=(2, 4)))
        assert err < 1e-5

    def test_conv2d(self):
        rng = np.random.default_rng(10)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.3)
        err = T.grad_check(
            lambda t: T.tsum(T.conv2d(t, w, stride=2, padding=1)),
            rng.uniform(-2, 2, size=(1, 3, 6, 6)),
        )
        assert err < 1e-5
