"""Autodiff engine checks: forward values, gradients, graph mechanics."""

import numpy as np
import pytest
from gradcheck import PRIMITIVE_CASES, run_primitive_trials

from patret import tensor as T
from patret.tensor import ComputeGraph, ShapeError, Tensor


class TestForwardValues:
    """Hand-verifiable outputs of the primitive set."""

    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 2.0])

    def test_l2_normalize_345_triangle(self):
        out = T.l2_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], rtol=1e-6)

    def test_matmul_shape(self):
        out = T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
        assert out.shape == (2, 4)

    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for i in range(3):
            k[i, i, 0, 0] = 1.0
        out = T.conv2d(x, Tensor(k), stride=1, pad=0)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_conv2d_hand_summed_windows(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv2d(x, k)
        np.testing.assert_allclose(out.data[0, 0], [[12.0, 16.0], [24.0, 28.0]])

    def test_conv2d_stride2_pad1_shape(self):
        out = T.conv2d(
            Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((4, 1, 3, 3))),
            stride=2, pad=1,
        )
        assert out.shape == (1, 4, 4, 4)

    def test_max_pool_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = T.max_pool(x, 2)
        np.testing.assert_allclose(out.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_batchnorm_train_normalizes(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((64, 8)) * 3.0 + 1.0)
        out = T.batchnorm(
            x, Tensor(np.ones(8)), Tensor(np.zeros(8)),
            np.zeros(8), np.ones(8), training=True,
        )
        np.testing.assert_allclose(out.data.mean(axis=0), np.zeros(8), atol=1e-5)
        np.testing.assert_allclose(out.data.std(axis=0), np.ones(8), atol=1e-3)

    def test_batchnorm_running_stats_update(self):
        x = np.array([[1.0, 10.0], [3.0, 30.0], [5.0, 50.0], [7.0, 70.0]])
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm(
            Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
            rm, rv, training=True, momentum=0.1,
        )
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), rtol=1e-6)
        np.testing.assert_allclose(
            rv, 0.9 * 1.0 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-6
        )

    def test_batchnorm_eval_uses_running_stats(self):
        rm, rv = np.array([2.0, -1.0]), np.array([4.0, 0.25])
        x = Tensor(np.array([[4.0, 0.0]]))
        out = T.batchnorm(
            x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False,
        )
        np.testing.assert_allclose(out.data, [[1.0, 2.0]], rtol=1e-4)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
        b = T.conv2d(Tensor(x.copy()), Tensor(k.copy()), stride=2, pad=1).data
        assert np.array_equal(a, b)

    def test_float32_default_float64_passthrough(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64


class TestBackwardBasics:
    """Closed-form gradients and graph bookkeeping."""

    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
        T.sum(x).backward()
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_square_grad(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.sum(T.power(x, 2.0)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-6)

    def test_accumulation_over_two_paths(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = T.sum(T.add(T.mul(x, x), x))
        loss.backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0, 7.0], rtol=1e-6)

    def test_broadcast_add_sums_grad(self):
        x = Tensor(np.zeros((3, 4)), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        T.sum(T.add(x, b)).backward()
        np.testing.assert_allclose(b.grad, [3.0] * 4)

    def test_constants_get_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 5.0])
        T.sum(T.mul(x, c)).backward()
        assert c.grad is None

    def test_trace_topological_order(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.exp(x)
        z = T.mul(y, y)
        graph = ComputeGraph.trace(z)
        pos = {id(t): i for i, t in enumerate(graph.nodes)}
        assert pos[id(x)] < pos[id(y)] < pos[id(z)]

    def test_clip_blocks_grad_outside_range(self):
        x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
        T.sum(T.clip(x, -1.0, 1.0)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


class TestErrors:
    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_backward_rejects_nonscalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.mul(x, 2.0)
        with pytest.raises(ShapeError):
            y.backward()

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            T.log(Tensor([1.0, 0.0]))

    def test_l2_normalize_rejects_zero_vector(self):
        with pytest.raises(ValueError):
            T.l2_normalize(Tensor(np.zeros((2, 3))), axis=1)

    def test_batchnorm_train_rejects_batch_of_one(self):
        with pytest.raises(ValueError):
            T.batchnorm(
                Tensor(np.ones((1, 4))), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                np.zeros(4), np.ones(4), training=True,
            )

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))

    def test_conv2d_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))

    def test_power_tracked_exponent_needs_positive_base(self):
        p = Tensor([2.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.power(Tensor([-1.0]), p)

    def test_unknown_primitive_rejected(self):
        with pytest.raises(ValueError):
            T.primitive_forward("fft", Tensor([1.0]))


class TestPrimitiveDispatch:
    def test_registry_covers_contract_ops(self):
        required = {
            "matmul", "add", "mul", "relu", "batchnorm", "l2_normalize",
            "reshape", "mean", "power", "log", "exp", "max_pool", "conv2d",
        }
        assert required <= set(T.PRIMITIVES)

    def test_dispatch_matches_direct_call(self):
        x = Tensor([[1.0, -2.0]])
        np.testing.assert_array_equal(
            T.primitive_forward("relu", x).data, T.relu(x).data
        )

    def test_dispatch_records_graph_for_tracked_input(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = T.primitive_forward("exp", x)
        assert out.op is not None and out.op.kind == "exp"


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_gradients_match_finite_differences(name):
    """Analytic backward agrees with the f64 central-difference oracle
    over 100 randomized instances per primitive (rel err < 1e-3)."""
    worst = run_primitive_trials(name, trials=100)
    assert worst < 1e-3
