import numpy as np
import pytest

from fkpnet.layers import (
    Conv2d,
    Dense,
    Dropout,
    Elu,
    EXPECTED_LAYER_SHAPES,
    EXPECTED_PARAM_COUNT,
    Flatten,
    LinearActivation,
    MaxPool2d,
    Model,
    ShapeError,
    build_keypoint_net,
    build_reduced_net,
)
from fkpnet.tensor import Rng


def central_diff(f, arr, step=1e-5):
    """Finite-difference gradient of scalar f() w.r.t. every entry of arr."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = f()
        flat[i] = orig - step
        lm = f()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * step)
    return grad


def max_rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


class TestConv2d:
    def test_output_shape_first_block(self):
        conv = Conv2d("conv2d_1", 1, 32, 4, Rng(0))
        out = conv.forward(np.zeros((1, 1, 96, 96), dtype=np.float32))
        assert out.shape == (1, 32, 93, 93)

    def test_identity_kernel(self):
        conv = Conv2d("c", 1, 1, 1, Rng(0))
        conv.weights.data[:] = 1.0
        conv.bias.data[:] = 0.0
        x = np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4)
        assert np.array_equal(conv.forward(x), x)

    def test_hand_convolution(self):
        conv = Conv2d("c", 1, 1, 2, Rng(0))
        conv.weights.data[:] = 1.0
        conv.bias.data[:] = 0.0
        out = conv.forward(np.ones((1, 1, 2, 2), dtype=np.float32))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 4.0

    def test_bias_added_per_filter(self):
        conv = Conv2d("c", 1, 2, 1, Rng(0))
        conv.weights.data[:] = 0.0
        conv.bias.data[:] = [1.5, -2.0]
        out = conv.forward(np.zeros((1, 1, 2, 2), dtype=np.float32))
        assert np.all(out[0, 0] == 1.5) and np.all(out[0, 1] == -2.0)

    def test_kernel_too_large(self):
        conv = Conv2d("c", 1, 1, 3, Rng(0))
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 1, 2, 5), dtype=np.float32))

    def test_channel_mismatch(self):
        conv = Conv2d("c", 2, 1, 1, Rng(0))
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 3, 4, 4), dtype=np.float32))

    def test_zero_upstream_zero_grads(self):
        conv = Conv2d("c", 2, 3, 3, Rng(1))
        out = conv.forward(np.random.default_rng(0).normal(size=(2, 2, 5, 5)).astype(np.float32))
        dx = conv.backward(np.zeros_like(out))
        assert np.all(dx == 0)
        assert np.all(conv.weights.grad == 0) and np.all(conv.bias.grad == 0)

    def test_bias_grad_is_upstream_sum(self):
        conv = Conv2d("c", 1, 2, 2, Rng(1))
        conv.forward(np.random.default_rng(1).normal(size=(3, 1, 4, 4)).astype(np.float32))
        up = np.random.default_rng(2).normal(size=(3, 2, 3, 3)).astype(np.float32)
        conv.backward(up)
        assert np.allclose(conv.bias.grad, up.sum(axis=(0, 2, 3)), atol=1e-6)

    def test_backward_shape_mismatch(self):
        conv = Conv2d("c", 1, 1, 2, Rng(0))
        conv.forward(np.zeros((1, 1, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            conv.backward(np.zeros((1, 1, 2, 2), dtype=np.float32))

    def test_backward_before_forward(self):
        conv = Conv2d("c", 1, 1, 2, Rng(0))
        with pytest.raises(RuntimeError):
            conv.backward(np.zeros((1, 1, 3, 3)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        conv = Conv2d("c", 2, 3, 3, Rng(5), dtype=np.float64)
        x = rng.normal(size=(1, 2, 5, 5))
        up = rng.normal(size=(1, 3, 3, 3))

        def loss():
            return float((conv.forward(x.copy()) * up).sum())

        loss()  # populate cache
        dx = conv.backward(up.copy())
        assert max_rel_err(conv.weights.grad, central_diff(loss, conv.weights.data)) < 1e-4
        assert max_rel_err(conv.bias.grad, central_diff(loss, conv.bias.data)) < 1e-4
        assert max_rel_err(dx, central_diff(loss, x)) < 1e-4


class TestMaxPool2d:
    def test_shapes_from_full_net(self):
        pool = MaxPool2d("p")
        assert pool.forward(np.zeros((1, 32, 93, 93), dtype=np.float32)).shape == (1, 32, 46, 46)
        assert pool.forward(np.zeros((1, 128, 21, 21), dtype=np.float32)).shape == (1, 128, 10, 10)

    def test_window_max(self):
        pool = MaxPool2d("p")
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        assert pool.forward(x)[0, 0, 0, 0] == 4.0

    def test_rejects_tiny_input(self):
        with pytest.raises(ShapeError):
            MaxPool2d("p").forward(np.zeros((1, 1, 1, 4), dtype=np.float32))

    def test_odd_trailing_row_dropped(self):
        pool = MaxPool2d("p")
        x = np.full((1, 1, 3, 3), -1.0, dtype=np.float32)
        x[0, 0, 2, :] = 99.0  # in the dropped row; must not appear in output
        x[0, 0, :, 2] = 99.0
        x[0, 0, 2, 2] = 99.0
        out = pool.forward(x)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == -1.0

    def test_tie_breaks_to_first_row_major(self):
        pool = MaxPool2d("p")
        x = np.array([[5.0, 5.0], [1.0, 1.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        pool.forward(x)
        dx = pool.backward(np.ones((1, 1, 1, 1), dtype=np.float32))
        assert dx[0, 0, 0, 0] == 1.0
        assert dx.sum() == 1.0

    def test_routing_conserves_gradient_sum(self):
        pool = MaxPool2d("p")
        x = np.random.default_rng(3).normal(size=(2, 3, 6, 8)).astype(np.float32)
        out = pool.forward(x)
        up = np.random.default_rng(4).normal(size=out.shape).astype(np.float32)
        dx = pool.backward(up)
        assert np.isclose(dx.sum(), up.sum(), atol=1e-5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        pool = MaxPool2d("p")
        x = rng.normal(size=(1, 1, 4, 4))  # continuous draws: no ties
        up = rng.normal(size=(1, 1, 2, 2))

        def loss():
            return float((pool.forward(x.copy()) * up).sum())

        loss()
        dx = pool.backward(up.copy())
        assert max_rel_err(dx, central_diff(loss, x)) < 1e-4


class TestElu:
    def test_fixed_points(self):
        elu = Elu("a")
        out = elu.forward(np.array([0.0, 2.0, -1.0]))
        assert out[0] == 0.0
        assert out[1] == 2.0
        assert abs(out[2] - (np.exp(-1.0) - 1.0)) < 1e-12
        assert abs(out[2] + 0.632121) < 1e-6

    def test_derivative_values(self):
        elu = Elu("a")
        x = np.array([3.0, -1.0])
        elu.forward(x)
        grad = elu.backward(np.ones_like(x))
        assert grad[0] == 1.0
        assert abs(grad[1] - np.exp(-1.0)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=64)
        x = x[np.abs(x) > 1e-3]  # keep clear of the origin
        elu = Elu("a")
        up = rng.normal(size=x.shape)

        def loss():
            return float((elu.forward(x.copy()) * up).sum())

        loss()
        dx = elu.backward(up.copy())
        assert max_rel_err(dx, central_diff(loss, x)) < 1e-4

    def test_preserves_dtype(self):
        elu = Elu("a")
        assert elu.forward(np.ones(3, dtype=np.float32)).dtype == np.float32
        elu2 = Elu("b")
        elu2.forward(np.ones(3, dtype=np.float32))
        assert elu2.backward(np.ones(3, dtype=np.float32)).dtype == np.float32


class TestDense:
    def test_wide_layer_shape(self):
        dense = Dense("dense_1", 6400, 1000, Rng(0))
        assert dense.forward(np.zeros((3, 6400), dtype=np.float32)).shape == (3, 1000)

    def test_identity_weights(self):
        dense = Dense("d", 3, 3, Rng(0))
        dense.weights.data[:] = np.eye(3, dtype=np.float32)
        dense.bias.data[:] = 0.0
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        assert np.array_equal(dense.forward(x), x)

    def test_hand_affine(self):
        dense = Dense("d", 2, 2, Rng(0))
        dense.weights.data[:] = np.eye(2, dtype=np.float32)
        dense.bias.data[:] = 1.0
        out = dense.forward(np.array([[1.0, 2.0]], dtype=np.float32))
        assert np.array_equal(out, [[2.0, 3.0]])

    def test_dim_mismatch(self):
        dense = Dense("d", 4, 2, Rng(0))
        with pytest.raises(ShapeError):
            dense.forward(np.zeros((1, 5), dtype=np.float32))

    def test_bias_grad_is_column_sums(self):
        dense = Dense("d", 3, 2, Rng(1))
        dense.forward(np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32))
        up = np.random.default_rng(1).normal(size=(4, 2)).astype(np.float32)
        dense.backward(up)
        assert np.allclose(dense.bias.grad, up.sum(axis=0), atol=1e-6)

    def test_weight_grad_hand_case(self):
        dense = Dense("d", 1, 1, Rng(0))
        dense.forward(np.array([[2.0]], dtype=np.float32))
        dense.backward(np.array([[3.0]], dtype=np.float32))
        assert dense.weights.grad[0, 0] == 6.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(21)
        dense = Dense("d", 5, 4, Rng(6), dtype=np.float64)
        x = rng.normal(size=(3, 5))
        up = rng.normal(size=(3, 4))

        def loss():
            return float((dense.forward(x.copy()) * up).sum())

        loss()
        dx = dense.backward(up.copy())
        assert max_rel_err(dense.weights.grad, central_diff(loss, dense.weights.data)) < 1e-4
        assert max_rel_err(dense.bias.grad, central_diff(loss, dense.bias.data)) < 1e-4
        assert max_rel_err(dx, central_diff(loss, x)) < 1e-4


class TestDropout:
    def test_eval_mode_identity(self):
        drop = Dropout("d", 0.6)
        drop.training = False
        x = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
        assert np.array_equal(drop.forward(x), x)

    def test_train_p_zero_identity(self):
        drop = Dropout("d", 0.0)
        drop.rng = Rng(0)
        x = np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32)
        assert np.array_equal(drop.forward(x), x)

    def test_inverted_scaling_preserves_mean(self):
        drop = Dropout("d", 0.5)
        drop.rng = Rng(123)
        x = np.ones(100_000, dtype=np.float32)
        out = drop.forward(x)
        assert abs(out.mean() - 1.0) < 0.02
        # survivors scaled by exactly 1/(1-p)
        assert set(np.unique(out)) == {0.0, 2.0}

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            Dropout("d", 1.0)
        with pytest.raises(ValueError):
            Dropout("d", -0.1)

    def test_train_mode_requires_rng(self):
        drop = Dropout("d", 0.3)
        with pytest.raises(RuntimeError):
            drop.forward(np.ones(4, dtype=np.float32))

    def test_backward_uses_same_mask(self):
        drop = Dropout("d", 0.4)
        drop.rng = Rng(77)
        x = np.ones(1000, dtype=np.float32)
        out = drop.forward(x)
        grad = drop.backward(np.ones(1000, dtype=np.float32))
        # gradient passes exactly where the forward survived
        assert np.array_equal(grad != 0, out != 0)


class TestFlatten:
    def test_row_major_order(self):
        flat = Flatten("f")
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        assert np.array_equal(flat.forward(x), [[1.0, 2.0, 3.0, 4.0]])

    def test_round_trip(self):
        flat = Flatten("f")
        x = np.random.default_rng(2).normal(size=(2, 3, 4, 5)).astype(np.float32)
        out = flat.forward(x)
        assert out.shape == (2, 60)
        assert np.array_equal(flat.backward(out), x)

    def test_last_block_size(self):
        flat = Flatten("f")
        assert flat.forward(np.zeros((2, 256, 5, 5), dtype=np.float32)).shape == (2, 6400)


@pytest.fixture(scope="module")
def full_net():
    return build_keypoint_net(Rng(0))


class TestFullNetwork:
    def test_total_parameter_count(self, full_net):
        assert full_net.count_params() == EXPECTED_PARAM_COUNT == 7_488_962

    def test_per_layer_parameter_counts(self, full_net):
        by_layer = {}
        for layer in full_net.layers:
            n = sum(p.data.size for p in layer.parameters())
            if n:
                by_layer[layer.name] = n
        assert by_layer == {
            "conv2d_1": 544,
            "conv2d_2": 18_496,
            "conv2d_3": 32_896,
            "conv2d_4": 33_024,
            "dense_1": 6_401_000,
            "dense_2": 1_001_000,
            "dense_3": 2_002,
        }
        assert sum(by_layer.values()) == 7_488_962

    def test_forward_shape_chain(self, full_net):
        full_net.eval()
        out, shapes = full_net.forward_with_shapes(np.zeros((1, 1, 96, 96), dtype=np.float32))
        assert out.shape == (1, 2)
        assert tuple(shapes) == EXPECTED_LAYER_SHAPES
        assert len(shapes) == 25

    def test_eval_forward_deterministic(self, full_net):
        full_net.eval()
        x = np.random.default_rng(5).uniform(size=(2, 1, 96, 96)).astype(np.float32)
        a = full_net.forward(x)
        b = full_net.forward(x)
        assert np.array_equal(a, b)

    def test_zero_input_zero_conv_weights_gives_zero_output(self):
        net = build_keypoint_net(Rng(1))
        for layer in net.layers:
            if isinstance(layer, Conv2d):
                layer.weights.data[:] = 0.0
        net.eval()
        out = net.forward(np.zeros((1, 1, 96, 96), dtype=np.float32))
        assert np.array_equal(out, [[0.0, 0.0]])

    def test_wrong_input_shape_rejected(self, full_net):
        with pytest.raises(ShapeError):
            full_net.forward(np.zeros((1, 1, 95, 96), dtype=np.float32))
        with pytest.raises(ShapeError):
            full_net.forward(np.zeros((1, 3, 96, 96), dtype=np.float32))

    def test_build_deterministic(self):
        a = build_keypoint_net(Rng(42))
        b = build_keypoint_net(Rng(42))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_biases_start_at_zero(self, full_net):
        for p in full_net.parameters():
            if p.name.endswith(".bias"):
                assert np.all(p.data == 0.0)

    def test_conv_init_range_and_dense_glorot_bound(self, full_net):
        for layer in full_net.layers:
            if isinstance(layer, Conv2d):
                w = layer.weights.data
                assert w.min() >= -0.05 and w.max() < 0.05
            if isinstance(layer, Dense):
                limit = np.sqrt(6.0 / (layer.d_in + layer.d_out))
                assert np.abs(layer.weights.data).max() <= limit + 1e-7


class TestModelBackward:
    def test_backward_before_forward(self):
        net = build_reduced_net(Rng(0))
        with pytest.raises(RuntimeError):
            net.backward(np.zeros((1, 2)))

    def test_zero_loss_grad_zeroes_all_grads(self):
        net = build_reduced_net(Rng(3))
        net.eval()
        net.forward(np.random.default_rng(0).uniform(size=(2, 1, 27, 27)))
        net.backward(np.zeros((2, 2)))
        for p in net.parameters():
            assert np.all(p.grad == 0)

    def test_grad_shapes_match_param_shapes(self):
        net = build_reduced_net(Rng(4))
        net.train().set_rng(Rng(9))
        net.forward(np.random.default_rng(1).uniform(size=(2, 1, 27, 27)))
        net.backward(np.ones((2, 2)))
        for p in net.parameters():
            assert p.grad.shape == p.data.shape


class TestBuilderGeometry:
    def test_reduced_net_structure(self):
        net = build_reduced_net(Rng(0))
        net.eval()
        assert len(net.layers) == 24  # 25 rows including the input
        out, shapes = net.forward_with_shapes(np.zeros((1, 1, 27, 27)))
        assert out.shape == (1, 2)
        assert shapes[0] == ("input_1", (1, 27, 27))
        assert shapes[-1][1] == (2,)

    def test_12px_input_cannot_carry_four_pool_stages(self):
        # 12 -> 9 -> 4 -> 2 -> 1 leaves nothing for the last two pools
        with pytest.raises(ShapeError):
            build_keypoint_net(Rng(0), input_hw=12, filters=(2, 2, 2, 2),
                               dense_units=(8, 8))

    def test_structure_is_fixed(self):
        with pytest.raises(ValueError):
            build_keypoint_net(Rng(0), filters=(8, 8, 8))
