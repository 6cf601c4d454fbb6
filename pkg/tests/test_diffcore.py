import contextvars

import numpy as np
import pytest

from app.diffcore import (
    Adam,
    AdamState,
    Graph,
    adam_step,
    backward,
    constant,
    eval_graph,
    get_dtype,
    grad_check,
    gradients,
    no_grad,
    parameter,
    precision,
)
from app.diffcore import ops
from app.errors import LocalInrError, NonFiniteGradientError, PrecisionError, ShapeError
from app.gradsuite import gradient_suite, primitive_cases


def test_precision_context_restores_default():
    assert get_dtype() == np.float32
    with precision(64):
        assert get_dtype() == np.float64
        assert parameter([1.0], "p").dtype == np.float64
    assert get_dtype() == np.float32


def test_precision_is_isolated_per_context():
    seen = []

    def inner():
        with precision(64):
            seen.append(get_dtype())

    contextvars.copy_context().run(inner)
    assert seen == [np.float64]
    assert get_dtype() == np.float32


def test_unknown_precision_rejected():
    with pytest.raises(PrecisionError):
        with precision(16):
            pass


def test_linear_identity_passes_input_through(float64):
    v = np.arange(6.0).reshape(2, 3)
    out = ops.linear(constant(v), parameter(np.eye(3), "w"), parameter(np.zeros(3), "b"))
    np.testing.assert_array_equal(out.data, v)


def test_relu_values():
    out = ops.relu(constant([-0.5, 0.5]))
    np.testing.assert_array_equal(out.data, np.array([0.0, 0.5], dtype=np.float32))


def test_center_kernel_convolution_is_identity(float64, rng):
    image = rng.standard_normal((2, 1, 7, 5))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    out = ops.conv2d(constant(image), parameter(kernel, "k"), None, stride=1, padding=1)
    np.testing.assert_array_equal(out.data, image)


def test_conv_output_size_arithmetic():
    assert ops.conv2d_output_size(160, 4, 2, 1) == 80
    assert ops.conv2d_output_size(20, 4, 1, 1) == 19


def test_average_pool_takes_block_means(float64):
    image = np.arange(24, dtype=np.float64).reshape(1, 1, 4, 6)
    x = parameter(image, "x")
    out = ops.avg_pool(x, (2, 3))
    np.testing.assert_allclose(out.data[0, 0], [[4.0, 7.0], [16.0, 19.0]])
    grad = gradients(ops.sum_(out), {"x": x})["x"]
    np.testing.assert_allclose(grad, np.full(image.shape, 1 / 6))
    with pytest.raises(ShapeError, match="avg_pool"):
        ops.avg_pool(constant(image), (3, 3))


def test_cross_entropy_stays_finite_at_infinite_logits(float64):
    logits = parameter(np.array([np.inf, -np.inf, np.inf, -np.inf]), "logits")
    labels = np.array([1.0, 0.0, 0.0, 1.0])
    loss = ops.sigmoid_cross_entropy_with_logits(logits, labels)
    assert np.all(np.isfinite(loss.data))
    np.testing.assert_array_equal(loss.data[:2], [0.0, 0.0])
    grad = gradients(ops.sum_(loss), {"logits": logits})["logits"]
    np.testing.assert_array_equal(grad, [0.0, 0.0, 1.0, -1.0])


def test_square_gradient(float64):
    x = parameter(3.0, "x")
    grads = gradients(ops.mul(x, x), {"x": x})
    assert grads["x"] == pytest.approx(6.0)


def test_l1_subgradient_at_zero_is_zero(float64):
    pred = parameter(np.array([0.5, -0.25, 1.0]), "pred")
    loss = ops.mean(ops.abs_(ops.sub(pred, pred.data.copy())))
    np.testing.assert_array_equal(gradients(loss, {"pred": pred})["pred"], np.zeros(3))


def test_unused_parameter_gets_zero_gradient(float64):
    x = parameter(np.ones(3), "x")
    unused = parameter(np.ones((2, 2)), "unused")
    grads = gradients(ops.sum_(x), {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
    assert grads["x"].shape == x.shape


def test_linear_sum_gradient_is_column_sums(float64, rng):
    matrix = rng.integers(-5, 6, size=(4, 3)).astype(np.float64)
    x = parameter(rng.standard_normal((1, 4)), "x")
    out = ops.linear(x, constant(matrix))
    grad = gradients(ops.sum_(out), {"x": x})["x"]
    np.testing.assert_array_equal(grad[0], matrix.sum(axis=1))


def test_no_grad_records_nothing(float64):
    x = parameter(np.ones(2), "x")
    with no_grad():
        y = ops.mul(x, 2.0)
    assert not y.requires_grad
    assert y.parents == ()


def test_shape_errors_name_the_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


def test_graph_is_pure_and_backward_needs_forward(float64, rng):
    w = parameter(rng.standard_normal((3, 2)), "w")
    graph = Graph(lambda p, x: ops.tanh(ops.linear(x, p["w"])), {"w": w})
    with pytest.raises(LocalInrError):
        backward(graph)
    x = rng.standard_normal((5, 3))
    first = eval_graph(graph, {"x": x})["out"].data
    second = eval_graph(graph, {"x": x})["out"].data
    np.testing.assert_array_equal(first, second)
    grads = backward(graph)
    assert grads["w"].shape == (3, 2)


def test_graph_rejects_unbound_inputs(float64):
    graph = Graph(lambda p, x: x, {})
    with pytest.raises(ShapeError):
        eval_graph(graph, {"y": 1.0})


def test_adam_zero_gradient_and_zero_lr_leave_params(float64):
    p = {"w": parameter(np.array([1.0, -2.0]), "w")}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    adam_step(p, {"w": np.array([0.3, 0.1])}, AdamState(), lr=0.0)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr(float64):
    p = {"w": parameter(np.array([0.0]), "w")}
    adam_step(p, {"w": np.array([0.37])}, AdamState(), lr=1e-3)
    assert p["w"].data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_without_momentum_is_sign_descent(float64):
    p = {"w": parameter(np.array([0.0, 0.0, 0.0]), "w")}
    opt = Adam(p, lr=0.1, beta1=0.0, beta2=0.0)
    opt.step({"w": np.array([2.0, -0.5, 1e-3])})
    np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_adam_rejects_non_finite_gradient(float64):
    p = {"w": parameter(np.zeros(2), "w")}
    with pytest.raises(NonFiniteGradientError, match="'w'"):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState(), lr=1e-3)


def test_grad_check_requires_64_bit():
    x = parameter(np.ones(2), "x")
    with pytest.raises(PrecisionError):
        grad_check(lambda: ops.sum_(x), {"x": x})


def test_grad_check_constant_function(float64):
    x = parameter(np.ones(3), "x")
    report = grad_check(lambda: ops.sum_(constant(np.ones(3))), {"x": x})
    assert report.max_relative_error["x"] == 0.0
    assert report.passed


def test_grad_check_two_layer_mlp(float64, rng):
    params = {
        "w1": parameter(rng.standard_normal((4, 6)), "w1"),
        "b1": parameter(rng.standard_normal(6), "b1"),
        "w2": parameter(rng.standard_normal((6, 1)), "w2"),
    }
    x = rng.standard_normal((5, 4))

    def fn():
        h = ops.tanh(ops.linear(x, params["w1"], params["b1"]))
        return ops.mean(ops.linear(h, params["w2"]))

    report = grad_check(fn, params)
    assert set(report.max_relative_error) == set(params)
    assert report.passed, report.failures()


def test_every_primitive_passes_finite_differences(float64):
    for name, (fn, params) in primitive_cases(np.random.default_rng(5)).items():
        report = grad_check(fn, params, eps=1e-5, threshold=1e-4)
        assert report.passed, (name, report.failures())


def test_every_catalogued_primitive_has_a_case():
    assert set(primitive_cases(np.random.default_rng(0))) == set(ops.PRIMITIVES)


def test_gradient_suite_covers_networks():
    entries = gradient_suite(seed=0, max_entries=8)
    targets = {e.target for e in entries}
    assert {"generator", "generator_pooled", "discriminator", "conv2d", "sigmoid_bce", "avg_pool"} <= targets
    failed = [(e.target, e.parameter, e.max_relative_error) for e in entries if not e.passed]
    assert not failed
