import numpy as np
import pytest

from depthfuse.errors import ParseError, ShapeError, TrainingError, UsageError
from depthfuse.netcore import (
    Conv2d,
    Dense,
    FeatureMap,
    Flatten,
    LayerParams,
    MaxPool2d,
    ReLU,
    Sequential,
    Softmax,
    StepDecay,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from helpers import assert_grad_close, central_diff, rel_err


def test_relu_forward():
    out = ReLU().forward(np.array([[-1.0, 2.0]]))
    assert np.array_equal(out, [[0.0, 2.0]])


def test_relu_backward_flat_region():
    layer = ReLU()
    layer.forward(np.array([[-1.0]]))
    assert layer.backward(np.array([[1.0]]))[0, 0] == 0.0


def test_identity_conv():
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 3, kernel_size=1, rng=rng)
    conv.p.weights[...] = np.eye(3).reshape(3, 3, 1, 1)
    conv.p.bias[...] = 0.0
    x = rng.standard_normal((2, 3, 4, 5))
    assert np.allclose(conv.forward(x), x)


def test_maxpool_2x2():
    out = MaxPool2d(2).forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 4.0


def test_dense_adjoint():
    rng = np.random.default_rng(1)
    layer = Dense(4, 3, rng=rng)
    layer.p.bias[...] = 0.0
    x = rng.standard_normal((1, 4))
    layer.forward(x)
    dout = rng.standard_normal((1, 3))
    din = layer.backward(dout)
    assert np.allclose(din, dout @ layer.p.weights)


def test_conv_backward_finite_difference_3x5x5():
    rng = np.random.default_rng(2)
    conv = Conv2d(3, 2, 3, rng=rng)
    x = rng.standard_normal((1, 3, 5, 5))
    proj = rng.standard_normal((1, 2, 5, 5))

    def f():
        return float((conv.forward(x) * proj).sum())

    f()
    din = conv.backward(proj)
    assert_grad_close(f, x, din, tol=1e-4)
    conv.p.zero_grads()
    f()
    conv.backward(proj)
    assert_grad_close(f, conv.p.weights, conv.p.weight_grad, tol=1e-4)


@pytest.mark.parametrize("case", ["dense", "conv", "relu", "pool", "softmax", "flatten"])
def test_layer_input_gradients(case):
    rng = np.random.default_rng(7)
    for _ in range(5):
        if case == "dense":
            layer, x = Dense(5, 4, rng=rng), rng.standard_normal((3, 5))
        elif case == "conv":
            layer, x = Conv2d(2, 3, 3, rng=rng), rng.standard_normal((2, 2, 4, 4))
        elif case == "relu":
            layer, x = ReLU(), rng.standard_normal((2, 3, 4, 4)) + 0.05
        elif case == "pool":
            layer, x = MaxPool2d(2), rng.standard_normal((2, 2, 4, 4))
        elif case == "softmax":
            layer, x = Softmax(axis=1), rng.standard_normal((3, 5))
        else:
            layer, x = Flatten(), rng.standard_normal((2, 2, 3, 3))
        proj = rng.standard_normal(layer.forward(x).shape)

        def f():
            return float((layer.forward(x) * proj).sum())

        f()
        din = layer.backward(proj)
        assert_grad_close(f, x, din, tol=1e-4)


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    net = Sequential([Conv2d(3, 4, 3, rng=rng), ReLU(), MaxPool2d(2)])
    x = rng.standard_normal((1, 3, 6, 6))
    a = net.forward(x)
    b = net.forward(x)
    assert np.array_equal(a, b)


def test_two_layer_composition_jacobian_vector_product():
    rng = np.random.default_rng(4)
    net = Sequential([Dense(6, 5, rng=rng), ReLU(), Dense(5, 3, rng=rng)])
    x = rng.standard_normal((1, 6))
    u = rng.standard_normal((1, 3))
    v = rng.standard_normal((1, 6))
    net.forward(x)
    vjp = net.backward(u)  # J^T u
    analytic = float((vjp * v).sum())  # u^T J v
    eps = 1e-5
    fp = float((net.forward(x + eps * v) * u).sum())
    fm = float((net.forward(x - eps * v) * u).sum())
    assert abs((fp - fm) / (2 * eps) - analytic) <= 1e-6 * (1 + abs(analytic))


def test_sgd_step_cases():
    p = LayerParams(np.array([1.0]), np.zeros(1), name="w")
    sgd_step([p], lr=0.1, weight_decay=0.0)
    assert p.weights[0] == 1.0  # zero gradient leaves the weight alone

    p = LayerParams(np.array([0.0]), np.zeros(1), name="w")
    p.weight_grad[...] = 2.0
    sgd_step([p], lr=0.5, weight_decay=0.0)
    assert p.weights[0] == -1.0
    assert p.weight_grad[0] == 0.0  # grads zeroed after the step


def test_sgd_weight_decay():
    p = LayerParams(np.array([2.0]), np.zeros(1), name="w")
    sgd_step([p], lr=0.1, weight_decay=0.5)
    assert np.isclose(p.weights[0], 2.0 - 0.1 * (0.5 * 2.0))


def test_sgd_nonfinite_gradient_raises():
    p = LayerParams(np.array([1.0]), np.zeros(1), name="conv9")
    p.weight_grad[...] = np.nan
    with pytest.raises(TrainingError, match="conv9"):
        sgd_step([p], lr=0.1)


def test_step_decay_schedule():
    sched = StepDecay(1e-7, factor=0.4, every=5)
    assert sched(0) == 1e-7
    assert sched(4) == 1e-7
    assert np.isclose(sched(5), 0.4e-7)
    assert np.isclose(sched(10), 0.16e-7)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        Dense(4, 2).forward(np.zeros((1, 5)))


def test_backward_before_forward():
    with pytest.raises(UsageError):
        Dense(3, 2).backward(np.zeros((1, 2)))
    with pytest.raises(UsageError):
        Conv2d(1, 1, 3).backward(np.zeros((1, 1, 2, 2)))


def test_feature_map_invariants():
    fm = FeatureMap(np.zeros((1, 2, 3, 4)))
    assert fm.grad.shape == fm.data.shape
    with pytest.raises(ShapeError):
        FeatureMap(np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        FeatureMap(np.full((1, 1, 1, 1), np.inf))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "conv.weights": rng.standard_normal((4, 3, 3, 3)),
        "conv.bias": rng.standard_normal(4),
        "scalar": np.array(3.25),
    }
    path = tmp_path / "params.bin"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], tensors[name])


def test_checkpoint_manifest_is_text(tmp_path):
    path = tmp_path / "params.bin"
    save_checkpoint(path, {"w": np.arange(3.0)})
    head = path.read_bytes().split(b"\n")[:2]
    assert head[0] == b"tensors 1"
    assert head[1] == b"w 3"


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "params.bin"
    save_checkpoint(path, {"w": np.arange(4.0)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "params.bin"
    path.write_bytes(b"bogus\n")
    with pytest.raises(ParseError):
        load_checkpoint(path)
