import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from esegeta import tensor as T
from esegeta.models import ModelConfig, build_model
from esegeta.tensor import GradientError, ShapeError, Tensor
from esegeta.wrappers import PixelwiseWrapper

from conftest import conv_relu_net, linear_model

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def fd_check(fn, x, eps=1e-3):
    """Scalarize fn(x) with a fixed random projection and grad-check it."""
    probe = fn(Tensor(x, dtype=F64))
    proj = np.random.default_rng(1).normal(size=probe.shape)
    return T.grad_check(lambda t: T.tsum(T.mul(fn(t), Tensor(proj, dtype=F64))), Tensor(x, dtype=F64), eps)


# --- storage -------------------------------------------------------------


def test_default_storage_is_float32():
    assert Tensor(np.ones(3)).dtype == np.float32
    assert Tensor(np.ones(3), dtype=F64).dtype == F64


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_leaf_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        Tensor(np.array([1.0, bad]))


def test_ops_compute_in_float64_and_round():
    a = Tensor(np.array([1e8], dtype=np.float32))
    out = T.add(a, 1.0)
    assert out.dtype == np.float32
    assert out.data[0] == np.float32(1e8 + 1.0)


# --- forward examples ----------------------------------------------------


def test_conv2d_all_ones():
    out = T.forward_op("conv2d", [Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2)))])
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


def test_upsample_nearest_blocks():
    a = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    out = T.upsample(Tensor(a), 2, "nearest").data[0, 0]
    np.testing.assert_array_equal(out, np.kron(a[0, 0], np.ones((2, 2))))


def test_conv_shape_errors_name_op_and_dims():
    with pytest.raises(ShapeError, match=r"conv2d.*channels 2 != kernel in-channels 1"):
        T.conv(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ShapeError, match="concat"):
        T.concat([Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2)))])


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((1, 3))), Tensor(np.ones((3,))))


def test_maxpool_first_max_on_ties():
    x = t64(np.ones((1, 1, 2, 2)))
    (g,) = T.grad(T.tsum(T.maxpool(x, 2)), [x])
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


@given(arrays(F64, (1, 2, 4, 4), elements=st.floats(-10, 10)))
def test_forward_deterministic(a):
    w = np.random.default_rng(0).normal(size=(3, 2, 3, 3))
    o1 = T.conv(Tensor(a), Tensor(w), padding=1).data
    o2 = T.conv(Tensor(a), Tensor(w), padding=1).data
    assert o1.tobytes() == o2.tobytes()


@given(st.integers(1, 9), st.integers(1, 20), st.sampled_from(["nearest", "linear"]))
def test_interp_rows_are_stochastic(n_in, n_out, mode):
    m = T._interp_matrix(n_in, n_out, mode)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert (m >= 0).all()


# --- backward ------------------------------------------------------------


def test_linear_gradient_is_w():
    m = linear_model()
    for x in (np.zeros(3), np.array([0.5, -1.0, 2.0])):
        xt = t64(x[None, None])
        (g,) = T.grad(T.tsum(m(xt)), [xt])
        np.testing.assert_array_equal(g.ravel(), [1, 2, 3])


def test_backward_fills_leaf_grads():
    x = t64(np.array([[1.0, -2.0]]))
    w = t64(np.array([[3.0, 4.0]]))
    T.backward(T.tsum(T.linear(x, w)))
    np.testing.assert_array_equal(x.grad, [[3, 4]])
    np.testing.assert_array_equal(w.grad, [[1, -2]])


def test_backward_errors():
    with pytest.raises(GradientError, match="detached"):
        T.grad(T.tsum(Tensor(np.ones(3))), [])
    x = t64(np.ones((1, 3)))
    with pytest.raises(GradientError, match="seed"):
        T.grad(T.mul(x, 2.0), [x])
    (g,) = T.grad(T.mul(x, 2.0), [x], seed=np.ones((1, 3)))
    np.testing.assert_array_equal(g, 2 * np.ones((1, 3)))


def test_graph_node_visited_once():
    # diamond: y = a*a with a shared; gradient 2a requires both paths accumulated exactly once
    x = t64(np.array([3.0]))
    a = T.mul(x, 1.0)
    (g,) = T.grad(T.tsum(T.mul(a, a)), [x])
    assert g[0] == 6.0


def _positive_net():
    rng = np.random.default_rng(0)
    from esegeta.models import Sequential

    return Sequential.from_arrays(
        [
            ("c1", "conv", {"weight": rng.uniform(0.1, 1, (3, 1, 3, 3))}, {"padding": 1}),
            ("a1", "relu"),
            ("c2", "conv", {"weight": rng.uniform(0.1, 1, (2, 3, 1, 1))}),
        ],
        dtype=F64,
    )


def test_guided_equals_standard_without_negative_signals():
    m = _positive_net()
    x = t64(np.random.default_rng(1).uniform(0.1, 1, (1, 1, 5, 5)))
    s = T.tsum(m(x))
    (g_std,) = T.grad(s, [x])
    (g_gui,) = T.grad(s, [x], policy="guided")
    np.testing.assert_array_equal(g_std, g_gui)


def test_policy_semantics_on_single_relu():
    x = t64(np.array([-1.0, 2.0, 3.0, -4.0]))
    y = T.relu(x)
    seed = np.array([1.0, -1.0, 1.0, -1.0])
    std, = T.grad(y, [x], seed=seed)
    gui, = T.grad(y, [x], seed=seed, policy="guided")
    dec, = T.grad(y, [x], seed=seed, policy="deconv")
    np.testing.assert_array_equal(std, [0, -1, 1, 0])
    np.testing.assert_array_equal(gui, [0, 0, 1, 0])
    np.testing.assert_array_equal(dec, [1, 0, 1, 0])


def test_deconv_signal_nonnegative_after_relu():
    m = conv_relu_net(seed=3)
    x = t64(np.random.default_rng(3).normal(size=(1, 1, 6, 6)))
    out = m(x)
    seen = []

    def rule(node, g):
        r = np.maximum(g, 0.0)
        seen.append(r.min())
        return r

    T.grad(T.tsum(T.select(out, 1, 0)), [x], relu_rule=rule)
    assert seen and min(seen) >= 0


# --- finite differences per op -------------------------------------------

OPS = {
    "conv1d": (lambda t: T.conv(t, Tensor(np.random.default_rng(2).normal(size=(2, 1, 3)), dtype=F64), padding=1), (1, 1, 6)),
    "conv2d": (lambda t: T.conv(t, Tensor(np.random.default_rng(2).normal(size=(2, 1, 3, 3)), dtype=F64), stride=2, padding=1), (1, 1, 6, 6)),
    "conv3d": (lambda t: T.conv(t, Tensor(np.random.default_rng(2).normal(size=(2, 1, 2, 2, 2)), dtype=F64), stride=2), (1, 1, 4, 4, 4)),
    "linear": (lambda t: T.linear(t, Tensor(np.random.default_rng(2).normal(size=(3, 4)), dtype=F64), Tensor(np.ones(3), dtype=F64)), (2, 4)),
    "maxpool": (lambda t: T.maxpool(t, 2), (1, 2, 4, 4)),
    "upsample-nearest": (lambda t: T.upsample(t, 2, "nearest"), (1, 1, 3, 3)),
    "upsample-linear": (lambda t: T.upsample(t, 2, "linear"), (1, 1, 3, 3)),
    "relu": (T.relu, (1, 8)),
    "leaky-relu": (lambda t: T.leaky_relu(t, 0.01), (1, 8)),
    "sigmoid": (T.sigmoid, (1, 8)),
    "softmax": (lambda t: T.softmax(t, 1), (2, 5)),
    "add": (lambda t: T.add(t, T.mul(t, t)), (1, 6)),
    "mul": (lambda t: T.mul(t, T.sigmoid(t)), (1, 6)),
    "concat": (lambda t: T.concat([t, T.mul(t, t)], axis=1), (1, 2, 3)),
    "sum": (lambda t: T.tsum(T.mul(t, t)), (2, 3)),
    "mean": (lambda t: T.mean(T.mul(t, t)), (2, 3)),
}


@pytest.mark.parametrize("kind", sorted(OPS))
def test_op_gradient_matches_central_differences(kind):
    fn, shape = OPS[kind]
    # distinct values keep max-pool ties and ReLU kinks outside the +-eps probe window
    x = np.random.default_rng(len(kind)).normal(size=shape) + np.arange(np.prod(shape)).reshape(shape) * 1e-2
    x = np.where(np.abs(x) < 0.05, 0.05, x)
    assert fd_check(fn, x) < 1e-3


def test_grad_check_examples():
    m = linear_model()
    x = Tensor(np.array([[[0.3, -0.7, 1.1]]]), dtype=F64)
    assert T.grad_check(lambda t: T.tsum(m(t)), x) < 1e-6
    assert T.grad_check(lambda t: T.tsum(T.mul(t, 0.0)), x) == 0.0


def test_grad_check_two_layer_conv_net():
    m = conv_relu_net(seed=0)
    x = np.random.default_rng(0).normal(size=(1, 1, 6, 6))
    err = T.grad_check(lambda t: T.tsum(T.select(m(t), 1, 1)), Tensor(x, dtype=F64), 1e-3)
    assert err < 1e-3


def test_grad_check_tiny_unet_8x8():
    model = build_model(ModelConfig(dims=2, seed=0)).astype(F64)
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 8))
    bound = PixelwiseWrapper(1).bind(model(Tensor(x, dtype=F64)).data)
    assert T.grad_check(lambda t: bound.score(model(t)), Tensor(x, dtype=F64), 1e-3) < 1e-3


def test_grad_check_report_smooth_part_is_exact():
    model = build_model(ModelConfig(dims=2, seed=0)).astype(F64)
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 8))
    bound = PixelwiseWrapper(1).bind(model(Tensor(x, dtype=F64)).data)
    rep = T.grad_check_report(lambda t: bound.score(model(t)), Tensor(x, dtype=F64), 1e-3)
    assert rep.max_rel_error_smooth < 1e-6
    assert rep.kink_elements < rep.n_elements


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.grad_check(lambda t: T.tsum(t), Tensor(np.ones(2)), 0.0)
