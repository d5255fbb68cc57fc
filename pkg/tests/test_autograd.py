import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from perceiver_prompt import autograd as ag
from perceiver_prompt.autograd import Tensor

SEEDS = range(20)


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def weighted(out, rng):
    """Random projection to a scalar, so every output element gets a distinct upstream gradient."""
    w = rng.standard_normal(out.shape)
    return ag.sum_(out * w)


UNARY = {
    "exp": (ag.exp, False),
    "log": (ag.log, True),
    "tanh": (ag.tanh, False),
    "relu": (ag.relu, False),
    "gelu": (ag.gelu, False),
    "softmax": (lambda x: ag.softmax(x, axis=-1), False),
    "log_softmax": (lambda x: ag.log_softmax(x, axis=-1), False),
    "layer_norm": (ag.layer_norm, False),
    "sum_axis": (lambda x: ag.sum_(x, axis=0), False),
    "mean_axis": (lambda x: ag.mean(x, axis=1, keepdims=True), False),
    "reshape": (lambda x: ag.reshape(x, (-1,)), False),
    "transpose": (lambda x: ag.transpose(x), False),
    "slice": (lambda x: x[1:, ::2], False),
    "fancy_index": (lambda x: x[np.array([0, 2, 0])], False),
    "scale": (lambda x: ag.scale(x, -2.5), False),
    "neg": (lambda x: -x, False),
    "mse": (lambda x: ag.mse(x, np.linspace(-1, 1, x.size).reshape(x.shape)), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradients(name, seed):
    fn, positive = UNARY[name]
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        x = leaf(rng, 3, 4, positive=positive)
        if name == "relu":  # keep clear of the kink
            x.data[np.abs(x.data) < 1e-2] = 0.5
        w = rng.standard_normal(fn(x).shape)
        ag.gradcheck(lambda: ag.sum_(fn(x) * w), [x])


BINARY = {
    "add_broadcast": (lambda a, b: a + b, (3, 4), (4,)),
    "sub": (lambda a, b: a - b, (3, 4), (3, 1)),
    "mul_broadcast": (lambda a, b: a * b, (2, 3, 4), (3, 4)),
    "div": (lambda a, b: a / b, (3, 4), (3, 4)),
    "matmul": (ag.matmul, (3, 5), (5, 2)),
    "batched_matmul": (ag.matmul, (2, 3, 5), (2, 5, 4)),
    "linear": (ag.linear, (2, 3, 5), (4, 5)),
    "concat": (lambda a, b: ag.concat([a, b], axis=0), (2, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        a = leaf(rng, *sa)
        b = leaf(rng, *sb, positive=name == "div")
        w = rng.standard_normal(fn(a, b).shape)
        ag.gradcheck(lambda: ag.sum_(fn(a, b) * w), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_bias_and_layer_norm_affine(seed):
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        x, w, b = leaf(rng, 2, 3, 5), leaf(rng, 4, 5), leaf(rng, 4)
        g, beta = leaf(rng, 4), leaf(rng, 4)
        ag.gradcheck(lambda: weighted_fixed(ag.layer_norm(ag.linear(x, w, b), g, beta)), [x, w, b, g, beta])


def weighted_fixed(out):
    w = np.cos(np.arange(out.size)).reshape(out.shape)
    return ag.sum_(out * w)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv1d_gradients(seed, stride):
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        x, w, b = leaf(rng, 2, 7, 3), leaf(rng, 4, 3, 3), leaf(rng, 4)
        ag.gradcheck(lambda: weighted_fixed(ag.conv1d(x, w, b, stride=stride, padding=1)), [x, w, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_and_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        table = leaf(rng, 7, 4)
        proj = leaf(rng, 5, 4)
        ids = rng.integers(0, 7, (2, 3))
        targets = rng.integers(0, 5, (2, 3))
        targets[0, -1] = 0  # exercise ignore_index
        ag.gradcheck(lambda: ag.cross_entropy(ag.linear(ag.embedding(table, ids), proj), targets, ignore_index=0),
                     [table, proj])


@pytest.mark.parametrize("seed", SEEDS)
def test_pad_stack_gradient(seed):
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
        ag.gradcheck(lambda: weighted_fixed(ag.pad_stack([a, b])), [a, b])


def test_pad_stack_zero_fills():
    out = ag.pad_stack([Tensor(np.ones((1, 2))), Tensor(np.ones((3, 2)))])
    assert out.shape == (2, 3, 2)
    assert np.all(out.data[0, 1:] == 0)


def test_softmax_rows_sum_to_one_and_survive_large_inputs():
    x = Tensor(np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]]))
    p = ag.softmax(x).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-6)


def test_softmax_empty_axis_raises():
    with pytest.raises(ag.ShapeError):
        ag.softmax(Tensor(np.zeros((2, 0))))


def test_cross_entropy_uniform_logits_is_log_k():
    # four equal logits: -log(1/4) = ln 4
    loss = ag.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(1.3862944, rel=1e-6)


def test_concat_mismatch_is_shape_error():
    with pytest.raises(ag.ShapeError):
        ag.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


def test_matmul_mismatch_is_shape_error():
    with pytest.raises(ag.ShapeError):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ag.embedding(Tensor(np.zeros((3, 2))), np.array([3]))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ag.ShapeError):
        ag.backward(x * 2.0)


def test_backward_rejects_nan_loss():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with np.errstate(invalid="ignore"), pytest.raises(ag.NonFiniteError):
        ag.backward(ag.sum_(ag.log(x)))


def test_gradients_accumulate_and_unused_params_get_zeros():
    x = Tensor(np.array([2.0]), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    ag.backward(ag.sum_(x * x), [x, unused])
    ag.backward(ag.sum_(x * x), [x, unused])
    assert x.grad[0] == pytest.approx(8.0)
    assert np.all(unused.grad == 0)


def test_shared_subexpression_gets_both_paths():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    ag.backward(ag.sum_(y + y))  # d/dx 2x^2 = 4x
    assert x.grad[0] == pytest.approx(12.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = ag.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_frozen_inputs_receive_no_gradient():
    w = Tensor(np.ones((2, 3)), requires_grad=False)
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    ag.backward(ag.sum_(ag.linear(x, w)))
    assert w.grad is None
    np.testing.assert_allclose(x.grad, 2.0)


def test_default_dtype_is_float32_and_scoped():
    assert Tensor([1.0]).data.dtype == np.float32
    with ag.default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    ag.backward(ag.sum_(y))
    assert x.grad[0] == 1.0


def test_tape_is_topologically_ordered():
    a = Tensor(np.ones(2), requires_grad=True)
    b = ag.exp(a)
    c = b * a
    tape = ag.ComputationTape.from_root(ag.sum_(c))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_gradcheck_catches_a_wrong_backward():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)

    def bad():
        out = ag.exp(x)
        out._backward = lambda g: (g * 2.0,)
        return ag.sum_(out)

    with ag.default_dtype(np.float64), pytest.raises(AssertionError):
        ag.gradcheck(bad, [x])


def test_sampled_gradcheck_agrees_and_still_catches_errors(rng):
    with ag.default_dtype(np.float64):
        x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
        w = rng.standard_normal((6, 5))
        assert ag.gradcheck(lambda: ag.sum_(ag.tanh(x) * w), [x], max_entries=4) < 1e-6

        def bad():
            out = ag.tanh(x)
            out._backward = lambda g: (g * 3.0,)
            return ag.sum_(out * w)

        with pytest.raises(AssertionError):
            ag.gradcheck(bad, [x], max_entries=4)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31 - 1))
def test_unbroadcast_inverts_broadcast(shape, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    small = tuple(1 if rng.random() < 0.5 else s for s in shape)[rng.integers(0, len(shape) + 1):]
    g = rng.standard_normal((2,) + shape)
    red = ag._unbroadcast(g, small)
    assert red.shape == small
    assert red.sum() == pytest.approx(g.sum())


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_add_is_commutative_in_value_and_gradient(m, n, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((m, n)), requires_grad=True)
    b = Tensor(rng.standard_normal((n,)), requires_grad=True)
    np.testing.assert_array_equal((a + b).data, (b + a).data)
    ag.backward(ag.sum_(a + b))
    np.testing.assert_allclose(b.grad, m)
