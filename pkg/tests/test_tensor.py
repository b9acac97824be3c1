import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from momentum_tft import tensor as tc
from momentum_tft.tensor import Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


# forward examples

def test_tanh_zero():
    assert tc.forward_primitive("tanh", [Tensor([0.0])]).data.tolist() == [0.0]


def test_uniform_softmax():
    out = tc.forward_primitive("softmax_lastdim", [Tensor([1.0, 1.0, 1.0, 1.0])])
    np.testing.assert_array_equal(out.data, [0.25] * 4)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    out = tc.forward_primitive("matmul", [Tensor(np.eye(3)), Tensor(a)])
    np.testing.assert_array_equal(out.data, a)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(tc.DimensionError) as info:
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.op_kind == "matmul"
    assert "(2, 3)" in str(info.value)
    with pytest.raises(tc.DimensionError, match="add"):
        tc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_unknown_op_kind():
    with pytest.raises(tc.ContractError):
        tc.forward_primitive("conv2d", [Tensor([1.0])])


def test_values_are_flat_row_major():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.values.tolist() == [0, 1, 2, 3, 4, 5]
    assert np.prod(t.shape) == len(t.values)


# backward examples

def test_sum_of_squares_grad():
    x = leaf([1.0, 2.0, 3.0])
    tc.backward(tc.sum_(x * x))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_sigmoid_grad_at_zero():
    x = leaf(0.0)
    tc.backward(tc.sigmoid(x))
    assert x.grad == 0.25


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(tc.ContractError):
        tc.backward(x * 2.0)
    tc.active_tape().clear()


def test_backward_consumes_tape():
    x = leaf([1.0, 2.0])
    loss = tc.sum_(tc.tanh(x))
    assert len(tc.active_tape()) > 0
    tc.backward(loss)
    assert len(tc.active_tape()) == 0


def test_grad_shape_matches_values():
    w = leaf(np.ones((3, 2)))
    tc.backward(tc.sum_(tc.matmul(Tensor(np.ones((4, 3))), w)))
    assert w.grad.shape == w.shape


def test_constant_loss_gives_zero_grads():
    x = leaf(np.ones(4))
    loss = tc.add(tc.mul(tc.sum_(x), 0.0), 3.0)
    tc.backward(loss)
    assert np.all(x.grad == 0.0)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with tc.no_grad():
        y = tc.tanh(x)
    assert not y.requires_grad
    assert len(tc.active_tape()) == 0


def test_shared_subexpression_accumulates():
    x = leaf([0.3, -0.7])
    y = tc.tanh(x)
    tc.backward(tc.sum_(y * y + y))
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (2 * t + 1) * (1 - t * t), rtol=1e-14)


# finite-difference oracles

def test_random_five_leaf_graph():
    rng = np.random.default_rng(3)
    a, b, c = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    d, e = leaf(rng.normal(size=(3, 5))), leaf(rng.uniform(0.5, 1.5, size=(3, 1)))

    def build():
        h = tc.add(tc.matmul(a, b), c)
        g = tc.mul(tc.sigmoid(h), tc.tanh(d))
        n = tc.layer_norm(tc.concat([g, tc.elu(h)], axis=-1))
        s = tc.softmax(tc.div(n, e))
        parts = tc.split(s, 2, axis=-1)
        return tc.sum_(tc.mul(tc.sub(parts[0], parts[1]), tc.slice_(h, (slice(None), slice(0, 5)))))

    report = tc.grad_check(build, [a, b, c, d, e], tolerance=1e-6)
    assert report.passed, str(report)


UNARY = ["sigmoid", "tanh", "elu", "softmax_lastdim", "layer_norm_lastdim"]


@pytest.mark.parametrize("op", UNARY)
def test_unary_primitive_grads(op):
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(3, 5))
    if op == "elu":
        # keep clear of the kink at zero
        x0 = np.where(np.abs(x0) < 1e-3, 0.5, x0)
    x = leaf(x0)
    w = Tensor(rng.normal(size=(3, 5)))
    report = tc.grad_check(lambda: tc.sum_(tc.mul(tc.forward_primitive(op, [x]), w)), [x], 1e-6)
    assert report.passed, str(report)


@pytest.mark.parametrize("op", ["add", "sub", "elementwise_mul", "matmul", "concat_lastdim"])
def test_binary_primitive_grads(op):
    rng = np.random.default_rng(12)
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 4)) if op == "matmul" else rng.normal(size=(3, 4)))

    def build():
        if op == "concat_lastdim":
            out = tc.forward_primitive(op, [a, tc.reshape(tc.stack([b, b]), (2, 3, 4))])
        else:
            out = tc.forward_primitive(op, [a, b])
        return tc.sum_(tc.mul(out, out))

    report = tc.grad_check(build, [a, b], 1e-6)
    assert report.passed, str(report)


def test_embedding_and_slice_grads():
    rng = np.random.default_rng(5)
    table = leaf(rng.normal(size=(9, 3)))
    x = leaf(rng.normal(size=(4, 6)))
    idx = np.array([0, 3, 3, 8])

    def build():
        e = tc.forward_primitive("embedding_lookup", [table, idx])
        s = tc.forward_primitive("slice", [x], key=(slice(None), slice(1, 4)))
        return tc.sum_(tc.tanh(tc.mul(e, s)))

    report = tc.grad_check(build, [table, x], 1e-6)
    assert report.passed, str(report)
    rows_used = np.any(table.grad != 0.0, axis=1)
    assert rows_used.tolist() == [i in idx for i in range(9)]


def test_grad_check_reports_wrong_gradient():
    x = leaf([0.4, 0.1])

    def broken():
        # forward value of x^2 but backward rule of x
        return tc.sum_(tc._emit(x.data ** 2, (x,), lambda g: (g * x.data,)))

    report = tc.grad_check(broken, [x], 1e-6)
    assert not report.passed
    assert report.worst_leaf == 0


def test_five_point_stencil():
    x = leaf([0.3, -1.2, 2.0])
    report = tc.grad_check(lambda: tc.sum_(tc.tanh(tc.mul(x, x))), [x], 1e-9, h=1e-3, order=4)
    assert report.passed, str(report)
    with pytest.raises(tc.ContractError):
        tc.grad_check(lambda: tc.sum_(x), [x], 1e-6, order=3)


# dropout

def test_dropout_identity_in_eval():
    x = Tensor(np.ones(100))
    out = tc.dropout(x, 0.5, np.random.default_rng(0), train=False)
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_seeded_and_scaled():
    x = Tensor(np.ones(1000))
    a = tc.dropout(x, 0.25, np.random.default_rng(4), train=True).data
    b = tc.dropout(x, 0.25, np.random.default_rng(4), train=True).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}


# properties

finite = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
                elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite)
def test_softmax_rows_are_distributions(x):
    out = tc.softmax(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_layer_norm_moments(x):
    # rows must actually vary for the unit-variance property to apply
    x = x + np.arange(x.shape[-1]) * 0.5
    out = tc.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    var = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), var / (var + tc.LAYER_NORM_EPS), atol=1e-8)


def test_layer_norm_unit_variance_for_ordinary_rows():
    x = np.random.default_rng(2).normal(0, 3, size=(5, 32))
    out = tc.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)


def test_forward_is_bitwise_reproducible():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(16, 32)), rng.normal(size=(32, 8))
    runs = [tc.layer_norm(tc.softmax(tc.matmul(Tensor(a), Tensor(b)))).data for _ in range(3)]
    assert all(np.array_equal(runs[0], r) for r in runs[1:])


def test_slices_copy():
    x = Tensor(np.arange(5.0))
    s = x[1:3]
    s.data[0] = 100.0
    assert x.data[1] == 1.0
