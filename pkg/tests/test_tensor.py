import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsar import tensor as T
from ctsar.gradcheck import check_gradients
from ctsar.tensor import AutogradError, NonFiniteError, ShapeError, Tensor, backward


def f64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# --- forward examples -----------------------------------------------------
def test_add_and_relu_examples():
    np.testing.assert_array_equal(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_mul_matches_element_loop(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    expected = np.empty((2, 3))
    for i in range(2):
        for j in range(3):
            expected[i, j] = a[i, j] * b[i, j]
    np.testing.assert_array_equal(T.mul(f64(a), f64(b)).data, expected)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_matmul_examples():
    x = Tensor(np.arange(6).reshape(2, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), x).data, x.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]])).data, [[17], [39]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(f64(a), f64(b)).data, expected, rtol=1e-6)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError, match="inner"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax(f64(x)).data, direct, rtol=1e-12)


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError, match="axis"):
        T.softmax(Tensor(np.ones((2, 3))), axis=2)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 4))
def test_softmax_slices_positive_and_normalised(vals, rows):
    x = np.tile(np.array(vals), (rows, 1))
    out = T.softmax(f64(x, grad=False), axis=1).data
    assert np.all(out > 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


# --- broadcasting ---------------------------------------------------------
shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4)


@st.composite
def broadcast_pairs(draw):
    a = draw(shapes)
    b = list(a[len(a) - draw(st.integers(1, len(a))):])
    b = [1 if draw(st.booleans()) else n for n in b]
    if draw(st.booleans()):
        a, b = b, a
    return tuple(a), tuple(b)


def _tile_to(x, shape):
    """Explicit tiling oracle for broadcasting."""
    x = x.reshape((1,) * (len(shape) - x.ndim) + x.shape)
    return np.tile(x, [s // n for s, n in zip(shape, x.shape)])


@settings(max_examples=60, deadline=None)
@given(broadcast_pairs(), st.integers(0, 2**16))
def test_broadcast_add_mul_match_tiling(pair, seed):
    sa, sb = pair
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(sa), r.standard_normal(sb)
    out_shape = tuple(max(x, y) for x, y in zip((1,) * (4 - len(sa)) + sa, (1,) * (4 - len(sb)) + sb))
    out_shape = out_shape[4 - max(len(sa), len(sb)):]
    ta, tb = _tile_to(a, out_shape), _tile_to(b, out_shape)
    np.testing.assert_array_equal(T.add(f64(a), f64(b)).data, ta + tb)
    np.testing.assert_array_equal(T.mul(f64(a), f64(b)).data, ta * tb)
    # d sum(a*b)/da accumulates b over every output cell that reads a given a cell
    A, B = f64(a), f64(b)
    backward(T.sum(T.mul(A, B)))
    ga = np.zeros_like(a)
    pad = (1,) * (len(out_shape) - a.ndim) + a.shape
    for idx in np.ndindex(*out_shape):
        src = tuple(i % n for i, n in zip(idx, pad))[len(out_shape) - a.ndim:]
        ga[src] += tb[idx]
    np.testing.assert_allclose(A.grad, ga, rtol=1e-10, atol=1e-12)
    assert B.grad.shape == b.shape


# --- backward -------------------------------------------------------------
def test_backward_examples():
    x = f64([1.0, 2.0, 3.0])
    backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = f64([1.0, 2.0])
    backward(T.sum(T.mul(y, y)))
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_errors():
    with pytest.raises(AutogradError, match="scalar"):
        backward(T.mul(f64([1.0, 2.0]), 2.0))
    with pytest.raises(AutogradError, match="detached"):
        backward(T.sum(Tensor([1.0, 2.0])))


def test_unreachable_leaf_gets_zero():
    x, unused = f64([1.0, 2.0]), f64(np.ones((2, 2)))
    grads = backward(T.sum(x), [x, unused])
    np.testing.assert_array_equal(grads[id(unused)], np.zeros((2, 2)))


def test_backward_is_linear(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

    def losses(A, B):
        prod = T.matmul(A, B)
        return T.sum(T.relu(prod)), T.sum(T.mul(prod, prod))

    A1, B1 = f64(a), f64(b)
    l1, l2 = losses(A1, B1)
    backward(T.add(l1, l2))
    A2, B2 = f64(a), f64(b)
    l1, _ = losses(A2, B2)
    backward(l1)
    A3, B3 = f64(a), f64(b)
    _, l2 = losses(A3, B3)
    backward(l2)
    np.testing.assert_allclose(A1.grad, A2.grad + A3.grad, rtol=1e-12)
    np.testing.assert_allclose(B1.grad, B2.grad + B3.grad, rtol=1e-12)


def test_shared_subexpression_accumulates():
    x = f64([3.0])
    y = T.mul(x, x)
    backward(T.add(y, y))  # 2 x^2 -> 4x
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = f64([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._node is None


def test_tape_is_topological():
    x = f64([1.0, 2.0])
    y = T.relu(T.mul(x, 2.0))
    z = T.sum(T.add(y, x))
    order = T.build_tape(z)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad:
                    assert pos[id(inp)] < pos[id(t)]
    assert len(order) == len({id(t) for t in order})


def test_finite_check_raises():
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


OPS = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 1.0)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "relu": lambda a, b: T.relu(T.add(a, b)),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(T.add(T.mul(a, a), 0.5)),
    "softmax": lambda a, b: T.softmax(a, axis=1),
    "log_softmax": lambda a, b: T.log_softmax(b, axis=0),
    "mean": lambda a, b: T.mean(T.mul(a, b), axis=1, keepdims=True),
    "reshape-transpose": lambda a, b: T.transpose(T.reshape(a, (4, 3)), (1, 0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    r = np.random.default_rng(7)
    a, b = f64(r.standard_normal((3, 4))), f64(r.standard_normal((3, 4)))
    out_shape = OPS[name](a, b).shape
    proj = Tensor(r.standard_normal(out_shape), dtype=np.float64)
    err = check_gradients(lambda x, y: T.sum(T.mul(OPS[name](x, y), proj)), [a, b])
    assert err <= 1e-5
