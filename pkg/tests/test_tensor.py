import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveglow import tensor as T
from waveglow.errors import DegenerateDirectionError, DomainError, ShapeError, SingularMatrixError


def f64(a, grad=True):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def brute_conv1d(x, w, b, dilation, padding):
    B, cin, n = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    n_out = n + 2 * padding - dilation * (k - 1)
    out = np.zeros((B, cout, n_out))
    for bi in range(B):
        for o in range(cout):
            for t in range(n_out):
                s = b[o] if b is not None else 0.0
                for c in range(cin):
                    for j in range(k):
                        s += w[o, c, j] * xp[bi, c, t + j * dilation]
                out[bi, o, t] = s
    return out


def test_default_dtype_is_float32():
    assert T.Tensor([1.0, 2.0]).dtype == np.float32
    assert T.Tensor([1.0], dtype=np.float64).dtype == np.float64


def test_conv1d_identity_kernel():
    x = T.Tensor(np.arange(5.0).reshape(1, 1, 5))
    y = T.conv1d(x, T.Tensor(np.ones((1, 1, 1))), T.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv1d_hand_example():
    x = T.Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    y = T.conv1d(x, T.Tensor(np.ones((1, 1, 3))), T.Tensor(np.zeros(1)), dilation=1, padding=1)
    np.testing.assert_array_equal(y.data.reshape(-1), [3.0, 6.0, 5.0])


def test_conv1d_dilated_length():
    x = T.Tensor(np.ones((1, 1, 5)))
    y = T.conv1d(x, T.Tensor(np.ones((1, 1, 3))), dilation=2, padding=2)
    assert y.shape == (1, 1, 5)


@pytest.mark.parametrize("dilation,padding,k", [(1, 0, 1), (1, 1, 3), (2, 2, 3), (4, 4, 3), (3, 0, 2)])
def test_conv1d_matches_brute_force(dilation, padding, k):
    rng = np.random.default_rng(dilation * 10 + k)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, k))
    b = rng.normal(size=4)
    y = T.conv1d(f64(x), f64(w), f64(b), dilation=dilation, padding=padding)
    np.testing.assert_allclose(y.data, brute_conv1d(x, w, b, dilation, padding), atol=1e-12)


def test_conv1d_shape_errors():
    x = T.Tensor(np.ones((1, 2, 5)))
    with pytest.raises(ShapeError, match="channels"):
        T.conv1d(x, T.Tensor(np.ones((1, 3, 1))))
    with pytest.raises(ShapeError):
        T.conv1d(x, T.Tensor(np.ones((1, 2, 9))))


def test_conv_transpose_matches_scatter():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(3, 2, 7))
    b = rng.normal(size=2)
    stride = 3
    ref = np.zeros((2, 2, (4 - 1) * stride + 7))
    for bi in range(2):
        for c in range(3):
            for f in range(4):
                ref[bi, :, f * stride:f * stride + 7] += x[bi, c, f] * w[c]
    ref += b[None, :, None]
    y = T.conv_transpose1d(f64(x), f64(w), f64(b), stride=stride)
    np.testing.assert_allclose(y.data, ref, atol=1e-12)


def test_elementwise_basics():
    assert T.exp(T.Tensor([0.0])).item() == 1.0
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(a)).data, a)
    with pytest.raises(DomainError):
        T.log(T.Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(T.Tensor([-1.0]))


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))


def test_split_concat_midpoint():
    x = T.Tensor(np.random.default_rng(0).normal(size=(2, 8, 5)))
    a, b = T.split_channels(x, 4)
    assert a.shape == b.shape == (2, 4, 5)
    np.testing.assert_array_equal(T.concat_channels([a, b]).data, x.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.data())
def test_split_concat_any_partition(c, data):
    x = T.Tensor(np.arange(2 * c * 3, dtype=np.float64).reshape(2, c, 3))
    k = data.draw(st.integers(0, c))
    a, b = T.split_channels(x, k)
    assert a.shape[1] == k and b.shape[1] == c - k
    np.testing.assert_array_equal(T.concat_channels([a, b]).data, x.data)


def test_backward_sum_is_ones():
    x = f64(np.random.default_rng(0).normal(size=(2, 3, 4)))
    T.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = f64([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_exp_at_zero():
    x = f64(np.zeros(4))
    T.exp(x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_accumulates_across_calls():
    x = f64([1.0, -2.0])
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])


def test_shared_subexpression_accumulates():
    # y = x*x used twice equals the duplicated construction 2*x*x
    x = f64([0.5, 1.5, -1.0])
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_rejects_nonscalar():
    x = f64([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.exp(x).backward()


def test_no_grad_records_nothing():
    x = f64([1.0, 2.0])
    with T.no_grad():
        y = T.exp(x)
    assert not y._parents
    assert T.is_grad_enabled()


def test_gradcheck_square():
    x = f64(np.random.default_rng(2).normal(size=7))
    assert T.gradcheck(lambda a: (a * a).sum(), [x], eps=1e-5) < 1e-9


def test_gradcheck_conv_then_sum():
    rng = np.random.default_rng(3)
    x, w, b = f64(rng.normal(size=(2, 3, 9))), f64(rng.normal(size=(2, 3, 3))), f64(rng.normal(size=2))
    err = T.gradcheck(lambda *_: T.conv1d(x, w, b, dilation=2, padding=2).sum(), [x, w, b])
    assert err < 1e-6


def test_gradcheck_catches_wrong_backward():
    x = f64(np.random.default_rng(4).normal(size=5))

    def broken(a):
        return T._make(a.data ** 3, (a,), lambda g: (g * 2 * a.data ** 2,))

    assert T.gradcheck(lambda a: broken(a).sum(), [x]) > 0.1


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        T.gradcheck(lambda a: a.sum(), [T.Tensor([1.0], requires_grad=True)])


# every registered op, small random float64 inputs, tanh/sigmoid confined to [-3, 3]
def _ops(rng):
    a = rng.uniform(-3, 3, size=(2, 4, 5))
    b = rng.uniform(-3, 3, size=(2, 4, 5))
    pos = rng.uniform(0.5, 2.0, size=(2, 4, 5))
    w = rng.normal(size=(3, 4, 3))
    m1, m2 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    mat = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    wt = rng.normal(size=(4, 2, 5))
    g = rng.uniform(0.5, 2.0, size=3)
    return {
        "add": ([a, b], lambda x, y: T.add(x, y)),
        "sub": ([a, b], lambda x, y: T.sub(x, y)),
        "mul": ([a, b], lambda x, y: T.mul(x, y)),
        "neg": ([a], lambda x: T.neg(x)),
        "exp": ([a], lambda x: T.exp(x)),
        "log": ([pos], lambda x: T.log(x)),
        "tanh": ([a], lambda x: T.tanh(x)),
        "sigmoid": ([a], lambda x: T.sigmoid(x)),
        "reshape": ([a], lambda x: T.reshape(x, (4, 10))),
        "transpose": ([a], lambda x: T.transpose(x, (2, 0, 1))),
        "narrow": ([a], lambda x: T.narrow(x, 2, 1, 3)),
        "split": ([a], lambda x: T.split_channels(x, 1)[1]),
        "concat": ([a, b], lambda x, y: T.concat_channels([x, y])),
        "matmul": ([m1, m2], lambda x, y: T.matmul(x, y)),
        "logabsdet": ([mat], lambda x: T.logabsdet(x)),
        "weight_norm": ([w, g], lambda v, gg: T.weight_norm(v, gg)),
        "conv1d": ([a, w, rng.normal(size=3)], lambda x, k, bb: T.conv1d(x, k, bb, dilation=2, padding=2)),
        "conv_transpose1d": ([a, wt, rng.normal(size=2)], lambda x, k, bb: T.conv_transpose1d(x, k, bb, stride=2)),
    }


OPS = ["add", "sub", "mul", "neg", "exp", "log", "tanh", "sigmoid", "reshape", "transpose", "narrow",
       "split", "concat", "matmul", "logabsdet", "weight_norm", "conv1d", "conv_transpose1d"]


@pytest.mark.parametrize("op", OPS)
def test_every_op_passes_gradcheck(op):
    rng = np.random.default_rng(OPS.index(op))
    arrays, fn = _ops(rng)[op]
    inputs = [f64(x) for x in arrays]

    def loss(*xs):
        out = fn(*xs)
        # random projection so every output coordinate matters
        proj = np.random.default_rng(7).normal(size=out.shape)
        return T.mul(out, T.Tensor(proj)).sum()

    assert T.gradcheck(loss, inputs, eps=1e-5) < 1e-6


def test_logabsdet_diagonal_and_singular():
    assert np.isclose(T.logabsdet(f64(np.diag([2.0, 3.0]))).item(), np.log(6.0))
    with pytest.raises(SingularMatrixError):
        T.logabsdet(f64([[1.0, 2.0], [2.0, 4.0]]))


def test_weight_norm_degenerate_direction():
    v = np.ones((2, 3, 1))
    v[1] = 0.0
    with pytest.raises(DegenerateDirectionError):
        T.weight_norm(f64(v), f64([1.0, 1.0]))
