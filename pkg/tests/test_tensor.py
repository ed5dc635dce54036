import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsrdistill import tensor as T
from vsrdistill.gradcheck import grad_check
from vsrdistill.tensor import NonFiniteError, Tensor

F64 = np.float64


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, dtype=F64)


def test_create_inits():
    z = T.create((2, 3))
    assert z.shape == (2, 3) and not z.data.any()
    c = T.create((4,), "constant", value=2.5)
    assert (c.data == 2.5).all()
    u1 = T.create((100,), "uniform", low=-1, high=1, seed=3)
    u2 = T.create((100,), "uniform", low=-1, high=1, seed=3)
    assert np.array_equal(u1.data, u2.data)
    assert u1.data.min() >= -1 and u1.data.max() <= 1
    g = T.create((5000,), "gaussian", mean=1.0, std=0.5, seed=0)
    assert abs(g.data.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        T.create((2,), "uniform")
    with pytest.raises(ValueError):
        T.create((2,), "bogus")
    with pytest.raises(ValueError):
        T.create((-1,))


def test_mul_sum_gradient_matches_hand_value():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=F64)
    y = Tensor([4.0, 5.0, 6.0], requires_grad=True, dtype=F64)
    loss = (x * y).sum()
    assert loss.item() == 32.0
    loss.backward()
    assert np.array_equal(x.grad, [4.0, 5.0, 6.0])
    assert np.array_equal(y.grad, [1.0, 2.0, 3.0])


def test_broadcast_add_gradient_sums_over_broadcast_axes():
    a = Tensor(np.ones((3, 4)), requires_grad=True, dtype=F64)
    b = Tensor(np.ones(4), requires_grad=True, dtype=F64)
    (a + b).sum().backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_max_tie_goes_to_first_index():
    x = Tensor([1.0, 3.0, 3.0, 2.0], requires_grad=True, dtype=F64)
    x.max().backward()
    assert np.array_equal(x.grad, [0, 1, 0, 0])


def test_shape_and_domain_errors():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ZeroDivisionError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(ValueError):
        T.log(Tensor([-1.0]))
    with pytest.raises(ValueError):
        T.elementwise("nope", Tensor([1.0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_reported():
    x = Tensor([1000.0], dtype=F64)
    with pytest.raises(NonFiniteError):
        T.exp(x)


def test_backward_twice_and_empty_tape_errors():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=F64)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()
    with pytest.raises(RuntimeError):
        Tensor([1.0]).backward()
    with pytest.raises(ValueError):
        y = x * 2
        y.backward()
    T.get_tape().clear()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    tape = T.get_tape()
    tape.clear()
    with T.no_grad():
        (x * 2).sum()
    assert len(tape) == 0


UNARY = {
    "exp": T.exp, "sigmoid": T.sigmoid, "relu": T.relu, "swish": T.swish, "tanh": T.tanh,
    "square": T.square, "neg": T.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(0)
    x = t64(rng, 3, 4)
    if name == "relu":
        x.data += np.sign(x.data) * 0.1  # keep away from the kink
    w = rng.normal(size=(3, 4))
    assert grad_check(lambda v: (UNARY[name](v) * w).sum(), x) < 1e-6


def test_log_sqrt_div_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0.5, 2.0, size=(5,)), dtype=F64)
    y = Tensor(rng.uniform(0.5, 2.0, size=(5,)), dtype=F64)
    assert grad_check(lambda v: T.log(v).sum(), x) < 1e-6
    assert grad_check(lambda v: T.sqrt(v).sum(), x) < 1e-6
    assert grad_check(lambda v: (v / y).sum() + (y / v).sum(), x, wrt=[y]) < 1e-6


def test_shape_op_gradients():
    rng = np.random.default_rng(2)
    x = t64(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3, 2))
    assert grad_check(lambda v: (v.transpose(2, 1, 0) * w).sum(), x) < 1e-6
    assert grad_check(lambda v: (v.reshape(4, 3, 2) * w).sum(), x) < 1e-6
    assert grad_check(lambda v: v[:, 1:, ::2].sum() * 3, x) < 1e-6
    idx = np.array([0, 0, 1])
    assert grad_check(lambda v: (v[idx] * v[idx]).sum(), x) < 1e-6
    y = t64(rng, 2, 2, 4)
    assert grad_check(lambda v: T.concat([v, y], axis=1).max(), x, wrt=[y]) < 1e-6
    assert grad_check(lambda v: (T.pad(v, [(1, 0), (0, 2), (1, 1)]) * 2).mean(), x) < 1e-6


def test_reduction_gradients():
    rng = np.random.default_rng(3)
    x = t64(rng, 3, 4, 5)
    w = rng.normal(size=(3, 5))
    assert grad_check(lambda v: (v.sum(axis=1) * w).sum(), x) < 1e-6
    assert grad_check(lambda v: (v.mean(axis=1) * w).sum(), x) < 1e-6
    assert grad_check(lambda v: (v.max(axis=1) * w).sum(), x) < 1e-6
    assert grad_check(lambda v: T.reduce("max", v, (0, 2)).sum(), x) < 1e-6


def test_matmul_and_linear_gradients():
    rng = np.random.default_rng(4)
    a = t64(rng, 2, 3, 4)
    b = t64(rng, 4, 5)
    assert grad_check(lambda v: (v @ b).sum() + (v @ b).max(), a, wrt=[b]) < 1e-6
    w = t64(rng, 4, 6)
    bias = t64(rng, 6)
    assert grad_check(lambda v: T.tanh(T.linear(v, w, bias)).sum(), a, wrt=[w, bias]) < 1e-6


def test_softmax_layernorm_glu_gradients():
    rng = np.random.default_rng(5)
    x = t64(rng, 3, 8)
    w = rng.normal(size=(3, 8))
    assert grad_check(lambda v: (T.softmax(v) * w).sum(), x) < 1e-6
    assert grad_check(lambda v: (T.log_softmax(v) * w).sum(), x) < 1e-6
    g = t64(rng, 8)
    b = t64(rng, 8)
    assert grad_check(lambda v: (T.layernorm(v, g, b) * w).sum(), x, wrt=[g, b]) < 1e-6
    assert grad_check(lambda v: (T.glu(v) * w[:, :4]).sum(), x) < 1e-6


def test_dropout_mask_gradient_and_eval_identity():
    rng = np.random.default_rng(6)
    x = t64(rng, 50, 20)
    y = T.dropout(x, 0.5, np.random.default_rng(0))
    frac = (y.data == 0).mean()
    assert 0.4 < frac < 0.6
    assert T.dropout(x, 0.5, None, training=False) is x
    kept = y.data != 0
    np.testing.assert_allclose(y.data[kept], 2 * x.data[kept])
    T.get_tape().clear()


def _conv_oracle2d(x, w, stride, pad):
    # direct nested-loop cross-correlation
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, w)
    return out


@pytest.mark.parametrize("shape,stride,pad", [((2, 3, 6, 6), 1, 1), ((2, 2, 9, 7), 2, 1), ((1, 2, 30, 30), 1, 1)])
def test_conv2d_matches_direct_loops(shape, stride, pad):
    rng = np.random.default_rng(7)
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, shape[1], 3, 3))
    out = T.conv2d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), None, stride, pad)
    np.testing.assert_allclose(out.data, _conv_oracle2d(x, w, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv3d_matches_per_time_sum_of_conv2d():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 4, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    out = T.conv3d(Tensor(x, dtype=F64), Tensor(w, dtype=F64), None, (1, 2, 2), 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0), (0, 0)))
    for t in range(4):
        ref = sum(_conv_oracle2d(xp[:, :, t + a], w[:, :, a], 2, 1) for a in range(3))
        np.testing.assert_allclose(out[:, :, t], ref, rtol=1e-10, atol=1e-10)


def test_conv_gradients_both_paths():
    rng = np.random.default_rng(9)
    small = t64(rng, 2, 2, 5, 5)
    w = t64(rng, 3, 2, 3, 3)
    b = t64(rng, 3)
    assert grad_check(lambda v: T.tanh(T.conv2d(v, w, b, 1, 1)).sum(), small, wrt=[w, b]) < 1e-6
    big = t64(rng, 1, 2, 34, 34)  # above the dense-matrix size limit
    assert grad_check(lambda v: T.tanh(T.conv2d(v, w, b, 2, 1)).sum(), big, wrt=[w, b], max_coords=40) < 1e-6
    x3 = t64(rng, 1, 2, 3, 6, 6)
    w3 = t64(rng, 2, 2, 3, 3, 3)
    assert grad_check(lambda v: T.tanh(T.conv3d(v, w3, None, (1, 2, 2), 1)).sum(), x3, wrt=[w3]) < 1e-6


def test_depthwise_conv1d_gradient_and_value():
    rng = np.random.default_rng(10)
    x = t64(rng, 2, 3, 9)
    w = t64(rng, 3, 5)
    b = t64(rng, 3)
    out = T.depthwise_conv1d(x, w, b).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (2, 2)))
    ref = np.stack([sum(xp[:, :, t + k] * w.data[:, k] for k in range(5)) for t in range(9)], axis=-1) + b.data[:, None]
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    T.get_tape().clear()
    assert grad_check(lambda v: T.tanh(T.depthwise_conv1d(v, w, b)).sum(), x, wrt=[w, b]) < 1e-6


def test_grad_check_rejects_nondeterministic_function():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones(3), dtype=F64)
    with pytest.raises(RuntimeError):
        grad_check(lambda v: (v * Tensor(rng.normal(size=3), dtype=F64)).sum(), x)


def test_grad_check_detects_a_wrong_gradient():
    def bad_square(a):
        return T._result("bad", a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    x = Tensor(np.array([1.0, 2.0]), dtype=F64)
    assert grad_check(lambda v: bad_square(v).sum(), x) > 0.1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_add_mul_gradients_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a = t64(rng, n, m)
    b = t64(rng, m)
    assert grad_check(lambda v: ((v + b) * v * b).sum(), a, wrt=[b]) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 10 ** 6))
def test_softmax_rows_sum_to_one(n, c, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(n, c))
    y = T.softmax(Tensor(x, dtype=F64)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-12)
    assert (y >= 0).all()
    T.get_tape().clear()


def test_spec_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = Tensor([[2.0, 3.0], [5.0, 7.0]])
    assert np.array_equal((eye @ m).data, m.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).item() == 11.0
    assert np.array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    assert T.swish(Tensor([0.0])).item() == 0.0
    assert Tensor([2.0, 4.0, 6.0]).mean().item() == 4.0
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    ln = T.layernorm(Tensor(np.full((1, 5), 3.0)))
    assert np.array_equal(ln.data, np.zeros((1, 5)))
    ls = T.log_softmax(Tensor([1000.0, 0.0], dtype=F64)).data
    np.testing.assert_allclose(ls, [0.0, -1000.0])
    one = T.conv2d(Tensor(np.arange(16.0).reshape(1, 1, 4, 4)), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(one.data, np.arange(16.0).reshape(1, 1, 4, 4))
    assert T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2).shape == (1, 1, 2, 2)
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    T.get_tape().clear()


def test_mean_grad_and_mse_self_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=F64)
    x.mean().backward()
    np.testing.assert_allclose(x.grad, [1 / 3] * 3)
    y = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=F64)
    T.mse(y, y).backward()
    assert np.array_equal(y.grad, np.zeros(3))


def test_grad_check_sum_of_squares_and_constant():
    x = Tensor(np.random.default_rng(0).normal(size=7), dtype=F64)
    assert grad_check(lambda v: (v * v).sum(), x) < 1e-6
    assert grad_check(lambda v: Tensor(3.0, dtype=F64), x) == 0.0


def test_two_layer_composite_gradient():
    rng = np.random.default_rng(11)
    x = t64(rng, 4, 5)
    w1, w2 = t64(rng, 5, 6), t64(rng, 6, 2)
    assert grad_check(lambda v: T.swish(T.swish(v @ w1) @ w2).sum(), x, wrt=[w1, w2]) < 1e-4


def test_forward_determinism_and_shape_algebra():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n, c, h, f = rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 9), rng.integers(1, 4)
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        x = Tensor(rng.normal(size=(n, c, h, h)))
        w = Tensor(rng.normal(size=(f, c, k, k)))
        o = (h + 2 * p - k) // s + 1
        out = T.conv2d(x, w, None, s, p)
        assert out.shape == (n, f, o, o)
        assert np.array_equal(out.data, T.conv2d(x, w, None, s, p).data)
        m = int(rng.integers(1, 5))
        a = Tensor(rng.normal(size=(n, h, m)))
        b = Tensor(rng.normal(size=(m, f)))
        assert (a @ b).shape == (n, h, f)
    T.get_tape().clear()
