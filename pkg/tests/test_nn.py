import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defined import nn
from defined.nn import ops
from defined.nn.gradcheck import check_gradients, relative_error

N_CASES = 100
TOL = 1e-3


# -- concrete examples ------------------------------------------------------
def test_softmax_of_zeros_is_uniform():
    p = ops.softmax_rows(nn.Tensor(np.zeros((1, 4))))
    np.testing.assert_array_equal(p.data, [[0.25] * 4])


def test_cross_entropy_uniform_logits():
    ce = ops.cross_entropy(nn.Tensor(np.zeros((5, 16), np.float32)), np.arange(5))
    assert ce.item() == pytest.approx(math.log(16), abs=1e-6)


def test_single_token_attention_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((2, 1, 8)) for _ in range(3))
    out = ops.scaled_dot_attention(q, k, v, ops.causal_mask(1))
    np.testing.assert_allclose(out.data, v)


def test_backward_of_sum_of_squares():
    w = nn.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    nn.backward(ops.sum_all(ops.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_gelu_reference_values():
    x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(ops.gelu(nn.Tensor(x)).data, ref, rtol=1e-12)
    assert ops.gelu(nn.Tensor(np.array(1.0))).item() == pytest.approx(0.8411920, abs=1e-6)


def test_layer_norm_normalises():
    x = np.random.default_rng(1).standard_normal((3, 10)).astype(np.float32) * 5 + 2
    out = ops.layer_norm(nn.Tensor(x), np.ones(10, np.float32), np.zeros(10, np.float32)).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(out.std(-1), 1, atol=1e-3)
    assert out.dtype == np.float32


def test_linear_matches_numpy():
    rng = np.random.default_rng(2)
    x, W, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    np.testing.assert_allclose(ops.linear(x, W, b).data, x @ W + b)


def test_relative_error_floor():
    assert relative_error(np.array([1e-6]), np.array([2e-6])) == pytest.approx(1e-3)
    assert relative_error(np.array([1.0]), np.array([1.001])) == pytest.approx(0.001 / 1.001)


# -- finite-difference checks, one hundred random cases per kernel ----------
def _dims(rng, lo=1, hi=4, n=2):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=n))


def _weights(rng, shape):
    return rng.standard_normal(shape)


def case_add(rng):
    a = rng.standard_normal(_dims(rng))
    b = rng.standard_normal(a.shape[-1:])  # broadcasting path
    R = _weights(rng, a.shape)
    return lambda x, y: ops.sum_all(ops.mul(ops.add(x, y), R)), [a, b]


def case_mul(rng):
    a = rng.standard_normal(_dims(rng))
    b = rng.standard_normal((1, a.shape[1]))
    R = _weights(rng, a.shape)
    return lambda x, y: ops.sum_all(ops.mul(ops.mul(x, y), R)), [a, b]


def case_matmul(rng):
    B, n, k, m = _dims(rng, n=4)
    a, b = rng.standard_normal((B, n, k)), rng.standard_normal((k, m))
    R = _weights(rng, (B, n, m))
    return lambda x, y: ops.sum_all(ops.mul(ops.matmul(x, y), R)), [a, b]


def case_batched_matmul(rng):
    B, n, k, m = _dims(rng, n=4)
    a, b = rng.standard_normal((B, n, k)), rng.standard_normal((B, k, m))
    R = _weights(rng, (B, n, m))
    return lambda x, y: ops.sum_all(ops.mul(ops.matmul(x, y), R)), [a, b]


def case_linear(rng):
    B, n, k, m = _dims(rng, n=4)
    x, W, b = rng.standard_normal((B, n, k)), rng.standard_normal((k, m)), rng.standard_normal(m)
    R = _weights(rng, (B, n, m))
    return lambda x, W, b: ops.sum_all(ops.mul(ops.linear(x, W, b), R)), [x, W, b]


def case_layer_norm(rng):
    n, d = _dims(rng, 2, 6)
    x = rng.standard_normal((n, d)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    g, b = rng.standard_normal(d), rng.standard_normal(d)
    R = _weights(rng, (n, d))
    return lambda x, g, b: ops.sum_all(ops.mul(ops.layer_norm(x, g, b), R)), [x, g, b]


def case_softmax(rng):
    x = rng.standard_normal(_dims(rng, 1, 5, 3)) * 2
    R = _weights(rng, x.shape)
    return lambda x: ops.sum_all(ops.mul(ops.softmax_rows(x), R)), [x]


def case_gelu(rng):
    x = rng.standard_normal(_dims(rng, 1, 6)) * 2
    R = _weights(rng, x.shape)
    return lambda x: ops.sum_all(ops.mul(ops.gelu(x), R)), [x]


def case_attention(rng):
    B, L, d = _dims(rng, 1, 5, 3)
    q, k, v = (rng.standard_normal((B, L, d)) for _ in range(3))
    mask = ops.causal_mask(L)
    R = _weights(rng, (B, L, d))
    return lambda q, k, v: ops.sum_all(ops.mul(ops.scaled_dot_attention(q, k, v, mask), R)), [q, k, v]


def case_cross_entropy(rng):
    shape = _dims(rng, 1, 4)
    C = int(rng.integers(2, 7))
    z = rng.standard_normal(shape + (C,)) * 2
    t = rng.integers(0, C, size=shape)
    return lambda z: ops.cross_entropy(z, t), [z]


def case_structural(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 1, 4))
    R = _weights(rng, (4, 2, 2))

    def fn(a, b):
        c = ops.concat([a, b], axis=1)  # (2, 4, 4)
        c = ops.transpose(c, (2, 0, 1))[:, :, 1:3]  # (4, 2, 2)
        return ops.add(ops.sum_all(ops.mul(ops.reshape(c, (4, 2, 2)), R)), ops.mean_all(a))

    return fn, [a, b]


def case_fancy_index(rng):
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 5, size=7)  # repeated rows accumulate
    R = _weights(rng, (7, 3))
    return lambda x: ops.sum_all(ops.mul(ops.getitem(x, idx), R)), [x]


KERNELS = {
    "add": case_add,
    "mul": case_mul,
    "matmul": case_matmul,
    "batched_matmul": case_batched_matmul,
    "linear": case_linear,
    "layer_norm": case_layer_norm,
    "softmax_rows": case_softmax,
    "gelu": case_gelu,
    "scaled_dot_attention": case_attention,
    "cross_entropy": case_cross_entropy,
    "reshape_transpose_concat_getitem": case_structural,
    "fancy_getitem": case_fancy_index,
}


@pytest.mark.parametrize("name", list(KERNELS))
def test_kernel_gradients(name):
    worst = 0.0
    for seed in range(N_CASES):
        fn, arrays = KERNELS[name](np.random.default_rng(seed))
        worst = max(worst, check_gradients(fn, arrays))
    assert worst < TOL, f"{name}: max relative error {worst:.2e}"


def test_composed_network_gradient():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 6))
    W1, b1 = rng.standard_normal((6, 8)) * 0.4, rng.standard_normal(8) * 0.1
    g, be = 1 + 0.1 * rng.standard_normal(8), 0.1 * rng.standard_normal(8)
    W2 = rng.standard_normal((8, 3)) * 0.4
    target = rng.integers(0, 3, size=(2, 5))
    mask = ops.causal_mask(5)

    def net(x, W1, b1, g, be, W2):
        h = ops.gelu(ops.linear(x, W1, b1))
        h = ops.add(h, ops.scaled_dot_attention(h, h, h, mask))
        h = ops.layer_norm(h, g, be)
        return ops.cross_entropy(ops.linear(h, W2), target)

    assert check_gradients(net, [x, W1, b1, g, be, W2]) < TOL


def test_gradients_accumulate_over_reuse():
    w = nn.Tensor(np.array([3.0]), requires_grad=True)
    nn.backward(ops.sum_all(ops.add(ops.mul(w, w), w)))
    assert w.grad.tolist() == [7.0]


# -- invariants -------------------------------------------------------------
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ops.softmax_rows(nn.Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    assert (p >= 0).all()


def test_causal_weights_vanish_above_diagonal():
    rng = np.random.default_rng(4)
    q, k = rng.standard_normal((2, 3, 6, 4)), rng.standard_normal((2, 3, 6, 4))
    p = ops.attention_weights(q, k, ops.causal_mask(6))
    assert (p[..., np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0).all()


def test_no_grad_records_nothing():
    w = nn.Tensor(np.ones(3), requires_grad=True)
    with nn.no_grad():
        out = ops.mul(w, w)
    assert not out.requires_grad and out.parents == ()
    assert nn.grad_enabled()


def test_deterministic_forward_backward():
    def run():
        rng = np.random.default_rng(9)
        W = nn.Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
        x = rng.standard_normal((5, 4)).astype(np.float32)
        loss = ops.cross_entropy(ops.linear(x, W), np.arange(5) % 3)
        nn.backward(loss)
        return loss.item(), W.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# -- failure modes ----------------------------------------------------------
def test_non_finite_values_fail_fast():
    with pytest.raises(nn.NonFiniteValue):
        ops.add(nn.Tensor(np.array([np.inf])), nn.Tensor(np.array([1.0])))
    with pytest.raises(nn.NonFiniteValue):
        ops.gelu(nn.Tensor(np.array([np.nan])))


def test_shape_mismatches():
    with pytest.raises(nn.ShapeMismatch):
        ops.matmul(nn.Tensor(np.ones((2, 3))), nn.Tensor(np.ones((2, 3))))
    with pytest.raises(nn.ShapeMismatch):
        ops.add(nn.Tensor(np.ones((2, 3))), nn.Tensor(np.ones((4,))))
    with pytest.raises(nn.ShapeMismatch):
        ops.cross_entropy(nn.Tensor(np.ones((2, 3))), np.zeros(3, int))
    with pytest.raises(nn.ShapeMismatch):
        nn.backward(nn.Tensor(np.ones(2), requires_grad=True))


# -- Adam -------------------------------------------------------------------
def _scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = m * b1 + (1 - b1) * g
        v = v * b2 + (1 - b2) * (g * g)
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(p)
    return trace


def test_adam_first_step_moves_by_lr():
    store = nn.ParamStore({"w": np.array([1.0])})
    store["w"].grad = np.array([1.0])
    nn.adam_step(store, lr=0.1)
    assert store["w"].data[0] == pytest.approx(0.9, abs=1e-7)
    assert store["w"].grad is None and store.step == 1


def test_adam_zero_gradient_leaves_parameter():
    store = nn.ParamStore({"w": np.array([2.5, -1.0])})
    store["w"].grad = np.zeros(2)
    nn.adam_step(store, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, [2.5, -1.0])


# frozen output of the scalar reference above for p0 = (0.3, -1.2),
# gradients (0.5, -2.0) then (-0.25, 4.0), lr = 0.01
ADAM_TRACE = [
    [0.2900000002, -1.19000000005],
    [0.2873366298707846, -1.1936610353087829],
]


def test_adam_two_steps_match_scalar_reference():
    p0, grads = [0.3, -1.2], [[0.5, -2.0], [-0.25, 4.0]]
    store = nn.ParamStore({"w": np.array(p0)})
    trace = []
    for g in grads:
        store["w"].grad = np.array(g)
        nn.adam_step(store, lr=0.01)
        trace.append(store["w"].data.copy())
    for j in range(2):
        ref = _scalar_adam(p0[j], [g[j] for g in grads], 0.01)
        assert [trace[0][j], trace[1][j]] == ref  # bitwise
    assert [t.tolist() for t in trace] == ADAM_TRACE


def test_clip_grad_norm():
    store = nn.ParamStore({"a": np.zeros(2), "b": np.zeros(1)})
    store["a"].grad, store["b"].grad = np.array([3.0, 0.0]), np.array([4.0])
    assert store.clip_grad_norm(1.0) == pytest.approx(5.0)
    assert store.grad_norm() == pytest.approx(1.0, rel=1e-9)
    assert store.count() == 3
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))
