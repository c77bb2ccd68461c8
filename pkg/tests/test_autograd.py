import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from peftbench import autograd as ag
from peftbench.autograd import Tensor

from oracles import finite_diff, matmul_loops

def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity_and_scalar():
    a = T([[1, 2], [3, 4]])
    assert np.array_equal(ag.matmul(a, T(np.eye(2))).data, a.data)
    assert ag.matmul(T([[2]]), T([[3]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(ag.matmul(T(a), T(b)).data - matmul_loops(a.tolist(), b.tolist()))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(T(np.zeros((2, 3))), T(np.zeros((2, 3))))


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    A, B = T(a), T(b)
    ag.backward(ag.sum_(ag.matmul(A, B)))
    assert np.allclose(B.grad, finite_diff(lambda w: (a @ w).sum(), b), rtol=1e-6)
    assert np.allclose(A.grad, finite_diff(lambda x: (x @ b).sum(), a), rtol=1e-6)


# -- softmax / layer_norm / cross_entropy ---------------------------------

def test_softmax_uniform_and_direct():
    assert np.allclose(ag.softmax(T([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(ag.softmax(T(x)).data - direct)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(x, c):
    s = ag.softmax(T(x)).data
    assert np.max(np.abs(ag.softmax(T(x + c)).data - s)) < 1e-12
    assert np.all(s >= 0)
    assert np.allclose(s.sum(-1), 1.0, atol=1e-9)


def test_softmax_mask_gives_exact_zero():
    mask = np.array([True, False, True])
    s = ag.softmax(T([1.0, 5.0, 2.0]), mask=mask).data
    assert s[1] == 0.0 and abs(s.sum() - 1) < 1e-15


def test_layer_norm_cases():
    d = 8
    g, b = T(np.ones(d)), T(np.zeros(d))
    assert np.all(ag.layer_norm(T(np.full((1, d), 3.7)), g, b).data == 0.0)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, d))
    y = ag.layer_norm(T(x), g, b).data
    assert np.all(np.abs(y.mean(-1)) < 1e-9)
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    assert np.max(np.abs(y - (x - mu) / np.sqrt(var + 1e-5))) < 1e-12


def test_cross_entropy_cases():
    V = 7
    t = np.array([1, 4, 6])
    big = np.zeros((3, V))
    big[np.arange(3), t] = 1e6
    assert ag.cross_entropy(T(big), t).item() < 1e-6
    assert abs(ag.cross_entropy(T(np.zeros((3, V))), t).item() - math.log(V)) < 1e-12
    rng = np.random.default_rng(3)
    lg = rng.normal(size=(3, 5))
    tt = np.array([0, 2, 4])
    mask = np.array([True, False, True])
    lsm = lg - np.log(np.exp(lg).sum(-1, keepdims=True))
    want = -(lsm[0, 0] + lsm[2, 4]) / 2
    assert abs(ag.cross_entropy(T(lg), tt, mask).item() - want) < 1e-12


def test_cross_entropy_all_masked_raises():
    with pytest.raises(ag.EmptyLossError, match="empty loss"):
        ag.cross_entropy(T(np.zeros((2, 3))), np.array([0, 1]), np.array([False, False]))


# -- backward ---------------------------------------------------------------

def test_backward_linear_and_frozen():
    x = T(np.arange(6.0).reshape(2, 3))
    ag.backward(ag.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    frozen = T(np.ones((3, 2)), grad=False)
    x.grad = None
    ag.backward(ag.sum_(ag.matmul(x, frozen)))
    assert frozen.grad is None


def test_backward_matmul_vs_finite_diff():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    W = T(w)
    ag.backward(ag.sum_(ag.matmul(T(x, grad=False), W)))
    num = finite_diff(lambda ww: (x @ ww).sum(), w)
    assert np.max(np.abs(W.grad - num) / np.maximum(np.abs(num), 1e-8)) < 1e-5


def test_backward_unreached_input_gets_zero_and_nonscalar_raises():
    x, y = T([1.0, 2.0]), T([3.0, 4.0])
    ag.backward(ag.sum_(x), [x, y])
    assert np.array_equal(y.grad, np.zeros(2))
    with pytest.raises(ValueError):
        ag.backward(ag.mul(x, 2.0))


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        A = T(a)
        ag.backward(ag.sum_(ag.tanh(ag.matmul(A, A))))
        grads.append(A.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_topological_order_parents_first():
    a = T([1.0])
    b = ag.mul(a, 2.0)
    c = ag.add(b, a)
    d = ag.mul(c, b)
    order = ag.topological_order(d)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]
    assert len(order) == len({id(t) for t in order})


# -- grad_check per op ------------------------------------------------------

def _rand(shape, seed=0):
    return T(np.random.default_rng(seed).normal(size=shape))


OPS = {
    "add": lambda x: ag.sum_(ag.mul(ag.add(x, x), x)),
    "sub": lambda x: ag.sum_(ag.mul(ag.sub(x, 0.3), x)),
    "div": lambda x: ag.sum_(ag.div(x, ag.add(ag.mul(x, x), 1.0))),
    "tanh": lambda x: ag.sum_(ag.tanh(x)),
    "gelu": lambda x: ag.sum_(ag.gelu(x)),
    "reshape_transpose": lambda x: ag.sum_(ag.mul(ag.transpose(ag.reshape(x, (4, 3)), (1, 0)),
                                                  T(np.arange(12.0).reshape(3, 4), grad=False))),
    "getitem": lambda x: ag.sum_(ag.mul(x[1:, ::2], x[1:, ::2])),
    "concat": lambda x: ag.sum_(ag.tanh(ag.concat([x, ag.mul(x, 2.0)], axis=0))),
    "broadcast": lambda x: ag.sum_(ag.tanh(ag.broadcast_to(ag.reshape(x, (1, 3, 4)), (2, 3, 4)))),
    "mean": lambda x: ag.mean(ag.mul(x, x)),
    "softmax": lambda x: ag.sum_(ag.mul(ag.softmax(x, axis=-1), T(np.arange(12.0).reshape(3, 4), grad=False))),
    "layer_norm": lambda x: ag.sum_(ag.mul(ag.layer_norm(x, T(np.ones(4), grad=False), T(np.zeros(4), grad=False)),
                                           T(np.arange(12.0).reshape(3, 4), grad=False))),
    "cross_entropy": lambda x: ag.cross_entropy(x, np.array([0, 3, 1])),
    "matmul": lambda x: ag.sum_(ag.tanh(ag.matmul(x, ag.transpose(x, (1, 0))))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_each_op(name):
    assert ag.grad_check(OPS[name], _rand((3, 4), seed=len(name))) < 1e-5


def test_grad_check_embedding():
    ids = np.array([0, 2, 2, 4])
    err = ag.grad_check(lambda w: ag.sum_(ag.tanh(ag.embedding(w, ids))), _rand((5, 3)))
    assert err < 1e-5


def test_grad_check_sum_of_squares_and_constant():
    assert ag.grad_check(lambda x: ag.sum_(ag.mul(x, x)), _rand((4, 3))) < 1e-6
    assert ag.grad_check(lambda x: ag.sum_(ag.mul(x, 0.0)), _rand((2, 2))) == 0.0


def test_dropout_eval_identity_and_train_scaling():
    x = _rand((50, 40))
    assert ag.dropout(x, 0.5, None, train=False) is x or np.array_equal(ag.dropout(x, 0.5, None, False).data, x.data)
    y = ag.dropout(x, 0.5, np.random.default_rng(0), train=True).data
    kept = y != 0
    assert np.allclose(y[kept], 2 * x.data[kept])
    assert 0.4 < kept.mean() < 0.6


# -- adam -----------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = _rand((3,))
    before = p.data.copy()
    ag.adam_step([p], [np.zeros(3)], ag.AdamState(0.1))
    assert np.array_equal(p.data, before)


def test_adam_single_step_closed_form():
    p = _rand((4,))
    g = np.array([0.5, -2.0, 1e-3, 3.0])
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    before = p.data.copy()
    want = p.data.copy()
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    want -= lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    st_ = ag.AdamState(lr)
    ag.adam_step([p], [g], st_)
    assert np.allclose(p.data, want, rtol=0, atol=1e-15)
    assert st_.step_count == 1
    # first step moves each coordinate by about lr against the gradient sign
    assert np.allclose((want - before) / lr, -np.sign(g), atol=1e-4)


def test_adam_is_deterministic_and_counts_steps():
    outs = []
    for _ in range(2):
        p = _rand((3, 2), seed=9)
        s = ag.AdamState(0.05)
        for k in range(3):
            ag.adam_step([p], [np.full((3, 2), k + 1.0)], s)
        outs.append(p.data.copy())
        assert s.step_count == 3
        assert s.first_moment[0].shape == (3, 2)
    assert np.array_equal(outs[0], outs[1])
