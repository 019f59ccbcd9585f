import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvvt import tensor as T
from mvvt.tensor import RngStream, ShapeError, Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def naive_conv(x, w, b, p):
    """Stride-p convolution with a p x p kernel, one output pixel at a time."""
    bsz, c, h, wd = x.shape
    d = w.shape[1]
    kernel = w.reshape(c, p, p, d)
    out = np.zeros((bsz, (h // p) * (wd // p), d))
    for n in range(bsz):
        t = 0
        for i in range(0, h, p):
            for j in range(0, wd, p):
                acc = b.copy()
                for ch in range(c):
                    for dy in range(p):
                        for dx in range(p):
                            acc = acc + x[n, ch, i + dy, j + dx] * kernel[ch, dy, dx]
                out[n, t] = acc
                t += 1
    return out


# --- add / broadcasting ----------------------------------------------------

def test_add_identity():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data, [1.0, 2.0])


def test_add_leading_unit_broadcast_and_grad():
    a = leaf(np.ones((2, 3, 4)))
    pos = leaf(np.arange(12.0).reshape(1, 3, 4))
    out = T.add(a, pos)
    assert out.shape == (2, 3, 4)
    T.backward(T.sum_(out))
    assert np.array_equal(pos.grad, np.full((1, 3, 4), 2.0))
    assert np.array_equal(a.grad, np.ones((2, 3, 4)))


def test_add_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 3\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))


def test_no_trailing_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


# --- matmul ------------------------------------------------------------------

def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert np.array_equal(T.matmul(m, Tensor([[5.0], [6.0]])).data, [[17.0], [39.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_reverse_pass_formulas():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    T.backward(T.sum_(T.mul(T.matmul(a, b), Tensor(g))))
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


# --- softmax -----------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    assert np.allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    assert np.array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_slices_sum_to_one(x):
    out = T.softmax(Tensor(x), -1).data
    assert np.all(np.abs(out.sum(-1) - 1.0) <= 1e-12)
    assert np.all((out >= 0) & (out <= 1))
    single = T.softmax(Tensor(x.astype(np.float32)), -1).data
    assert single.dtype == np.float32
    assert np.all(np.abs(single.sum(-1) - 1.0) <= 1e-5)


# --- layer norm -------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.array_equal(T.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, [0.0, 0.0, 0.0])
    out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5).data
    assert np.allclose(out, [-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)], atol=1e-15)
    beta = Tensor([0.5, -1.0, 2.0])
    x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    assert np.array_equal(T.layer_norm(x, zero, beta).data, np.broadcast_to(beta.data, (4, 3)))


def test_layer_norm_errors():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 9)), elements=st.floats(-50, 50)),
       st.sampled_from([1e-5, 1e-3, 0.1]))
def test_layer_norm_statistics(x, eps):
    d = x.shape[-1]
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps).data
    var = x.var(-1)
    assert np.all(np.abs(out.mean(-1)) <= 1e-10)
    assert np.allclose(out.var(-1), var / (var + eps), atol=1e-10)


# --- activations and dropout ---------------------------------------------

def test_relu_gelu_examples():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([3.0])).data[0] - 2.9964) < 1e-4
    expect = 0.5 * 3 * (1 + math.tanh(math.sqrt(2 / math.pi) * (3 + 0.044715 * 27)))
    assert abs(T.gelu(Tensor([3.0])).data[0] - expect) < 1e-15


def test_dropout_identities():
    x = Tensor(np.random.default_rng(2).normal(size=(50,)))
    assert np.array_equal(T.dropout(x, 0.5, False, None).data, x.data)
    assert np.array_equal(T.dropout(x, 0.0, True, RngStream(1)).data, x.data)


def test_dropout_rate_errors():
    with pytest.raises(ValueError):
        T.dropout(Tensor(np.ones(3)), 1.0, True, RngStream(0))


def test_dropout_zero_fraction_and_scaling():
    out = T.dropout(Tensor(np.ones(10**6)), 0.1, True, RngStream(42)).data
    frac = float(np.mean(out == 0.0))
    assert abs(frac - 0.1) <= 0.002
    assert np.allclose(out[out != 0], 1 / 0.9)


def test_dropout_mask_deterministic():
    x = Tensor(np.ones(1000))
    a = T.dropout(x, 0.3, True, RngStream(9, 4)).data
    b = T.dropout(x, 0.3, True, RngStream(9, 4)).data
    c = T.dropout(x, 0.3, True, RngStream(9, 5)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# --- mean and sum -------------------------------------------------------

def test_mean_examples():
    tok = np.array([1.5, -2.0, 3.0])
    assert np.array_equal(T.mean(Tensor(np.tile(tok, (5, 1))), 0).data, tok)
    out = T.mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), 0)
    assert out.shape == (2,) and np.array_equal(out.data, [2.0, 3.0])
    x = leaf(np.ones((2, 4, 3)))
    T.backward(T.sum_(T.mean(x, 1)))
    assert np.allclose(x.grad, 0.25)
    with pytest.raises(ShapeError):
        T.mean(Tensor(np.zeros((2, 2))), 3)


# --- patch projection --------------------------------------------------

def test_patch_counts():
    assert T.patchify_project(Tensor(np.zeros((1, 3, 224, 224))), Tensor(np.zeros((768, 2))),
                              Tensor(np.zeros(2)), 16).shape == (1, 196, 2)
    assert T.patchify_project(Tensor(np.zeros((1, 3, 32, 32))), Tensor(np.zeros((768, 2))),
                              Tensor(np.zeros(2)), 16).shape == (1, 4, 2)


def test_patch_not_divisible():
    with pytest.raises(ShapeError, match="H=30.*P=16"):
        T.patchify_project(Tensor(np.zeros((1, 3, 30, 32))), Tensor(np.zeros((768, 2))), Tensor(np.zeros(2)), 16)


@pytest.mark.parametrize("seed", range(5))
def test_patchify_matches_naive_convolution(seed):
    rng = np.random.default_rng(seed)
    c, p = int(rng.integers(1, 4)), int(rng.choice([2, 4]))
    h, w = p * int(rng.integers(1, 4)), p * int(rng.integers(1, 4))
    x = rng.uniform(-2, 2, size=(2, c, h, w))
    wt, b = rng.normal(size=(c * p * p, 5)), rng.normal(size=5)
    got = T.patchify_project(Tensor(x), Tensor(wt), Tensor(b), p).data
    assert np.max(np.abs(got - naive_conv(x, wt, b, p))) <= 1e-12


# --- backward semantics ----------------------------------------------------

def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum_(T.square(x)))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])
    T.backward(T.sum_(T.square(x)))
    assert np.array_equal(x.grad, [4.0, 8.0, 12.0])
    x.zero_grad()
    assert np.array_equal(x.grad, [0.0, 0.0, 0.0])


def test_detached_loss_leaves_grad_zero():
    x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    T.backward(T.sum_(T.square(y)))
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.square(leaf([1.0, 2.0])))


def test_constants_never_receive_gradients():
    c = Tensor([1.0, 2.0])
    x = leaf([3.0, 4.0])
    T.backward(T.sum_(T.mul(c, x)))
    assert c.grad is None and np.array_equal(x.grad, [1.0, 2.0])


def test_computation_record_is_topological():
    x = leaf([1.0, 2.0])
    h = T.square(x)
    loss = T.sum_(T.add(h, T.mul(h, 2.0)))
    order = T.computation_record(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad:
                    assert pos[id(inp)] < pos[id(t)]
    assert len(order) == len({id(t) for t in order})
    assert order[-1] is loss


def test_shared_subexpression_gradient():
    x = leaf([1.0, -2.0])
    h = T.square(x)
    T.backward(T.sum_(T.add(h, T.mul(h, 2.0))))
    assert np.array_equal(x.grad, 6.0 * x.data)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert y.node is None and not y.requires_grad


# --- grad_check ----------------------------------------------------------

def test_grad_check_examples():
    rng = np.random.default_rng(3)
    assert T.grad_check(lambda x: T.sum_(x), Tensor(rng.uniform(-2, 2, size=(3, 4)))) < 1e-10
    assert T.grad_check(lambda x: T.sum_(T.mul(T.softmax(x, -1), x)), Tensor(rng.uniform(-2, 2, size=(3, 4)))) < 1e-6


def test_grad_check_detects_wrong_gradient(monkeypatch):
    def bad(a, b, g):
        ga, gb = np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)
        return ga * 1.01, gb

    monkeypatch.setattr(T, "_matmul_grads", bad)
    w = Tensor(np.random.default_rng(4).normal(size=(3, 2)))
    assert T.grad_check(lambda x: T.sum_(T.matmul(x, w)), Tensor(np.ones((2, 3)))) > 1e-3


# --- RngStream and dumps ----------------------------------------------------

def test_rng_stream_determinism():
    a, b = RngStream(7, 1, 2), RngStream(7, 1, 2)
    assert np.array_equal(a.normal((10,)), b.normal((10,)))
    assert np.array_equal(a.uniform((3,)), b.uniform((3,)))
    assert not np.array_equal(RngStream(7, 1).normal((10,)), RngStream(7, 2).normal((10,)))
    t = RngStream(0).truncated_normal((10000,), 0.02)
    assert np.max(np.abs(t)) <= 0.04


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_dump_round_trip(x):
    text = T.dumps(Tensor(x))
    assert text.startswith(f"shape: {x.shape[0]} {x.shape[1]}\n")
    back = T.loads(text)
    assert back.shape == x.shape and np.array_equal(back.data, x)


def test_dump_rejects_bad_input():
    with pytest.raises(ValueError):
        T.loads("2 3\n1\n")
    with pytest.raises(ShapeError):
        T.loads("shape: 2 2\n1\n2\n")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)),
       arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)))
def test_gradient_linearity(a, b):
    """grad of (f + g) equals grad f + grad g."""
    n = min(a.size, b.size)
    x = leaf(a[:n])
    w = Tensor(b[:n])
    T.backward(T.sum_(T.mul(T.square(x), w)))
    g1 = x.grad.copy()
    x.zero_grad()
    T.backward(T.sum_(T.relu(x)))
    g2 = x.grad.copy()
    x.zero_grad()
    T.backward(T.add(T.sum_(T.mul(T.square(x), w)), T.sum_(T.relu(x))))
    assert np.allclose(x.grad, g1 + g2, rtol=0, atol=1e-12)
