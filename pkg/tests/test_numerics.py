import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check
from stepalign.numerics import (
    AdamWState,
    ConfigError,
    DimensionError,
    Tensor,
    adamw_step,
    concat,
    cosine_lr,
    cross_entropy,
    exp,
    feed_forward,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    log,
    logsumexp,
    matmul,
    mean,
    multihead_attention,
    relu,
    softmax,
    sqrt,
    tanh,
    transpose,
)

TOL = 1e-4


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


# -- matmul -----------------------------------------------------------------
def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_value():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_zeros():
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_associativity(rng):
    a, b, c, d = (Tensor(rng.standard_normal((4, 4))) for _ in range(4))
    left = matmul(matmul(matmul(a, b), c), d).data
    right = matmul(a, matmul(b, matmul(c, d))).data
    assert np.abs(left - right).max() <= 1e-9


# -- softmax / layer norm ---------------------------------------------------
def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(Tensor([1.0, 0.0])).data, [0.73106, 0.26894], atol=1e-5)
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_stochastic(x):
    out = softmax(Tensor(x), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(layer_norm(Tensor([[3.0, 3.0]]), one, zero).data, [[0.0, 0.0]])
    expected = np.array([1.0, -1.0]) / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(layer_norm(Tensor([[1.0, -1.0]]), one, zero).data[0], expected, rtol=1e-12)
    bias = Tensor([0.3, -0.7])
    out = layer_norm(Tensor([[5.0, 1.0], [2.0, -4.0]]), Tensor(np.zeros(2)), bias).data
    np.testing.assert_array_equal(out, [[0.3, -0.7], [0.3, -0.7]])


# -- attention ----------------------------------------------------------------
def _attn_weights(rng, D, identity=False):
    w = {}
    for n in "qkvo":
        w[f"w{n}"] = Tensor(np.eye(D) if identity else rng.standard_normal((D, D)) / np.sqrt(D))
        w[f"b{n}"] = Tensor(np.zeros(D) if identity else rng.standard_normal(D) * 0.1)
    return w


def test_attention_single_key_ignores_query(rng):
    D = 8
    w = _attn_weights(rng, D)
    kv = Tensor(rng.standard_normal((1, D)))
    q = Tensor(rng.standard_normal((5, D)))
    out = multihead_attention(q, kv, kv, w, 2).data
    expected = (kv.data @ w["wv"].data + w["bv"].data) @ w["wo"].data + w["bo"].data
    np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), atol=1e-12)


def test_attention_peaks_on_matching_key():
    D = 4
    w = _attn_weights(None, D, identity=True)
    keys = np.eye(D)
    # values equal to keys, so the output is the attention distribution itself
    for j in range(D):
        out = multihead_attention(Tensor(keys[j:j + 1] * 3), Tensor(keys), Tensor(keys), w, 1).data[0]
        assert np.argmax(out) == j
        assert np.sum(out == out.max()) == 1


def test_attention_kv_permutation_invariant(rng):
    D = 8
    w = _attn_weights(rng, D)
    q, k, v = (Tensor(rng.standard_normal((n, D))) for n in (3, 6, 6))
    perm = rng.permutation(6)
    a = multihead_attention(q, k, v, w, 4).data
    b = multihead_attention(q, Tensor(k.data[perm]), Tensor(v.data[perm]), w, 4).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_head_mismatch(rng):
    w = _attn_weights(rng, 6)
    x = Tensor(rng.standard_normal((2, 6)))
    with pytest.raises(ConfigError):
        multihead_attention(x, x, x, w, 4)


# -- optimizer ---------------------------------------------------------------
def test_adamw_zero_grad_no_decay():
    p = {"w": Tensor([1.0, -2.0], requires_grad=True)}
    p["w"].grad = np.zeros(2)
    state = AdamWState(weight_decay=0.0)
    adamw_step(p, state, 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step_count == 1


def test_adamw_first_step_hand_trace():
    p = {"w": Tensor([0.0], requires_grad=True)}
    p["w"].grad = np.array([1.0])
    state = AdamWState(weight_decay=0.0, betas=(0.9, 0.999))
    adamw_step(p, state, 0.1)
    assert p["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)


def test_adamw_decoupled_decay():
    p = {"w": Tensor([2.0, -4.0], requires_grad=True)}
    p["w"].grad = np.zeros(2)
    adamw_step(p, AdamWState(weight_decay=0.1), 1.0)
    np.testing.assert_allclose(p["w"].data, [1.8, -3.6])


def test_adamw_zero_lr_changes_nothing(rng):
    p = {f"p{i}": Tensor(rng.standard_normal((3, 2)), requires_grad=True) for i in range(3)}
    before = {k: v.data.copy() for k, v in p.items()}
    state = AdamWState()
    for _ in range(3):
        for t in p.values():
            t.grad = rng.standard_normal(t.shape)
        adamw_step(p, state, 0.0)
    for k in p:
        np.testing.assert_array_equal(p[k].data, before[k])


def test_cosine_lr():
    assert cosine_lr(0, 100, 0.5) == 0.5
    assert cosine_lr(100, 100, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(50, 100, 0.5) == pytest.approx(0.25)
    with pytest.raises(ConfigError):
        cosine_lr(0, 0, 0.5)


# -- autodiff ----------------------------------------------------------------
def test_backward_sum_and_square(rng):
    x = leaf(rng, 3, 2)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.grad = None
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates(rng):
    x = leaf(rng, 4)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError):
        leaf(rng, 3).backward()


def test_backward_shared_subgraph(rng):
    x = leaf(rng, 3)
    y = x * 2.0
    (y * y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 8 * x.data + 2)


def test_mlp_gradient_matches_finite_differences(rng):
    x = Tensor(rng.standard_normal((5, 4)))
    ws = [leaf(rng, 4, 6), leaf(rng, 6, 6), leaf(rng, 6, 3)]
    bs = [leaf(rng, 6), leaf(rng, 6), leaf(rng, 3)]

    def f():
        h = tanh(linear(x, ws[0], bs[0]))
        h = gelu(linear(h, ws[1], bs[1]))
        out = linear(h, ws[2], bs[2])
        return mean(out * out)

    assert check(f, ws + bs) < TOL


# One finite-difference case per differentiable op.
OP_CASES = {
    "add": (lambda a, b: (a + b) * (a - b), [(3, 4), (4,)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 1)]),
    "div": (lambda a, b: a / b, [(3, 4), ("pos", 3, 4)]),
    "neg": (lambda a: -a * a, [(5,)]),
    "exp": (lambda a: exp(a), [(2, 3)]),
    "log": (lambda a: log(a), [("pos", 2, 3)]),
    "sqrt": (lambda a: sqrt(a), [("pos", 2, 3)]),
    "tanh": (lambda a: tanh(a), [(2, 3)]),
    "relu": (lambda a: relu(a) * a, [(3, 4)]),
    "gelu": (lambda a: gelu(a), [(3, 4)]),
    "sum": (lambda a: a.sum(axis=0, keepdims=True) * a, [(3, 4)]),
    "mean": (lambda a: a.mean(axis=1) * a.mean(axis=0)[np.array([0, 1, 3])], [(3, 4)]),
    "reshape": (lambda a: a.reshape(6, 2) * Tensor(np.arange(12.0).reshape(6, 2)), [(3, 4)]),
    "transpose": (lambda a: transpose(a, (1, 0)) * Tensor(np.arange(12.0).reshape(4, 3)), [(3, 4)]),
    "getitem": (lambda a: a[np.array([0, 2, 2])] * 1.5, [(3, 4)]),
    "concat": (lambda a, b: concat([a, b * 2.0], axis=0) * Tensor(np.arange(9.0).reshape(3, 3)),
               [(2, 3), (1, 3)]),
    "matmul": (lambda a, b: matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
    "softmax": (lambda a: softmax(a, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4)), [(3, 4)]),
    "logsumexp": (lambda a: logsumexp(a, axis=1), [(3, 5)]),
    "weighted_logsumexp": (
        lambda a: logsumexp(a, axis=1, weights=np.array([[1, 0, 1, 0, 0]] * 3, dtype=float)),
        [(3, 5)]),
    "layer_norm": (lambda x, g, b: layer_norm(x, g, b) * Tensor(np.arange(15.0).reshape(3, 5)),
                   [(3, 5), (5,), (5,)]),
    "l2_normalize": (lambda a: l2_normalize(a) * Tensor(np.arange(12.0).reshape(3, 4)), [(3, 4)]),
    "cross_entropy": (lambda a: cross_entropy(a, [1, 0, 2]), [(3, 3)]),
    "feed_forward": (lambda x, w1, b1, w2, b2: feed_forward(x, w1, b1, w2, b2),
                     [(3, 4), (4, 8), (8,), (8, 4), (4,)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name, rng):
    fn, shapes = OP_CASES[name]
    tensors = [leaf(rng, *s[1:], positive=True) if s and s[0] == "pos" else leaf(rng, *s) for s in shapes]

    def f():
        out = fn(*tensors)
        return out.sum() if out.ndim else out

    assert check(f, tensors) < TOL


def test_attention_gradients(rng):
    D = 8
    w = {k: Tensor(v.data, requires_grad=True) for k, v in _attn_weights(rng, D).items()}
    q, kv = leaf(rng, 3, D), leaf(rng, 5, D)
    target = Tensor(rng.standard_normal((3, D)))

    def f():
        return (multihead_attention(q, kv, kv, w, 2) * target).sum()

    assert check(f, [q, kv] + list(w.values())) < TOL


def test_l2_normalize_zero_row():
    x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    out = l2_normalize(x)
    np.testing.assert_array_equal(out.data, [[0.0, 0.0], [0.6, 0.8]])
    out.sum().backward()
    assert np.all(np.isfinite(x.grad))
