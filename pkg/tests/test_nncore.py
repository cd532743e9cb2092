from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from caltok import nncore as nn
from caltok.nncore import Tape, Tensor, backward, grad_check

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


# -- matmul -----------------------------------------------------------------------

def test_matmul_identity_and_hand_case():
    A = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nn.matmul(np.eye(2), A).data, A)
    out = nn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            s = 0.0
            for k in range(7):
                s += a[i, k] * b[k, j]
            ref[i, j] = s
    assert np.max(np.abs(nn.matmul(a, b).data - ref)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nn.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- softmax ----------------------------------------------------------------------

def test_softmax_uniform_and_stable():
    assert np.allclose(nn.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, 1 / 3, atol=1e-15)
    p = nn.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0 and p[0, 1] < 1e-300


def _softmax_fraction_oracle(row):
    # exp in extended precision via math.fsum over exact rationals of float exps
    m = max(row)
    e = [Fraction(math.exp(x - m)) for x in row]
    s = sum(e)
    return [float(x / s) for x in e]


def test_softmax_extended_precision_oracle():
    rng = np.random.default_rng(1)
    row = rng.normal(scale=5, size=9)
    ref = _softmax_fraction_oracle(row.tolist())
    assert np.max(np.abs(nn.softmax_rows(Tensor(row[None])).data[0] - ref)) < 1e-9


@given(arrays(np.float64, (3, 6), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = nn.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(-1) - 1.0)) < 1e-9


def test_softmax_literal_mask_leaves_rows_unnormalised():
    x = Tensor(np.zeros((1, 4)))
    mask = np.array([[1, 1, 0, 0]], dtype=bool)
    lit = nn.softmax_rows(x, mask, "literal").data
    pre = nn.softmax_rows(x, mask, "presoftmax").data
    assert np.allclose(lit, [[0.25, 0.25, 0, 0]])
    assert np.allclose(pre, [[0.5, 0.5, 0, 0]])


# -- layer norm / gelu ----------------------------------------------------------------

def test_layer_norm_cases():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(nn.layer_norm(Tensor(np.full(4, 3.0)), one, zero).data, 0.0)
    out = nn.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-5)
    with pytest.raises(ValueError):
        nn.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


@given(arrays(np.float64, (4, 8), elements=finite))
def test_layer_norm_moments(x):
    out = nn.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.max(np.abs(out.mean(-1))) < 1e-7
    var = x.var(-1)
    assert np.allclose(out.var(-1), var / (var + 1e-5), atol=1e-9)


def test_layer_norm_recomputation_oracle():
    rng = np.random.default_rng(2)
    x, g, b = rng.normal(size=16), rng.normal(size=16), rng.normal(size=16)
    mu = sum(x) / 16
    var = sum((xi - mu) ** 2 for xi in x) / 16
    ref = [(xi - mu) / math.sqrt(var + 1e-5) * gi + bi for xi, gi, bi in zip(x, g, b)]
    assert np.max(np.abs(nn.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data - ref)) < 1e-9


def test_gelu_reference():
    assert nn.gelu(Tensor(0.0)).item() == 0.0
    assert abs(nn.gelu(Tensor(30.0)).item() - 30.0) < 1e-12
    xs = np.linspace(-6, 6, 241)
    ref = [0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3))) for x in xs]
    out = nn.gelu(Tensor(xs)).data
    assert np.max(np.abs(out - ref)) < 1e-9
    assert np.all(np.diff(out[xs > -0.7]) > 0)


# -- backward -------------------------------------------------------------------------

def test_backward_sum_is_ones():
    x = Tensor(np.arange(5.0), trainable=True)
    with Tape() as tape:
        loss = x.sum()
    assert np.array_equal(backward(tape, loss)[x], np.ones(5))


def test_backward_quadratic_closed_form():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=3), trainable=True)
    with Tape() as tape:
        y = nn.matmul(W, x)
        loss = (y * y).sum()
    g = backward(tape, loss)
    assert np.allclose(g[x], 2 * W.data.T @ W.data @ x.data, atol=1e-12)
    assert W not in g


def test_backward_errors():
    x = Tensor(np.ones(3), trainable=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(tape, y)
    with pytest.raises(ValueError):
        backward(Tape(), y.sum())


def test_frozen_leaves_get_no_gradient():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((2, 2)), trainable=True)
    with Tape() as tape:
        loss = nn.matmul(a, b).sum()
    g = backward(tape, loss)
    assert list(g) == [b]
    assert tape.parameters == [b]


# -- grad_check -------------------------------------------------------------------------

def test_grad_check_quadratic():
    A = np.diag([1.0, 2.0, 3.0])
    x = Tensor([0.3, -0.7, 1.1])
    assert grad_check(lambda t: (t * nn.matmul(A, t)).sum(), x, 1e-4) < 1e-8


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_grad_check_step_and_finiteness():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), x, step=1e-2)
    with pytest.raises(nn.NonFiniteError):
        grad_check(lambda t: nn.log(t - 2.0).sum(), x)


def test_grad_check_transformer_block():
    from caltok.backbone import Backbone, BackboneConfig
    cfg = BackboneConfig(patch_size=8, embed_dim=16, encoder_layers=1, aa_blocks=1, heads=2,
                         height=16, width=16, head_hidden=16, classifier_layer=0)
    model = Backbone(cfg, seed=0)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 5, 16)))

    def f(t):
        y = model.encode(t, 0)
        return (y * y).sum()
    assert grad_check(f, x, 1e-4) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_grad_check_elementwise_composite(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(4, 2))

    def f(t):
        y = nn.gelu(nn.matmul(nn.tanh(t), w)) + nn.sigmoid(t).sum(axis=-1, keepdims=True)
        return nn.softmax_rows(y).sum(axis=0)[0] + nn.exp(t * 0.1).mean()
    assert grad_check(f, x, 1e-5) < 1e-4


# -- serialisation ----------------------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_blob_round_trip(x):
    back = nn.tensor_from_bytes(nn.tensor_to_bytes(Tensor(x)))
    assert back.shape == x.shape and np.array_equal(back.data, x)


def test_blob_layout_and_rejects_bad_magic():
    blob = nn.tensor_to_bytes(np.array([[1.5, 2.0]]))
    assert blob[:4] == b"CTNS"
    assert len(blob) == 4 + 2 + 4 + 2 * 8 + 2 * 8
    assert blob[-8:] == np.float64(2.0).astype("<f8").tobytes()
    with pytest.raises(ValueError):
        nn.tensor_from_bytes(b"XXXX" + blob[4:])
