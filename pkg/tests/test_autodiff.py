import decimal
import math

import numpy as np
import pytest

from prefixmerge import autodiff as ad
from conftest import assert_grads_close, check_param_grads


def t(data, rg=True):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = t(np.eye(2))
    b = t([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_hand_product():
    out = ad.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zero_annihilates():
    out = ad.matmul(t(np.zeros((2, 3))), t(np.arange(12.0).reshape(3, 4)))
    assert out.shape == (2, 4)
    assert not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_on_equal_inputs():
    out = ad.softmax(t([0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_large_inputs_stay_finite():
    out = ad.softmax(t([1000.0, 1000.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5])
    assert np.isfinite(out.data).all()


def test_softmax_against_decimal_oracle():
    # arbitrary-precision evaluation of e^{x-3} / sum for x = 1, 2, 3
    decimal.getcontext().prec = 50
    xs = [decimal.Decimal(v) for v in (1, 2, 3)]
    es = [(x - xs[2]).exp() for x in xs]
    tot = sum(es)
    expected = np.array([float(e / tot) for e in es])
    out = ad.softmax(t([1.0, 2.0, 3.0]), axis=0)
    assert np.allclose(out.data, expected, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    x = t(rng.normal(size=(6, 9)) * 10)
    out = ad.softmax(x, axis=1)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(ad.NumericError):
        ad.softmax(t([np.inf, 0.0]), axis=0)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits_is_log_vocab():
    logits = t(np.zeros((5, 4)))
    loss = ad.cross_entropy(logits, [0, 1, 2, 3, 0])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_confident_logits_approach_zero():
    logits = np.full((3, 6), -1e4)
    for i, y in enumerate([2, 0, 5]):
        logits[i, y] = 1e4
    loss = ad.cross_entropy(t(logits), [2, 0, 5])
    assert loss.item() < 1e-12


def test_cross_entropy_against_decimal_lse():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(3, 5)) * 3
    tgt = [4, 0, 2]
    decimal.getcontext().prec = 50
    total = decimal.Decimal(0)
    for i, y in enumerate(tgt):
        lse = sum(decimal.Decimal(v).exp() for v in z[i]).ln()
        total += lse - decimal.Decimal(z[i, y])
    expected = float(total / 3)
    loss = ad.cross_entropy(t(z), tgt)
    assert abs(loss.item() - expected) < 1e-13


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(t(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------------------
# backward


def test_backward_of_sum_is_ones():
    x = t(np.arange(6.0).reshape(2, 3))
    gm = ad.backward(ad.sum_all(x))
    assert np.array_equal(gm.get(x), np.ones((2, 3)))


def test_backward_of_sum_of_squares_is_2x():
    x = t([[1.0, -2.0], [0.5, 3.0]])
    gm = ad.backward(ad.sum_all(ad.mul(x, x)))
    assert np.allclose(gm.get(x), 2 * x.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = t(np.ones(3))
    with pytest.raises(ad.ContractError):
        ad.backward(ad.softmax(x, axis=0))


def test_backward_twice_gives_identical_grads():
    x = t([[2.0, -1.0]])
    loss = ad.sum_all(ad.mul(x, x))
    g1 = ad.backward(loss).get(x).copy()
    g2 = ad.backward(loss).get(x)
    assert np.array_equal(g1, g2)


def test_backward_unreached_param_gets_zeros():
    x = t(np.ones(2))
    other = t(np.ones(3))
    gm = ad.backward(ad.sum_all(x), params=[x, other])
    assert np.array_equal(gm.get(other), np.zeros(3))


def test_backward_accumulates_shared_subexpression():
    x = t([3.0])
    y = ad.add(x, x)  # dy/dx = 2
    gm = ad.backward(ad.sum_all(y))
    assert np.array_equal(gm.get(x), [2.0])


# ---------------------------------------------------------------------------
# finite differences oracle


def test_finite_diff_of_sum_is_ones():
    x = t(np.arange(4.0))
    fd = ad.finite_diff_grad(lambda v: ad.sum_all(v), x)
    assert np.allclose(fd, 1.0, atol=1e-9)


def test_finite_diff_square_at_three():
    x = t([3.0])
    fd = ad.finite_diff_grad(lambda v: ad.sum_all(ad.mul(v, v)), x)
    assert abs(fd[0] - 6.0) < 1e-6


def test_finite_diff_detects_nondeterminism():
    rng = np.random.default_rng(0)
    x = t([1.0])
    with pytest.raises(ad.OracleError):
        ad.finite_diff_grad(lambda v: float(rng.random()), x)


# ---------------------------------------------------------------------------
# per-op gradient checks against the oracle


def _fd_check_unary(op, x, **kw):
    loss_fn = lambda: ad.sum_all(ad.mul(op(x, **kw), _weights(x, op, **kw)))
    gm = ad.backward(loss_fn())
    fd = ad.finite_diff_grad(lambda _t: loss_fn(), x)
    assert_grads_close(gm.get(x), fd, label=op.__name__)


def _weights(x, op, **kw):
    # fixed pseudo-random weights so the loss mixes all output elements
    out = op(x, **kw)
    rng = np.random.default_rng(99)
    return ad.Tensor(rng.normal(size=out.shape))


@pytest.mark.parametrize("seed", range(5))
def test_fd_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(3, 4)))
    _fd_check_unary(ad.gelu, x)
    _fd_check_unary(ad.softmax, x, axis=1)
    _fd_check_unary(ad.softmax, x, axis=0)
    _fd_check_unary(lambda v: ad.scale(v, -2.5), x)
    _fd_check_unary(lambda v: ad.reshape(v, (4, 3)), x)
    _fd_check_unary(lambda v: ad.transpose(v), x)
    _fd_check_unary(lambda v: ad.slice_cols(v, 1, 3), x)


@pytest.mark.parametrize("seed", range(5))
def test_fd_binary_and_structural_ops(seed):
    rng = np.random.default_rng(100 + seed)
    a = t(rng.normal(size=(3, 4)))
    b = t(rng.normal(size=(4, 2)))
    bias = t(rng.normal(size=2))
    row = t(rng.normal(size=4))
    idx = rng.integers(0, 3, size=5)

    params = {"a": a, "b": b, "bias": bias, "row": row}
    w = ad.Tensor(rng.normal(size=(3, 2)))
    w2 = ad.Tensor(rng.normal(size=(3, 4)))
    w3 = ad.Tensor(rng.normal(size=(5, 4)))

    def loss_fn():
        lin = ad.mul(ad.linear(a, b, bias), w)
        brd = ad.mul(ad.add(a, row), w2)
        gat = ad.mul(ad.take_rows(a, idx), w3)
        cat = ad.concat([a, brd], axis=0)
        return ad.add_n([ad.sum_all(lin), ad.sum_all(brd),
                         ad.sum_all(gat), ad.sum_all(cat)])

    check_param_grads(loss_fn, params)


@pytest.mark.parametrize("seed", range(5))
def test_fd_layer_norm(seed):
    rng = np.random.default_rng(200 + seed)
    x = t(rng.normal(size=(4, 6)))
    g = t(rng.normal(size=6) + 1.0)
    b = t(rng.normal(size=6))
    w = ad.Tensor(rng.normal(size=(4, 6)))

    def loss_fn():
        return ad.sum_all(ad.mul(ad.layer_norm(x, g, b), w))

    check_param_grads(loss_fn, {"x": x, "gain": g, "bias": b})


@pytest.mark.parametrize("seed", range(5))
def test_fd_cross_entropy(seed):
    rng = np.random.default_rng(300 + seed)
    z = t(rng.normal(size=(4, 7)) * 2)
    tgt = rng.integers(0, 7, size=4)

    def loss_fn():
        return ad.cross_entropy(z, tgt)

    check_param_grads(loss_fn, {"logits": z})


def test_embedding_scatter_add_backward():
    emb = t(np.arange(12.0).reshape(4, 3))
    out = ad.take_rows(emb, [1, 1, 3])
    gm = ad.backward(ad.sum_all(out))
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    assert np.array_equal(gm.get(emb), expected)


def test_frozen_parent_gets_no_gradient_entry():
    w = t(np.ones((2, 2)), rg=False)
    x = t(np.ones((2, 2)))
    gm = ad.backward(ad.sum_all(ad.matmul(x, w)))
    assert w not in gm
    assert x in gm
