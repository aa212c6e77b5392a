import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurotype import ndcore as nd
from neurotype.errors import ContractError, LabelError, NonFiniteError, ShapeError

from conftest import central_difference, relative_error


def leaf(a):
    return nd.Tensor(a, requires_grad=True)


def test_affine_identity():
    out = nd.affine(nd.Tensor([[1, 2]]), nd.Tensor(np.eye(2)), nd.Tensor([0, 0]))
    assert out.data.tolist() == [[1, 2]]


def test_affine_zero_weights_gives_bias():
    out = nd.affine(nd.Tensor([[1, 2]]), nd.Tensor(np.zeros((2, 2))), nd.Tensor([3, 4]))
    assert out.data.tolist() == [[3, 4]]


def test_affine_matches_triple_loop(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    expected = np.zeros((3, 2))
    for n in range(3):
        for h in range(2):
            acc = b[h]
            for d in range(4):
                acc += x[n, d] * W[d, h]
            expected[n, h] = acc
    np.testing.assert_allclose(nd.affine(x, W, b).data, expected, rtol=0, atol=1e-12)


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        nd.affine(nd.Tensor(np.ones((1, 3))), nd.Tensor(np.ones((2, 2))), nd.Tensor(np.ones(2)))


def test_affine_gradients(rng):
    x, W, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2))
    nd.backward(nd.sum_(nd.tanh_act(nd.affine(x, W, b))))
    numeric = central_difference(
        lambda: np.tanh(x.data @ W.data + b.data).sum(), [x.data, W.data, b.data])
    for t, g in zip((x, W, b), numeric):
        assert relative_error(t.grad, g) < 1e-8


def test_tanh_values_and_gradient():
    x = leaf([0.0])
    y = nd.tanh_act(x)
    assert y.data[0] == 0.0
    nd.backward(nd.sum_(y))
    assert x.grad[0] == 1.0


def test_tanh_gradient_matches_finite_difference():
    x = leaf([0.7])
    nd.backward(nd.sum_(nd.tanh_act(x)))
    h = 1e-5
    numeric = (math.tanh(0.7 + h) - math.tanh(0.7 - h)) / (2 * h)
    assert abs(x.grad[0] - numeric) / abs(numeric) < 1e-6


def test_cross_entropy_uniform_logits():
    loss = nd.softmax_cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 4]))
    assert loss.item() == pytest.approx(math.log(5), abs=1e-15)
    assert math.log(5) == pytest.approx(1.60944, abs=1e-5)


def test_cross_entropy_large_margin_goes_to_zero():
    logits = np.array([[0.0, 50.0, 0.0]])
    assert nd.softmax_cross_entropy(logits, np.array([1])).item() < 1e-20


def test_cross_entropy_hand_case():
    logits = np.array([[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]])
    labels = np.array([2, 0])
    expected = 0.0
    for row, lab in zip(logits, labels):
        expected += -(row[lab] - math.log(sum(math.exp(v) for v in row)))
    expected /= 2
    assert nd.softmax_cross_entropy(logits, labels).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = leaf(rng.normal(size=(3, 4)))
    labels = np.array([0, 3, 1])
    nd.backward(nd.softmax_cross_entropy(logits, labels))
    p = nd.softmax(logits.data)
    expected = (p - np.eye(4)[labels]) / 3
    np.testing.assert_allclose(logits.grad, expected, atol=1e-15)


@pytest.mark.parametrize("labels", [[0, 3], [-1, 0]])
def test_cross_entropy_label_error(labels):
    with pytest.raises(LabelError):
        nd.softmax_cross_entropy(np.zeros((2, 3)), np.array(labels))


def test_backward_polynomial():
    x = leaf([3.0])
    grads = nd.backward(nd.sum_(nd.square(x)))
    assert grads[x][0] == 6.0


def test_backward_constant_loss_gives_zero_grads():
    x = leaf([1.0, 2.0])
    loss = nd.add(nd.mul(nd.sum_(x), 0.0), 5.0)
    nd.backward(loss)
    assert np.all(x.grad == 0)


def test_backward_accumulates_until_zeroed():
    x = leaf([3.0])
    nd.backward(nd.sum_(nd.square(x)))
    nd.backward(nd.sum_(nd.square(x)))
    assert x.grad[0] == 12.0
    nd.zero_grads([x])
    nd.backward(nd.sum_(nd.square(x)))
    assert x.grad[0] == 6.0


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        nd.backward(nd.square(x))


def test_two_layer_mlp_gradients(rng):
    x = rng.normal(size=(5, 4))
    labels = np.array([0, 1, 2, 1, 0])
    layers = nd.init_mlp(rng, (4, 6, 3))
    params = nd.flatten(layers)
    nd.backward(nd.softmax_cross_entropy(nd.mlp(layers, x), labels))
    numeric = central_difference(
        lambda: nd.softmax_cross_entropy(nd.mlp(layers, x), labels).item(),
        [p.data for p in params])
    for p, g in zip(params, numeric):
        assert relative_error(p.grad, g) < 1e-4


def test_fan_out_sums_both_contributions(rng):
    x = leaf(rng.normal(size=(2, 3)))
    W = leaf(rng.normal(size=(3, 3)))

    def build():
        h = nd.tanh_act(nd.matmul(x, W))
        return nd.sum_(nd.mul(h, nd.square(h)) + nd.matmul(h, nd.transpose(W)))

    nd.backward(build())
    numeric = central_difference(lambda: build().item(), [x.data, W.data])
    assert relative_error(x.grad, numeric[0]) < 1e-6
    assert relative_error(W.grad, numeric[1]) < 1e-6


def test_clip01_subgradient_convention():
    x = leaf([-0.5, 0.0, 0.3, 1.0, 1.5])
    nd.backward(nd.sum_(nd.hard_clip01(x)))
    assert x.grad.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_normal_cdf_gradient():
    x = leaf([-1.0, 0.0, 0.8])
    nd.backward(nd.sum_(nd.normal_cdf(x)))
    np.testing.assert_allclose(x.grad, np.exp(-0.5 * x.data ** 2) / math.sqrt(2 * math.pi))


def test_reverse_gradient_is_identity_forward():
    x = leaf([1.0, -2.0])
    y = nd.reverse_gradient(x, 0.5)
    assert y.data.tolist() == [1.0, -2.0]
    nd.backward(nd.sum_(nd.mul(y, np.array([2.0, -4.0]))))
    assert x.grad.tolist() == [-1.0, 2.0]


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        nd.tanh_act(nd.Tensor([np.nan]))


def test_broadcast_gradients(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(4,)))
    nd.backward(nd.sum_(nd.square(nd.sub(a, b))))
    np.testing.assert_allclose(b.grad, -2 * (a.data - b.data).sum(axis=0))


def test_forward_is_deterministic(rng):
    layers = nd.init_mlp(rng, (4, 5, 2))
    x = rng.normal(size=(3, 4))
    assert np.array_equal(nd.mlp(layers, x).data, nd.mlp(layers, x).data)


COMPOSITES = {
    "affine_tanh": lambda x, w: nd.tanh_act(nd.affine(x, w, nd.Tensor(np.zeros(w.shape[1])))),
    "mul_square": lambda x, w: nd.mul(nd.square(x), nd.sum_(w)),
    "normal_cdf": lambda x, w: nd.normal_cdf(nd.matmul(x, w)),
    "mean_axis": lambda x, w: nd.mean(nd.matmul(x, w), axis=0),
    "grl": lambda x, w: nd.reverse_gradient(nd.matmul(x, w), 0.7),
}


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), name=st.sampled_from(sorted(COMPOSITES)))
def test_composite_gradients_match_finite_differences(seed, name):
    rng = np.random.default_rng(seed)
    x, w = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    weights = rng.normal(size=COMPOSITES[name](x, w).shape)

    def loss():
        return nd.sum_(nd.mul(COMPOSITES[name](x, w), weights))

    nd.backward(loss())
    numeric = central_difference(lambda: loss().item(), [x.data, w.data])
    if name == "grl":
        numeric = [-0.7 * g for g in numeric]
    for t, g in zip((x, w), numeric):
        assert relative_error(t.grad, g) < 1e-4
