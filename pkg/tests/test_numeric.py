import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asc import numeric as nm
from asc.errors import ContractError, DimensionError
from asc.numeric import Tensor


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- forward values ---------------------------------------------------------

def test_matmul_identity_and_hand_values(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(nm.matmul(np.eye(3), x).data, x)
    out = nm.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_sigmoid_values():
    assert nm.sigmoid(0.0).item() == 0.5
    assert abs(nm.sigmoid(40.0).item() - 1.0) <= 1e-12
    assert nm.sigmoid(-800.0).item() >= 0.0


def test_l2_normalize_rows():
    np.testing.assert_allclose(nm.l2_normalize_rows([[3.0, 4.0]]).data, [[0.6, 0.8]])
    z = nm.l2_normalize_rows(np.zeros((1, 4)), eps=1e-12)
    assert np.all(z.data == 0.0)
    x = np.random.default_rng(0).normal(size=(6, 8))
    norms = np.linalg.norm(nm.l2_normalize_rows(x).data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_softmax_uniform_and_masked():
    out = nm.softmax_rows(np.full((2, 5), 3.7))
    np.testing.assert_allclose(out.data, 0.2)
    mask = np.array([True, True, False, False])
    out = nm.softmax_rows(np.zeros((1, 4)), mask=mask)
    np.testing.assert_array_equal(out.data, [[0.5, 0.5, 0.0, 0.0]])
    out = nm.softmax_rows(np.zeros((1, 3)), mask=np.zeros(3, bool))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_moments(rng):
    x = rng.uniform(-1, 1, size=(4, 6))
    y = nm.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)


def test_broadcast_error():
    with pytest.raises(DimensionError):
        nm.add(np.ones((2, 3)), np.ones((4,)))


def test_non_finite_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        nm.scale(np.array([1e308]), 10.0)


# -- backward ---------------------------------------------------------------

def test_backward_sum_and_square(rng):
    x = rand(rng, 3, 4)
    nm.backward(nm.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x = rand(rng, 5)
    nm.backward(nm.sum(nm.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_over_reuse(rng):
    x = rand(rng, 3)
    y = nm.add(nm.scale(x, 2.0), nm.mul(x, x))
    nm.backward(nm.sum(y))
    np.testing.assert_allclose(x.grad, 2.0 + 2 * x.data)


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        nm.backward(rand(rng, 2, 2))


def test_record_is_topological_and_cleared(rng):
    x = rand(rng, 2, 3)
    w = rand(rng, 3, 2)
    loss = nm.sum(nm.sigmoid(nm.matmul(x, w)))
    rec = nm.computation_record(loss)
    assert [r.op for r in rec] == ["matmul", "sigmoid", "sum"]
    produced = set()
    leaves = {id(x), id(w)}
    for r in rec:
        assert all(i in produced or i in leaves for i in r.inputs)
        produced.add(r.output)
    nm.backward(loss)
    assert nm.computation_record(loss) == []


def test_no_grad_records_nothing(rng):
    x = rand(rng, 2)
    with nm.no_grad():
        y = nm.sigmoid(x)
    assert not y.requires_grad and y.is_leaf


def test_finite_diff_trivial():
    np.testing.assert_allclose(nm.finite_diff(nm.sum, np.ones((2, 3))), 1.0, atol=1e-9)
    g = nm.finite_diff(lambda t: nm.sum(nm.mul(t, t)), np.array([3.0]), h=1e-5)
    assert abs(g[0] - 6.0) <= 1e-6


OPS = {
    "add": (lambda a, b: nm.sum(nm.mul(nm.add(a, b), nm.add(a, b))), [(4, 6), (6,)]),
    "sub": (lambda a, b: nm.sum(nm.mul(nm.sub(a, b), a)), [(4, 6), (4, 6)]),
    "scale": (lambda a: nm.sum(nm.mul(nm.scale(a, -1.7), a)), [(4, 6)]),
    "matmul": (lambda a, b: nm.sum(nm.sigmoid(nm.matmul(a, b))), [(5, 4), (4, 3)]),
    "batched_matmul": (lambda a, b: nm.sum(nm.sigmoid(nm.matmul(a, b))), [(2, 5, 4), (4, 3)]),
    "sigmoid": (lambda a: nm.sum(nm.mul(nm.sigmoid(a), a)), [(4, 4)]),
    "gelu": (lambda a: nm.sum(nm.mul(nm.gelu(a), a)), [(4, 6)]),
    "softmax_rows": (lambda a, b: nm.sum(nm.mul(nm.softmax_rows(a), b)), [(4, 6), (4, 6)]),
    "layer_norm": (lambda a, b: nm.sum(nm.mul(nm.layer_norm(a), b)), [(4, 6), (4, 6)]),
    "l2_normalize_rows": (lambda a, b: nm.sum(nm.mul(nm.l2_normalize_rows(a), b)), [(6, 8), (6, 8)]),
    "mean_rows": (lambda a: nm.sum(nm.mul(nm.mean_rows(a), nm.mean_rows(a))), [(4, 6)]),
    "transpose": (lambda a, b: nm.sum(nm.mul(nm.transpose(a), b)), [(4, 6), (6, 4)]),
    "reshape": (lambda a, b: nm.sum(nm.mul(nm.reshape(a, (6, 4)), b)), [(4, 6), (6, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    f, shapes = OPS[name]
    inputs = [rand(rng, *s) for s in shapes]
    assert nm.gradcheck(f, inputs, h=1e-5) <= 1e-4


def test_masked_softmax_gradient(rng):
    mask = rng.uniform(size=(4, 6)) > 0.3
    mask[:, 0] = True
    a, b = rand(rng, 4, 6), rand(rng, 4, 6)
    err = nm.gradcheck(lambda x, y: nm.sum(nm.mul(nm.softmax_rows(x, mask), y)), [a, b])
    assert err <= 1e-4


def test_random_mlp_self_consistency(rng):
    x = rand(rng, 5, 4)
    w1, w2 = rand(rng, 4, 8), rand(rng, 8, 3)

    def f(x, w1, w2):
        h = nm.gelu(nm.matmul(x, w1))
        return nm.mean(nm.sigmoid(nm.matmul(h, w2)))

    assert nm.gradcheck(f, [x, w1, w2]) <= 1e-4


def test_deterministic_values_and_grads():
    def run():
        r = np.random.default_rng(7)
        x, w = rand(r, 4, 6), rand(r, 6, 6)
        loss = nm.sum(nm.layer_norm(nm.gelu(nm.matmul(x, w))))
        nm.backward(loss)
        return loss.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


finite_mats = arrays(np.float64, (3, 5), elements=st.floats(-10, 10))


@settings(max_examples=40, deadline=None)
@given(finite_mats)
def test_all_ops_stay_finite(x):
    outs = [
        nm.sigmoid(x), nm.gelu(x), nm.softmax_rows(x), nm.layer_norm(x),
        nm.l2_normalize_rows(x), nm.mean_rows(x), nm.transpose(x),
        nm.matmul(x, nm.transpose(x)), nm.add(x, x), nm.scale(x, 3.0),
    ]
    for o in outs:
        assert np.all(np.isfinite(o.data))
