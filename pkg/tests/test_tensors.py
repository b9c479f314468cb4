import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mim import tensors as T
from mim.errors import ContractError, DegenerateInputError, DomainError, ShapeError
from mim.gradcheck import OP_CASES, check_ops
from mim.tensors import ParamSet, Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def vec(min_size=1, max_size=6):
    return arrays(np.float64, st.integers(min_size, max_size), elements=finite)


@pytest.fixture(autouse=True)
def float64():
    with T.default_dtype(np.float64):
        yield


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0])).data, [0.26894, 0.73106], atol=1e-5)


@given(vec(), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(-1), 1.0)


def test_masked_softmax_all_masked_row_is_an_error():
    with pytest.raises(ContractError):
        T.softmax(Tensor(np.ones((2, 3))), mask=np.array([[True, True, False], [False, False, False]]))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor([5.0, 5, 5, 5]), one, zero).data, np.zeros(4))
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)
    bias = Tensor([0.5, -2.0, 3.0, 1.0])
    out = T.layer_norm(Tensor([3.0, 1.0, -4.0, 2.0]), zero, bias)
    np.testing.assert_array_equal(out.data, bias.data)


def test_layer_norm_guard():
    with pytest.raises(DomainError):
        T.layer_norm(Tensor([[2.0]]), Tensor([1.0]), Tensor([0.0]), eps=0.0)


def test_elementwise_examples():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    np.testing.assert_array_equal(T.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1, 2, 3])
    assert T.l2_norm(Tensor([3.0, 4.0])).data == pytest.approx(5.0)
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))


def test_cosine_examples():
    assert T.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data == pytest.approx(0.0)
    assert T.cosine(Tensor([2.0, 2.0]), Tensor([1.0, 1.0])).data == pytest.approx(1.0)
    assert T.cosine(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).data == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(DegenerateInputError):
        T.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@given(vec(2, 6), vec(2, 6), st.floats(0.1, 10))
def test_cosine_bounded_and_scale_invariant(a, b, k):
    if len(a) != len(b) or np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = T.cosine(Tensor(a), Tensor(b)).data
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert T.cosine(Tensor(a * k), Tensor(b)).data == pytest.approx(c, abs=1e-9)


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([4.0, 5.0], requires_grad=True)
    T.backward(T.sum(y * y))
    np.testing.assert_array_equal(x.grad, [0, 0])

    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_gradient_accumulates_over_reused_nodes():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    T.backward(T.sum(y + y * x))
    # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [16.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_adam_first_step():
    w = Tensor([0.0], requires_grad=True)
    params = ParamSet({"w": w})
    w.grad = np.array([1.0])
    T.adam_step(params, lr=0.1)
    assert w.data[0] == pytest.approx(-0.1, abs=1e-6)


def test_adam_zero_gradient_and_symmetry():
    a, b = Tensor([0.3, -0.2], requires_grad=True), Tensor([0.3, -0.2], requires_grad=True)
    params = ParamSet({"a": a, "b": b})
    before = a.data.copy()
    for g in (np.zeros(2), np.zeros(2)):
        a.grad, b.grad = g.copy(), g.copy()
        T.adam_step(params)
    np.testing.assert_array_equal(a.data, before)
    for step in range(5):
        g = np.array([0.5, -1.0]) * (step + 1)
        a.grad, b.grad = g.copy(), g.copy()
        T.adam_step(params)
    np.testing.assert_array_equal(a.data, b.data)


def test_clip_gradients():
    w = Tensor(np.zeros(3), requires_grad=True)
    params = ParamSet({"w": w})
    w.grad = np.array([-2.0, 0.5, 3.0])
    T.clip_gradients(params, -1.0, 1.0)
    np.testing.assert_array_equal(w.grad, [-1.0, 0.5, 1.0])
    w.grad = np.array([0.2, -0.9, 0.0])
    T.clip_gradients(params)
    np.testing.assert_array_equal(w.grad, [0.2, -0.9, 0.0])
    w.grad = np.zeros(3)
    T.clip_gradients(params)
    np.testing.assert_array_equal(w.grad, np.zeros(3))
    with pytest.raises(ContractError):
        T.clip_gradients(params, 1.0, 1.0)


def test_finite_diff_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert T.finite_diff_check(lambda t: T.sum(t * t), x) < 1e-5
    assert T.finite_diff_check(lambda t: T.sum(t * 0.0) + 3.0, x) < 1e-5


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    errs = check_ops(trials=10, seed=7, ops=[name])
    assert errs[name] < 1e-4, errs


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_composite_gradient_matches_finite_differences(x):
    def f(t):
        h = T.tanh(T.matmul(t, Tensor(np.linspace(-1, 1, 8).reshape(4, 2))))
        return T.sum(T.softmax(h) * T.expand(Tensor([[1.0, -2.0]]), (3, 2)))

    _, analytic, numeric = T.gradient_errors(f, Tensor(x, requires_grad=True))
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_checkpoint_round_trip(tmp_path):
    # the format stores float32, so use float32-representable values
    params = ParamSet({"a": Tensor(np.arange(6.0).reshape(2, 3)), "b.c": Tensor([np.float32(math.pi)])})
    T.save_checkpoint(tmp_path / "p.ckpt", params)
    loaded = T.load_checkpoint(tmp_path / "p.ckpt")
    assert set(loaded) == {"a", "b.c"}
    np.testing.assert_array_equal(loaded["a"], params["a"].data)
    np.testing.assert_array_equal(loaded["b.c"], params["b.c"].data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(Exception):
        T.load_checkpoint(path)
