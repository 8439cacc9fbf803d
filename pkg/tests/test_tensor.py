import math

import numpy as np
import pytest

from lfacon import tensor
from lfacon.errors import ContractError, ShapeError, ValidationError
from lfacon.gradcheck import grad_check


def test_create_row_major_layout():
    v = tensor.create((2, 3), [1, 2, 3, 4, 5, 6])
    assert v.shape == (2, 3)
    assert v.data.dtype == np.float32
    np.testing.assert_array_equal(v.data, [[1, 2, 3], [4, 5, 6]])


def test_create_rejects_wrong_count():
    with pytest.raises(ShapeError):
        tensor.create((2, 2), [1, 2, 3])


def test_create_rejects_non_finite():
    with pytest.raises(ValidationError):
        tensor.create((2,), [1.0, float("nan")])
    with pytest.raises(ValidationError):
        tensor.create((2,), [1.0, float("inf")])


def test_create_rejects_zero_extent():
    with pytest.raises(ShapeError):
        tensor.create((2, 0), [])


def test_matmul_known_product():
    a = tensor.create((2, 2), [1, 2, 3, 4])
    b = tensor.create((2, 1), [1, 1])
    out = tensor.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_identity_preserves():
    rng = np.random.default_rng(7)
    a = tensor.leaf(rng.normal(0, 1, (3, 3)))
    eye = tensor.leaf(np.eye(3))
    np.testing.assert_array_equal(tensor.matmul(a, eye).data, a.data)


def test_matmul_shape_mismatch():
    a = tensor.create((2, 3), range(6))
    b = tensor.create((2, 3), range(6))
    with pytest.raises(ShapeError):
        tensor.matmul(a, b)


def test_matmul_gradients():
    # d(sum(A@B))/dA = 1 @ B^T, checked against a tiny hand case
    a = tensor.create((1, 2), [1, 2], requires_grad=True)
    b = tensor.create((2, 1), [3, 5], requires_grad=True)
    loss = tensor.sum_all(tensor.matmul(a, b))
    tensor.backward(loss)
    np.testing.assert_allclose(a.grad, [[3, 5]])
    np.testing.assert_allclose(b.grad, [[1], [2]])


def test_softmax_rows_known_values():
    # logits [0, ln 2] give probabilities [1/3, 2/3]
    x = tensor.create((1, 2), [0.0, math.log(2.0)])
    s = tensor.softmax_rows(x)
    np.testing.assert_allclose(s.data, [[1 / 3, 2 / 3]], atol=1e-7)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = tensor.leaf(rng.normal(0, 10, (6, 9)))
    s = tensor.softmax_rows(x)
    np.testing.assert_allclose(s.data.sum(axis=1), np.ones(6), atol=1e-6)


def test_softmax_rows_shift_invariant():
    # quarter-grid logits stay exact in float32 after the +100 shift
    rng = np.random.default_rng(4)
    base = (rng.integers(-8, 9, (2, 5)) * 0.25).astype(np.float32)
    s1 = tensor.softmax_rows(tensor.leaf(base))
    s2 = tensor.softmax_rows(tensor.leaf(base + 100.0))
    np.testing.assert_allclose(s1.data, s2.data, atol=1e-6)


def test_softmax_extreme_logits_finite():
    x = tensor.leaf(np.array([[1e4, -1e4, 0.0]], dtype=np.float32))
    s = tensor.softmax_rows(x)
    assert np.all(np.isfinite(s.data))
    np.testing.assert_allclose(s.data.sum(axis=1), [1.0], atol=1e-6)


def test_add_broadcast_and_unbroadcast():
    a = tensor.create((2, 3), range(6), requires_grad=True)
    b = tensor.create((1, 3), [10, 20, 30], requires_grad=True)
    loss = tensor.sum_all(tensor.add(a, b))
    tensor.backward(loss)
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, 2 * np.ones((1, 3)))


def test_incompatible_broadcast_rejected():
    a = tensor.create((2, 3), range(6))
    b = tensor.create((2, 2), range(4))
    with pytest.raises(ShapeError):
        tensor.add(a, b)


def test_mul_gradients():
    a = tensor.create((2,), [2, 3], requires_grad=True)
    b = tensor.create((2,), [5, 7], requires_grad=True)
    loss = tensor.sum_all(tensor.mul(a, b))
    tensor.backward(loss)
    np.testing.assert_array_equal(a.grad, [5, 7])
    np.testing.assert_array_equal(b.grad, [2, 3])


def test_fanout_accumulates():
    # x used three times: d(sum(x+x+x))/dx = 3
    x = tensor.create((2,), [1, 2], requires_grad=True)
    loss = tensor.sum_all(tensor.add(tensor.add(x, x), x))
    tensor.backward(loss)
    np.testing.assert_array_equal(x.grad, [3, 3])


def test_reshape_round_trip_grad():
    x = tensor.create((2, 3), range(6), requires_grad=True)
    y = tensor.reshape(x, (3, 2))
    loss = tensor.sum_all(tensor.mul(y, y))
    tensor.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_transpose_grad_routes_back():
    x = tensor.create((2, 3), range(6), requires_grad=True)
    w = tensor.leaf(np.arange(6, dtype=np.float32).reshape(3, 2))
    loss = tensor.sum_all(tensor.mul(tensor.transpose(x, (1, 0)), w))
    tensor.backward(loss)
    np.testing.assert_array_equal(x.grad, w.data.T)


def test_concat_splits_gradient():
    a = tensor.create((2, 1), [1, 2], requires_grad=True)
    b = tensor.create((2, 2), [3, 4, 5, 6], requires_grad=True)
    out = tensor.concat([a, b], axis=1)
    assert out.shape == (2, 3)
    w = tensor.leaf(np.arange(6, dtype=np.float32).reshape(2, 3))
    tensor.backward(tensor.sum_all(tensor.mul(out, w)))
    np.testing.assert_array_equal(a.grad, [[0], [3]])
    np.testing.assert_array_equal(b.grad, [[1, 2], [4, 5]])


def test_cols_slice_and_grad():
    x = tensor.create((2, 4), range(8), requires_grad=True)
    y = tensor.cols(x, 1, 3)
    np.testing.assert_array_equal(y.data, [[1, 2], [5, 6]])
    tensor.backward(tensor.sum_all(y))
    np.testing.assert_array_equal(x.grad, [[0, 1, 1, 0], [0, 1, 1, 0]])


def test_cols_out_of_range():
    x = tensor.create((2, 4), range(8))
    with pytest.raises(ShapeError):
        tensor.cols(x, 2, 5)


def test_rows_gather_with_repeats():
    x = tensor.create((3, 2), range(6), requires_grad=True)
    y = tensor.rows(x, [0, 2, 0])
    np.testing.assert_array_equal(y.data, [[0, 1], [4, 5], [0, 1]])
    tensor.backward(tensor.sum_all(y))
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_sum_all_shape_and_grad():
    x = tensor.create((2, 2), [1, 2, 3, 4], requires_grad=True)
    s = tensor.sum_all(x)
    assert s.shape == (1,)
    assert s.item() == 10.0
    tensor.backward(s)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_rejects_non_scalar():
    x = tensor.create((2,), [1, 2], requires_grad=True)
    with pytest.raises(ContractError):
        tensor.backward(x)


def test_backward_twice_doubles_leaf_grad():
    # interior grads are freed during the sweep, so a second sweep adds
    # exactly one more contribution at each leaf
    x = tensor.create((2,), [1, 2], requires_grad=True)
    loss = tensor.sum_all(tensor.scale(x, 3.0))
    tensor.backward(loss)
    first = x.grad.copy()
    tensor.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    tensor.zero_grads([x])
    assert x.grad is None


def test_no_grad_leaves_untouched():
    a = tensor.create((2,), [1, 2], requires_grad=False)
    b = tensor.create((2,), [3, 4], requires_grad=True)
    loss = tensor.sum_all(tensor.mul(a, b))
    tensor.backward(loss)
    assert a.grad is None
    np.testing.assert_array_equal(b.grad, [1, 2])


def test_operator_sugar_matches_functions():
    a = tensor.create((2,), [1, 2])
    b = tensor.create((2,), [3, 4])
    np.testing.assert_array_equal((a + b).data, [4, 6])
    np.testing.assert_array_equal((a - b).data, [-2, -2])
    np.testing.assert_array_equal((a * b).data, [3, 8])
    np.testing.assert_array_equal((a * 2.0).data, [2, 4])


def test_grad_check_matmul_ten_seeds():
    # sign structure (a by column, b by row, w positive) keeps every
    # derivative a same-sign sum, clear of the 32-bit noise floor
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a_sign = rng.choice([-1.0, 1.0], (1, 4))
        b_sign = rng.choice([-1.0, 1.0], (4, 1))
        a = tensor.leaf(rng.uniform(0.05, 0.15, (3, 4)) * a_sign, requires_grad=True)
        b = tensor.leaf(rng.uniform(0.05, 0.3, (4, 2)) * b_sign, requires_grad=True)
        w = tensor.leaf(rng.uniform(5.0, 15.0, (3, 2)))

        def loss():
            return tensor.sum_all(tensor.mul(tensor.matmul(a, b), w))

        report = grad_check(loss, [a, b], eps=1e-3, tolerance=1e-3)
        assert report.passed, f"seed {seed}: {report.line()}"


def test_grad_check_softmax_ten_seeds():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = tensor.leaf(rng.uniform(-0.75, 0.75, (3, 2)), requires_grad=True)
        w = tensor.leaf(np.tile([10.0, -10.0], (3, 1)))

        def loss():
            return tensor.sum_all(tensor.mul(tensor.softmax_rows(x), w))

        report = grad_check(loss, [x], eps=1e-3, tolerance=1e-3)
        assert report.passed, f"seed {seed}: {report.line()}"
