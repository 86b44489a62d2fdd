"""
Tests for the dense tensor algebra and the reverse-mode tape.
"""
import math

import numpy as np
import pytest

from oscgnn.errors import ContractError, DimensionError, DomainError, TapeStateError
from oscgnn.tensor import (
    ComplexMatrix,
    RealTensor,
    Tape,
    add,
    atan2,
    backward,
    complex_mul,
    concat_cols,
    cos,
    cross_entropy,
    exp,
    hadamard,
    leaky_relu,
    magnitude,
    matmul,
    mean_squared_error,
    numerical_gradient,
    relative_error,
    row_sum,
    scale,
    segment_max,
    segment_mean,
    segment_softmax,
    sin,
    slice_cols,
    softmax_rows,
    sparse_matmul,
    sqrt,
    sum_all,
    take_rows,
)


def assert_gradient(fn, *params, tol=1e-6):
    """Tape gradient of the scalar fn() against central differences for every param."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    for p in params:
        numeric = numerical_gradient(fn, p)
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        assert relative_error(analytic, numeric) < tol, p.name


class TestRealTensor:
    """Construction and shape contracts."""

    def test_vector_becomes_row(self):
        t = RealTensor([1.0, 2.0, 3.0])
        assert t.shape == (1, 3)

    def test_rejects_three_dimensions(self):
        with pytest.raises(DimensionError):
            RealTensor(np.zeros((2, 2, 2)))

    def test_data_is_read_only(self):
        t = RealTensor([[1.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 2.0

    def test_assign_checks_shape(self):
        t = RealTensor([[1.0, 2.0]])
        with pytest.raises(DimensionError):
            t.assign(np.zeros((2, 1)))

    def test_item_needs_scalar(self):
        with pytest.raises(ContractError):
            RealTensor([[1.0, 2.0]]).item()


class TestOps:
    """Forward values of the op suite."""

    def test_matmul_identity(self):
        out = matmul(RealTensor(np.eye(2)), RealTensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_matmul_inner(self):
        assert matmul(RealTensor([[1, 2]]), RealTensor([[3], [4]])).item() == 11

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(DimensionError) as info:
            matmul(RealTensor(np.zeros((2, 3))), RealTensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(info.value)

    def test_add_broadcasts_row(self):
        out = add(RealTensor(np.zeros((3, 2))), RealTensor([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    def test_add_rejects_mismatch(self):
        with pytest.raises(DimensionError):
            add(RealTensor(np.zeros((3, 2))), RealTensor(np.zeros((2, 3))))

    def test_leaky_relu(self):
        out = leaky_relu(RealTensor([[-2.0, 3.0]]), 0.1)
        np.testing.assert_allclose(out.data, [[-0.2, 3.0]])

    def test_magnitude(self):
        assert magnitude(RealTensor([[3.0]]), RealTensor([[4.0]])).item() == 5.0

    def test_atan2_origin_is_zero(self):
        assert atan2(RealTensor([[0.0]]), RealTensor([[0.0]])).item() == 0.0

    def test_atan2_branch_is_positive_pi(self):
        assert atan2(RealTensor([[-0.0]]), RealTensor([[-1.0]])).item() == pytest.approx(math.pi)

    def test_sqrt_negative(self):
        with pytest.raises(DomainError):
            sqrt(RealTensor([[-1.0]]))

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax_rows(RealTensor(rng.standard_normal((4, 5))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_segment_softmax_sums_per_segment(self, rng):
        seg = np.array([0, 0, 1, 1, 1, 2])
        out = segment_softmax(RealTensor(rng.standard_normal((6, 2))), seg, 3)
        sums = np.zeros((3, 2))
        np.add.at(sums, seg, out.data)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_segment_mean_and_max(self):
        x = RealTensor([[1.0], [3.0], [5.0]])
        seg = np.array([0, 0, 1])
        np.testing.assert_allclose(segment_mean(x, seg, 2).data, [[2.0], [5.0]])
        np.testing.assert_allclose(segment_max(x, seg, 2).data, [[3.0], [5.0]])

    def test_sparse_matmul(self):
        rows, cols, vals = np.array([0, 1]), np.array([1, 0]), np.array([2.0, 3.0])
        out = sparse_matmul(rows, cols, vals, 2, RealTensor([[1.0], [10.0]]))
        np.testing.assert_allclose(out.data, [[20.0], [3.0]])

    def test_cross_entropy_uniform(self):
        logits = RealTensor(np.zeros((4, 3)))
        assert cross_entropy(logits, np.array([0, 1, 2, 0])).item() == pytest.approx(math.log(3))

    def test_cross_entropy_confident(self):
        logits = RealTensor([[20.0, 0.0]])
        assert cross_entropy(logits, np.array([0])).item() <= 1e-6

    def test_mse_zero_at_target(self):
        assert mean_squared_error(RealTensor([[1.0], [2.0]]), np.array([1.0, 2.0])).item() == 0.0

    def test_complex_mul(self):
        a = ComplexMatrix.from_numpy(np.array([[1 + 2j]]))
        b = ComplexMatrix.from_numpy(np.array([[3 + 4j]]))
        assert complex_mul(a, b).to_numpy()[0, 0] == -5 + 10j

    def test_complex_matmul_matches_numpy(self, rng):
        a = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
        b = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        out = complex_mul(ComplexMatrix.from_numpy(a), ComplexMatrix.from_numpy(b), mode="matmul")
        np.testing.assert_allclose(out.to_numpy(), a @ b, atol=1e-12)


class TestTape:
    """Recording and backward-pass contracts."""

    def test_matmul_gradients(self):
        a = RealTensor([[1.0, 2.0]], requires_grad=True)
        b = RealTensor([[3.0], [4.0]], requires_grad=True)
        with Tape():
            loss = matmul(a, b)
            backward(loss)
        np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
        np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])

    def test_backward_runs_once(self):
        a = RealTensor([[2.0]], requires_grad=True)
        with Tape() as tape:
            loss = hadamard(a, a)
        tape.backward(loss)
        with pytest.raises(TapeStateError):
            tape.backward(loss)

    def test_loss_must_be_scalar(self):
        a = RealTensor([[1.0, 2.0]], requires_grad=True)
        with Tape() as tape:
            out = scale(a, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_untracked_ops_are_not_recorded(self):
        with Tape() as tape:
            add(RealTensor([[1.0]]), RealTensor([[2.0]]))
        assert len(tape) == 0

    def test_leaf_gradients_accumulate_across_tapes(self):
        a = RealTensor([[1.0]], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = scale(a, 3.0)
                tape.backward(loss)
        assert a.grad[0, 0] == 6.0

    def test_reused_node_sums_contributions(self):
        a = RealTensor([[3.0]], requires_grad=True)
        with Tape() as tape:
            loss = add(hadamard(a, a), a)
            tape.backward(loss)
        assert a.grad[0, 0] == 7.0


class TestGradients:
    """Tape gradients against central differences."""

    def test_elementwise_chain(self, rng):
        x = RealTensor(rng.standard_normal((3, 4)), requires_grad=True, name="x")
        assert_gradient(lambda: sum_all(hadamard(sin(x), exp(scale(cos(x), 0.5)))), x)

    def test_matmul_and_broadcast(self, rng):
        a = RealTensor(rng.standard_normal((4, 3)), requires_grad=True, name="a")
        w = RealTensor(rng.standard_normal((3, 2)), requires_grad=True, name="w")
        b = RealTensor(rng.standard_normal((1, 2)), requires_grad=True, name="b")
        assert_gradient(lambda: sum_all(hadamard(add(matmul(a, w), b), add(matmul(a, w), b))), a, w, b)

    def test_polar_ops(self, rng):
        re = RealTensor(rng.standard_normal((3, 2)), requires_grad=True, name="re")
        im = RealTensor(rng.standard_normal((3, 2)), requires_grad=True, name="im")
        assert_gradient(lambda: sum_all(add(magnitude(re, im), sin(atan2(im, re)))), re, im)

    def test_indexing_and_segments(self, rng):
        x = RealTensor(rng.standard_normal((5, 3)), requires_grad=True, name="x")
        seg = np.array([0, 1, 1, 2, 2, 2])
        idx = np.array([0, 4, 2, 2, 1, 3])

        def fn():
            gathered = take_rows(x, idx)
            att = segment_softmax(row_sum(gathered), seg, 3)
            mixed = concat_cols([slice_cols(gathered, 0, 2), hadamard(slice_cols(gathered, 2, 3), att)])
            return sum_all(hadamard(segment_mean(mixed, seg, 3), segment_mean(mixed, seg, 3)))

        assert_gradient(fn, x)

    def test_cross_entropy(self, rng):
        logits = RealTensor(rng.standard_normal((6, 3)), requires_grad=True, name="logits")
        labels = np.array([0, 2, 1, 1, 0, 2])
        assert_gradient(lambda: cross_entropy(logits, labels), logits)
