######################################################################################################
# FactorXLite - A factorization-centralization toolkit for rehearsal-free continual learning
# Copyright (C) 2025 FactorXLite contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.
######################################################################################################


import math

import numpy as np
import pytest

from factorxlite.LearningAPI.p000_utility import ContractError, DimensionError
from factorxlite.LearningAPI import p001_tensor as T
from factorxlite.LearningAPI.p001_tensor import ComputeGraph, Tensor, backward, no_grad

from support import numeric_grad


def _param(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _check_gradient(build_loss, tensor, seed=0, n_coords=16):
    """Compare backward() against central differences for one float64 tensor."""
    tensor.grad = None
    loss = build_loss()
    backward(loss)
    analytic = tensor.grad.reshape(-1).copy()
    tensor.grad = None

    rng = np.random.default_rng(seed)
    indices = rng.choice(tensor.size, size=min(n_coords, tensor.size), replace=False)

    def value():
        with no_grad():
            return float(build_loss().item())

    numeric = numeric_grad(value, tensor, indices)
    np.testing.assert_allclose(analytic[indices], numeric, rtol=1e-3, atol=1e-6)


class TestMatmul:
    def test_identity_leaves_matrix_unchanged(self):
        # Arrange
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))

        # Act
        out = T.matmul(a, eye)

        # Assert
        np.testing.assert_array_equal(out.numpy(), [[1.0, 2.0], [3.0, 4.0]])

    def test_known_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.numpy(), [[19.0, 22.0], [43.0, 50.0]])

    def test_zero_operand_gives_zero(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.numpy(), np.zeros((2, 2)))

    def test_inner_dimension_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.numpy(), expected, rtol=1e-12)

    def test_float32_storage_is_preserved(self):
        out = T.matmul(Tensor(np.ones((2, 2), dtype=np.float32)), Tensor(np.ones((2, 2), dtype=np.float32)))
        assert out.dtype == np.float32


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [2])
        assert loss.item() == pytest.approx(math.log(4), rel=1e-6)

    def test_confident_correct_prediction(self):
        loss = T.softmax_cross_entropy(Tensor([[10.0, 0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(9.08e-5, rel=1e-3)

    def test_gradient_is_softmax_minus_onehot_over_n(self):
        # Arrange
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 5))
        targets = np.array([0, 4, 2])
        logits = Tensor(z, requires_grad=True)

        # Act
        backward(T.softmax_cross_entropy(logits, targets))

        # Assert
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(3), targets] -= 1.0
        np.testing.assert_allclose(logits.grad, probs / 3, rtol=1e-9, atol=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])

    def test_no_positions(self):
        with pytest.raises(ContractError):
            T.softmax_cross_entropy(Tensor(np.zeros((0, 4))), np.zeros(0, dtype=int))

    def test_target_shape_mismatch(self):
        with pytest.raises(ContractError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 1, 2])


class TestBackward:
    def test_square_sum_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.sum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_constant_receives_no_gradient(self):
        c = Tensor([1.0, 2.0])
        backward(T.sum(c))
        assert c.grad is None

    def test_shared_subexpression_is_visited_once(self):
        # z = y + y with y = x * x, so dz/dx = 4x
        x = Tensor([1.5, -2.0], requires_grad=True)
        y = x * x
        backward(T.sum(y + y))
        np.testing.assert_allclose(x.grad, [6.0, -8.0])

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_graph_is_topologically_ordered(self):
        x = _param((3, 4), 1)
        w = _param((4, 2), 2)
        loss = T.mean(T.gelu(T.matmul(x, w)))
        graph = ComputeGraph.from_output(loss)
        position = {id(node): i for i, node in enumerate(graph.nodes)}
        for i, node in enumerate(graph.nodes):
            for parent in node._parents:
                if parent.requires_grad:
                    assert position[id(parent)] < i
        assert graph.nodes[-1] is loss

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_repeated_evaluation_is_bit_identical(self):
        def run():
            x = _param((2, 3), 9)
            w = _param((3, 3), 10)
            loss = T.mean(T.softmax(T.matmul(x, w)) * T.matmul(x, w))
            backward(loss)
            return loss.numpy(), x.grad, w.grad

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestFiniteDifferences:
    def test_gelu(self):
        x = _param((4, 5), 0)
        _check_gradient(lambda: T.sum(T.gelu(x)), x)

    def test_exp_and_mean(self):
        x = _param((3, 3), 1, scale=0.5)
        _check_gradient(lambda: T.mean(T.exp(x)), x)

    def test_layer_norm_all_inputs(self):
        x = _param((3, 6), 2)
        gain = _param((6,), 3)
        bias = _param((6,), 4)
        weights = np.random.default_rng(5).normal(size=(3, 6))

        def loss():
            return T.sum(T.layer_norm(x, gain, bias) * weights)

        for tensor in (x, gain, bias):
            _check_gradient(loss, tensor)

    def test_softmax_and_log_softmax(self):
        x = _param((2, 5), 6)
        weights = np.random.default_rng(7).normal(size=(2, 5))
        _check_gradient(lambda: T.sum(T.softmax(x) * weights), x)
        _check_gradient(lambda: T.sum(T.log_softmax(x) * weights), x)

    def test_batched_matmul_both_operands(self):
        a = _param((2, 3, 4), 8)
        b = _param((4, 5), 9)

        def loss():
            return T.mean(T.matmul(a, b) * T.matmul(a, b))

        _check_gradient(loss, a)
        _check_gradient(loss, b)

    def test_embedding_with_repeated_indices(self):
        table = _param((6, 3), 10)
        indices = np.array([[0, 2, 2], [5, 0, 1]])
        weights = np.random.default_rng(11).normal(size=(2, 3, 3))
        _check_gradient(lambda: T.sum(T.embedding(table, indices) * weights), table, n_coords=18)

    def test_reshape_and_transpose(self):
        x = _param((2, 3, 4), 12)
        weights = np.random.default_rng(13).normal(size=(4, 2, 3))
        _check_gradient(lambda: T.sum(T.transpose(T.reshape(x, (2, 3, 4)), (2, 0, 1)) * weights), x)

    def test_cross_entropy(self):
        logits = _param((4, 6), 14)
        _check_gradient(lambda: T.softmax_cross_entropy(logits, [1, 5, 0, 3]), logits)


class TestKlDivergence:
    def test_non_negative(self):
        rng = np.random.default_rng(0)
        s = Tensor(rng.normal(size=(5, 7)))
        t = rng.normal(size=(5, 7))
        assert T.kl_divergence(s, t, temperature=2.0).item() >= 0.0

    def test_zero_for_identical_logits(self):
        z = np.random.default_rng(1).normal(size=(3, 4))
        assert T.kl_divergence(Tensor(z), z).item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_flows_to_student_only(self):
        s = _param((3, 4), 2)
        teacher = np.random.default_rng(3).normal(size=(3, 4))
        _check_gradient(lambda: T.kl_divergence(s, teacher, temperature=2.0), s)


class TestEmbedding:
    def test_out_of_range_index(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.zeros((4, 2))), [0, 4])

    def test_gathers_rows(self):
        table = Tensor(np.arange(8.0).reshape(4, 2))
        np.testing.assert_array_equal(T.embedding(table, [3, 0]).numpy(), [[6.0, 7.0], [0.0, 1.0]])


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(4).normal(size=(6, 9)).astype(np.float32))
    np.testing.assert_allclose(T.softmax(x).numpy().sum(axis=-1), 1.0, atol=1e-6)


def test_integer_input_becomes_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
