"""
PA-EWC Desk Lab - Autodiff Test Suite
Tests the tape, the backward rules and the finite-difference oracle
"""

import logging
import unittest
from unittest.mock import patch

import numpy as np

from errors import ContractError, DimensionError, DomainError, StateError
from self_check import run_checks
from tensor_autodiff import (
    GRADIENT_RULES, Tape, Tensor, backward, embedding, finite_diff_check, matmul, no_tape, relu, softmax,
)

logging.basicConfig(level=logging.WARNING)


class TestForwardOps(unittest.TestCase):
    """Forward values of the basic ops"""

    def test_matmul_example(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_relu_example(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_uniform_and_rows_sum_to_one(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        rows = softmax(Tensor(np.random.default_rng(0).normal(size=(4, 6))), axis=1).data
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(4))

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_log_of_non_positive(self):
        with self.assertRaises(DomainError):
            Tensor([0.0, 1.0]).log()

    def test_softmax_over_empty_axis(self):
        with self.assertRaises(DomainError):
            softmax(Tensor(np.ones((2, 0))), axis=1)

    def test_op_outputs_are_read_only(self):
        out = Tensor([1.0, 2.0]) * 2.0
        with self.assertRaises(ValueError):
            out.data[0] = 5.0


class TestTape(unittest.TestCase):
    """Reverse-mode gradients and tape lifecycle"""

    def test_square_gradient(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        with Tape() as tape:
            loss = (w * w).sum()
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads["w"], [2.0])
        np.testing.assert_allclose(w.grad, [2.0])

    def test_mean_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True, name="x")
        with Tape():
            loss = x.mean()
        np.testing.assert_allclose(backward(loss)["x"], [1 / 3, 1 / 3, 1 / 3])

    def test_backward_is_linear_in_the_loss(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="w")
        x = Tensor(rng.normal(size=(2, 3)))

        def grads_of(alpha, beta):
            with Tape() as tape:
                first = softmax(matmul(x, w), axis=1).log().sum()
                second = (relu(matmul(x, w)) * relu(matmul(x, w))).mean()
                loss = first * alpha + second * beta
            return tape.backward(loss)["w"]

        combined = grads_of(2.5, -0.75)
        np.testing.assert_allclose(combined, 2.5 * grads_of(1.0, 0.0) - 0.75 * grads_of(0.0, 1.0),
                                   rtol=1e-12, atol=1e-12)

    def test_relu_gradient_is_step(self):
        x = Tensor([-1.0, 2.0], requires_grad=True, name="x")
        with Tape() as tape:
            loss = x.relu().sum()
        np.testing.assert_array_equal(tape.backward(loss)["x"], [0.0, 1.0])

    def test_repeated_embedding_ids_accumulate(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True, name="table")
        with Tape() as tape:
            loss = embedding(table, np.array([1, 1, 2])).sum()
        np.testing.assert_array_equal(tape.backward(loss)["table"], [[0, 0], [2, 2], [1, 1]])

    def test_unreached_parameters_get_zero_gradients(self):
        a = Tensor([1.0], requires_grad=True, name="a")
        b = Tensor([5.0, 6.0], requires_grad=True, name="b")
        with Tape() as tape:
            loss = (a * 3.0).sum()
        grads = tape.backward(loss, {"a": a, "b": b})
        np.testing.assert_array_equal(grads["b"], [0.0, 0.0])

    def test_second_backward_raises(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        with Tape() as tape:
            loss = (w * w).sum()
        tape.backward(loss)
        with self.assertRaises(StateError):
            tape.backward(loss)

    def test_non_scalar_loss_raises(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        with Tape() as tape:
            out = w * w
        with self.assertRaises(ContractError):
            tape.backward(out)

    def test_backward_without_tape_raises(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        loss = (w * w).sum()
        with self.assertRaises(ContractError):
            backward(loss)

    def test_no_tape_suspends_recording(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        with Tape() as tape:
            with no_tape():
                w * w
        self.assertEqual(len(tape), 0)


class TestFiniteDifference(unittest.TestCase):
    """Central-difference oracle"""

    def test_quadratic_is_exact(self):
        w = {"w": Tensor([1.0], requires_grad=True, name="w")}
        self.assertLess(finite_diff_check(lambda p: (p["w"] * p["w"]).sum(), w, h=1e-5), 1e-8)

    def test_random_two_layer_net(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(4, 3)))
            params = {
                "w1": Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="w1"),
                "b1": Tensor(rng.normal(size=(5,)), requires_grad=True, name="b1"),
                "w2": Tensor(rng.normal(size=(5, 2)), requires_grad=True, name="w2"),
            }

            def objective(p):
                hidden = (x @ p["w1"] + p["b1"]).sigmoid()
                return (hidden @ p["w2"]).log_softmax(axis=1).mean()

            self.assertLess(finite_diff_check(objective, params), 1e-6)

    def test_params_restored_after_check(self):
        w = Tensor([0.3, -0.7], requires_grad=True, name="w")
        before = w.data.copy()
        finite_diff_check(lambda p: (p["w"] * p["w"] * p["w"]).sum(), {"w": w})
        np.testing.assert_array_equal(w.data, before)

    def test_injected_gradient_bug_is_caught(self):
        def broken_mul(node, g):
            a, b = node.inputs
            return g * b.data * 1.5, g * a.data

        with patch.dict(GRADIENT_RULES, {"mul": broken_mul}):
            results = run_checks(fixtures=1, names=["gradient:mul", "gradient:exp"])
        verdicts = {r.name: r.passed for r in results}
        self.assertFalse(verdicts["gradient:mul"])


if __name__ == "__main__":
    unittest.main()
