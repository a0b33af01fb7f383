#!/usr/bin/env python3
"""
Unit tests for the tensor helpers
Seeded streams, clamping, token sums and the finite-difference oracle
"""

import unittest

import numpy as np

from ml.errors import InvalidArgument, NumericFailure
from ml.tensor_core import (
    RNG_ALGORITHM_PCG64,
    Rng,
    clamp_min,
    ensure_finite,
    finite_diff_grad,
    relative_error,
    token_mean,
    token_sum,
)


class TestRng(unittest.TestCase):
    """Seeded PCG64 streams"""

    def test_same_seed_same_stream(self):
        a, b = Rng(42), Rng(42)
        np.testing.assert_array_equal(a.uniform(0, 1, 10), b.uniform(0, 1, 10))
        np.testing.assert_array_equal(a.permutation(20), b.permutation(20))

    def test_first_million_draws_match(self):
        np.testing.assert_array_equal(Rng(2024).random(10 ** 6), Rng(2024).random(10 ** 6))

    def test_different_seeds_differ(self):
        self.assertFalse(np.array_equal(Rng(1).random(8), Rng(2).random(8)))

    def test_spawn_is_deterministic_and_independent(self):
        parent = Rng(7)
        self.assertEqual(parent.spawn(3).seed, Rng(7).spawn(3).seed)
        self.assertNotEqual(parent.spawn(3).seed, parent.spawn(4).seed)
        self.assertNotEqual(parent.spawn(0).seed, parent.seed)

    def test_seed_range(self):
        Rng(0)
        Rng(2 ** 64 - 1)
        with self.assertRaises(InvalidArgument):
            Rng(-1)
        with self.assertRaises(InvalidArgument):
            Rng(2 ** 64)

    def test_algorithm_id(self):
        self.assertEqual(Rng(0).algorithm_id, RNG_ALGORITHM_PCG64)


class TestClampAndSums(unittest.TestCase):
    """clamp_min and token reductions"""

    def test_clamp_min(self):
        np.testing.assert_array_equal(clamp_min(np.array([-1.0, 0.0, 2.0]), 1e-6), [1e-6, 1e-6, 2.0])

    def test_clamp_is_idempotent(self):
        x = Rng(5).normal(1.0, (200,))
        once = clamp_min(x, 1e-3)
        np.testing.assert_array_equal(clamp_min(once, 1e-3), once)

    def test_clamp_is_monotone(self):
        rng = Rng(6)
        x = rng.normal(1.0, (500,))
        y = x + rng.uniform(0.0, 0.5, 500)
        self.assertTrue(np.all(clamp_min(x, 1e-6) <= clamp_min(y, 1e-6)))

    def test_clamp_rejects_nonpositive_floor(self):
        with self.assertRaises(InvalidArgument):
            clamp_min(np.ones(3), 0.0)

    def test_token_sum_axis(self):
        values = np.arange(24, dtype=np.float64).reshape(2, 4, 3)
        np.testing.assert_array_equal(token_sum(values), values.sum(axis=1))
        np.testing.assert_array_equal(token_mean(values), values.mean(axis=1))

    def test_token_sum_is_order_stable(self):
        rng = Rng(9)
        values = rng.uniform(0.0, 1.0, (1000, 5))
        shuffled = values[rng.permutation(1000)]
        np.testing.assert_allclose(token_sum(shuffled), token_sum(values), rtol=1e-13)


class TestFiniteDifferences(unittest.TestCase):
    """Central-difference oracle"""

    def test_quadratic(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = np.array([0.3, -1.2])
        grad = finite_diff_grad(lambda v: float(v @ a @ v), x)
        np.testing.assert_allclose(grad, 2 * a @ x, rtol=1e-8)

    def test_input_not_modified(self):
        x = np.array([1.0, 2.0, 3.0])
        finite_diff_grad(lambda v: float(np.sum(v ** 3)), x)
        np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])

    def test_non_finite_value_names_index(self):
        def f(v):
            return float(v.sum()) if v[1] == 2.0 else float('nan')

        with self.assertRaises(NumericFailure) as ctx:
            finite_diff_grad(f, np.array([1.0, 2.0, 3.0]))
        self.assertEqual(ctx.exception.where, "1")

    def test_rejects_nonpositive_step(self):
        with self.assertRaises(InvalidArgument):
            finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.0)


class TestErrorMeasures(unittest.TestCase):
    """relative_error and ensure_finite"""

    def test_relative_error(self):
        self.assertEqual(relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.0, 4.0]), np.array([1.0, 3.0])), 0.25)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)

    def test_ensure_finite(self):
        ensure_finite(np.ones(2), "ok")
        with self.assertRaises(NumericFailure) as ctx:
            ensure_finite(np.array([1.0, np.inf]), "logits")
        self.assertEqual(ctx.exception.where, "logits")


if __name__ == '__main__':
    # Run tests with verbose output
    unittest.main(verbosity=2)
