#!/usr/bin/env python3
"""
Unit tests for the pooling operators
Covers average/max/GeM/GGeM forward values, their backward passes against
finite differences, and the power-mean properties the operators must satisfy
"""

import unittest

import numpy as np

from ml.errors import InvalidArgument, InvalidState
from ml.pooling import (
    ActivationMaps,
    PoolingConfig,
    avg_pool,
    channel_exponents,
    gem_backward_p,
    gem_backward_x,
    gem_pool,
    ggem_pool,
    gradient_concentration_table,
    group_index,
    max_pool,
    pool,
    pool_backward,
    pool_forward,
)
from ml.tensor_core import Rng, finite_diff_grad


def maps(values, **kwargs) -> ActivationMaps:
    return ActivationMaps.from_array(values, **kwargs)


class TestForwardValues(unittest.TestCase):
    """Hand-evaluated pooling outputs"""

    def test_average_single_channel(self):
        np.testing.assert_array_equal(avg_pool(maps([2.0, 4.0, 6.0])), [4.0])

    def test_average_two_channels(self):
        np.testing.assert_array_equal(avg_pool(maps([[1.0, 1.0], [3.0, 3.0]])), [2.0, 2.0])

    def test_constant_field_is_returned_exactly(self):
        row = np.array([0.3, 1.7, 5.0])
        x = maps(np.tile(row, (9, 1)))
        np.testing.assert_array_equal(avg_pool(x), row)
        np.testing.assert_array_equal(max_pool(x), row)
        for p in (0.5, 3.0, 50.0):
            np.testing.assert_array_equal(gem_pool(x, p), row)

    def test_max(self):
        np.testing.assert_array_equal(max_pool(maps([2.0, 4.0, 6.0])), [6.0])
        np.testing.assert_array_equal(max_pool(maps([0.1, 0.9, 0.5])), [0.9])

    def test_gem_p2(self):
        self.assertAlmostEqual(gem_pool(maps([1.0, 3.0]), 2.0)[0], np.sqrt(5.0), places=12)

    def test_gem_p100_close_to_max(self):
        v = gem_pool(maps([1.0, 2.0, 4.0]), 100.0)[0]
        self.assertAlmostEqual(v, 3.956, delta=1e-3)
        self.assertLessEqual(abs(v - 4.0), 4.0 * (1.0 - 3.0 ** (-1.0 / 100.0)))

    def test_gem_rejects_nonpositive_p(self):
        for p in (0.0, -1.0):
            with self.assertRaises(InvalidArgument):
                gem_pool(maps([1.0, 2.0]), p)

    def test_ggem_hand_example(self):
        x = maps(np.array([[1.0] * 4, [3.0] * 4]))
        cfg = PoolingConfig.ggem(groups=2, p=[1.0, 2.0])
        np.testing.assert_allclose(ggem_pool(x, cfg), [2.0, 2.0, np.sqrt(5.0), np.sqrt(5.0)], rtol=0, atol=1e-12)

    def test_class_token_selection(self):
        values = Rng(3).uniform(0.1, 2.0, (5, 4))
        x = maps(values, has_class_token=True)
        np.testing.assert_array_equal(pool(x, PoolingConfig.class_token()), values[0])

    def test_class_token_needs_full_sequence(self):
        with self.assertRaises(InvalidArgument):
            pool(maps(np.ones((4, 2))), PoolingConfig.class_token())

    def test_class_token_excluded_from_aggregates(self):
        values = np.array([[100.0, 100.0], [1.0, 1.0], [3.0, 3.0]])
        x = maps(values, has_class_token=True)
        np.testing.assert_array_equal(pool(x, PoolingConfig.average()), [2.0, 2.0])
        np.testing.assert_array_equal(pool(x, PoolingConfig.max()), [3.0, 3.0])


class TestGrouping(unittest.TestCase):
    """Sequential channel-to-group assignment"""

    def test_group_index_examples(self):
        self.assertEqual(group_index(1, 768, 12), 1)
        self.assertEqual(group_index(64, 768, 12), 1)
        self.assertEqual(group_index(65, 768, 12), 2)
        for groups in (1, 2, 3, 4, 6, 12):
            self.assertEqual(group_index(12, 12, groups), groups)

    def test_group_index_requires_even_split(self):
        with self.assertRaises(InvalidArgument):
            group_index(1, 10, 3)

    def test_channel_exponents_sequential(self):
        cfg = PoolingConfig.ggem(groups=2, p=[1.5, 4.0])
        np.testing.assert_array_equal(channel_exponents(cfg, 6), [1.5, 1.5, 1.5, 4.0, 4.0, 4.0])

    def test_ggem_rejects_uneven_channels(self):
        cfg = PoolingConfig.ggem(groups=3, p=2.0)
        with self.assertRaises(InvalidArgument) as ctx:
            ggem_pool(maps(np.ones((4, 4))), cfg)
        self.assertIn("D mod G", str(ctx.exception))

    def test_config_validation(self):
        with self.assertRaises(InvalidArgument):
            PoolingConfig(strategy='gem', groups=2, exponents=(3.0, 3.0))
        with self.assertRaises(InvalidArgument):
            PoolingConfig(strategy='ggem', groups=2, exponents=(3.0,))
        with self.assertRaises(InvalidArgument):
            PoolingConfig.ggem(groups=2, p=1e-4)
        with self.assertRaises(InvalidArgument):
            PoolingConfig(strategy='median')

    def test_average_normalises_to_fixed_unit_exponent(self):
        cfg = PoolingConfig(strategy='average', groups=5, exponents=(7.0,), exponents_trainable=True)
        self.assertEqual((cfg.groups, cfg.exponents, cfg.exponents_trainable), (1, (1.0,), False))


class TestDegeneracyChain(unittest.TestCase):
    """GGeM reduces to GeM, GeM reduces to average"""

    @classmethod
    def setUpClass(cls):
        rng = Rng(11)
        cls.maps = [rng.uniform(0.05, 5.0, (196, 768)) for _ in range(100)]

    def test_ggem_unit_exponent_equals_average(self):
        ggem_cfg = PoolingConfig.ggem(groups=1, p=1.0, trainable=False)
        for values in self.maps:
            diff = pool_forward(values, ggem_cfg) - pool_forward(values, PoolingConfig.average())
            self.assertLessEqual(np.abs(diff).max(), 1e-12)

    def test_ggem_single_group_equals_gem(self):
        for p in (1.0, 2.0, 3.0, 5.0):
            for values in self.maps:
                x = maps(values)
                diff = ggem_pool(x, PoolingConfig.ggem(groups=1, p=p)) - gem_pool(x, p)
                self.assertLessEqual(np.abs(diff).max(), 1e-12)

    def test_gem_p1_equals_average(self):
        x = maps(self.maps[0])
        self.assertLessEqual(np.abs(gem_pool(x, 1.0) - avg_pool(x)).max(), 1e-12)

    def test_ggem_per_channel_equal_exponents_equals_gem(self):
        x = maps(self.maps[0][:, :16])
        cfg = PoolingConfig.ggem(groups=16, p=3.0)
        self.assertLessEqual(np.abs(ggem_pool(x, cfg) - gem_pool(x, 3.0)).max(), 1e-12)


class TestPowerMeanProperties(unittest.TestCase):
    """Sandwich, monotonicity, homogeneity, permutation invariance"""

    P_GRID = (0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 20.0, 100.0)

    def setUp(self):
        self.rng = Rng(5)
        self.channels = self.rng.uniform(0.1, 10.0, (16, 1000))

    def test_monotone_in_p_and_sandwiched(self):
        x = maps(self.channels)
        low, high = self.channels.min(axis=0), self.channels.max(axis=0)
        previous = None
        for p in self.P_GRID:
            v = gem_pool(x, p)
            self.assertTrue(np.all(v >= low * (1 - 1e-12)))
            self.assertTrue(np.all(v <= high * (1 + 1e-12)))
            if previous is not None:
                self.assertTrue(np.all(v >= previous * (1 - 1e-12)), f"not monotone at p={p}")
            previous = v

    def test_max_limit_bound(self):
        batch = self.rng.uniform(0.1, 10.0, (100, 196, 32))
        gem = pool_forward(batch, PoolingConfig.gem(p=100.0))
        peak = batch.max(axis=1)
        self.assertTrue(np.all(np.abs(gem - peak) <= peak * (1.0 - 196.0 ** (-1.0 / 100.0))))

    def test_log_domain_switch_is_continuous(self):
        x = maps(self.channels)
        below = gem_pool(x, 20.0)
        above = gem_pool(x, 20.0 + 1e-9)
        np.testing.assert_allclose(below, above, rtol=1e-8)

    def test_no_overflow_for_large_inputs(self):
        v = gem_pool(maps([10.0, 1e3, 5.0]), 400.0)
        self.assertTrue(np.all(np.isfinite(v)))
        self.assertLessEqual(v[0], 1e3)

    def test_positive_homogeneity(self):
        x = self.channels[:, :50]
        for c in (0.5, 2.0, 10.0):
            np.testing.assert_allclose(gem_pool(maps(c * x), 3.0), c * gem_pool(maps(x), 3.0), rtol=1e-10)

    def test_permutation_invariance(self):
        x = self.channels[:, :64]
        shuffled = x[self.rng.permutation(x.shape[0])]
        for p in (1.0, 3.0, 50.0):
            np.testing.assert_allclose(gem_pool(maps(shuffled), p), gem_pool(maps(x), p), rtol=0, atol=1e-12 * x.max())


class TestBackward(unittest.TestCase):
    """Analytic gradients against hand values and finite differences"""

    def setUp(self):
        self.rng = Rng(7)

    def test_p1_gradient_is_uniform(self):
        x = maps(self.rng.uniform(0.1, 10.0, (16, 3)))
        v = gem_pool(x, 1.0)
        grad = gem_backward_x(x, 1.0, v, np.ones(3))
        np.testing.assert_allclose(grad, np.full((16, 3), 1.0 / 16), rtol=1e-14)

    def test_hand_gradient(self):
        x = maps([1.0, 3.0])
        v = gem_pool(x, 2.0)
        grad = gem_backward_x(x, 2.0, v, np.ones(1))[:, 0]
        np.testing.assert_allclose(grad, [1 / (2 * np.sqrt(5)), 3 / (2 * np.sqrt(5))], rtol=1e-12)

    def test_constant_field_gradients_are_exact(self):
        x = maps(np.full((4, 3), 2.5))
        for p in (0.5, 2.0, 7.0):
            v = gem_pool(x, p)
            grad = gem_backward_x(x, p, v, np.ones(3))
            np.testing.assert_array_equal(grad, np.full((4, 3), 0.25))
            grad_p = gem_backward_p(x, PoolingConfig.gem(p=p), v, np.ones(3))
            np.testing.assert_array_equal(grad_p, [0.0])

    def test_grad_x_matches_finite_differences(self):
        values = self.rng.uniform(0.1, 10.0, (16, 8))
        grad_out = self.rng.normal(1.0, 8)
        for p in (1.0, 2.0, 3.0, 5.0, 8.0):
            v = gem_pool(maps(values), p)
            analytic = gem_backward_x(maps(values), p, v, grad_out)
            numeric = finite_diff_grad(lambda t: float(grad_out @ gem_pool(maps(t), p)), values)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7 * np.abs(analytic).max())

    def test_grad_p_matches_finite_differences(self):
        x = maps([1.0, 3.0])
        v = gem_pool(x, 2.0)
        analytic = gem_backward_p(x, PoolingConfig.gem(p=2.0), v, np.ones(1))
        numeric = finite_diff_grad(lambda q: float(gem_pool(x, q[0])[0]), np.array([2.0]))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6)

    def test_grad_p_per_group(self):
        values = np.column_stack([
            self.rng.uniform(0.5, 2.0, 6), self.rng.uniform(0.5, 2.0, 6),
            self.rng.uniform(1.0, 9.0, 6), self.rng.uniform(1.0, 9.0, 6),
        ])
        x = maps(values)
        cfg = PoolingConfig.ggem(groups=2, p=[1.5, 4.0])
        v = ggem_pool(x, cfg)
        grad_out = np.ones(4)
        analytic = gem_backward_p(x, cfg, v, grad_out)
        numeric = finite_diff_grad(lambda q: float(ggem_pool(x, cfg.with_exponents(q)).sum()), np.array([1.5, 4.0]))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6)

    def test_group_locality(self):
        x = maps(self.rng.uniform(0.1, 10.0, (9, 6)))
        cfg = PoolingConfig.ggem(groups=3, p=[2.0, 3.0, 4.0])
        v = ggem_pool(x, cfg)
        grad_out = np.array([0.0, 0.0, 1.0, -2.0, 0.0, 0.0])
        grad_p = gem_backward_p(x, cfg, v, grad_out)
        self.assertEqual(grad_p[0], 0.0)
        self.assertEqual(grad_p[2], 0.0)
        self.assertNotEqual(grad_p[1], 0.0)

    def test_fixed_exponents_have_no_gradient(self):
        x = maps(self.rng.uniform(0.1, 1.0, (4, 2)))
        cfg = PoolingConfig.gem(p=3.0, trainable=False)
        v = gem_pool(x, 3.0)
        with self.assertRaises(InvalidState):
            gem_backward_p(x, cfg, v, np.ones(2))
        _, grad_p = pool_backward(x.values, cfg, np.ones(2))
        self.assertIsNone(grad_p)

    def test_shape_mismatch(self):
        x = maps(np.ones((4, 2)))
        with self.assertRaises(InvalidArgument):
            gem_backward_x(x, 2.0, np.ones(3), np.ones(3))

    def test_max_routes_to_first_argmax(self):
        values = np.array([[1.0, 5.0], [4.0, 5.0], [2.0, 0.0]])
        grad, grad_p = pool_backward(values, PoolingConfig.max(), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(grad, [[0.0, 2.0], [1.0, 0.0], [0.0, 0.0]])
        self.assertIsNone(grad_p)

    def test_clamped_tokens_get_no_gradient(self):
        values = np.array([[-1.0, 2.0], [3.0, 0.5]])
        grad, _ = pool_backward(values, PoolingConfig.gem(p=3.0), np.ones(2))
        self.assertEqual(grad[0, 0], 0.0)
        self.assertGreater(grad[1, 0], 0.0)


class TestGradientConcentration(unittest.TestCase):
    """Larger p concentrates the gradient on the largest activations"""

    def test_ratio_matches_closed_form(self):
        rng = Rng(13)
        for _ in range(20):
            channel = rng.uniform(0.1, 1.0, 12)
            table = gradient_concentration_table(channel, (1.0, 2.0, 4.0, 8.0))
            hi, lo = channel.argmax(), channel.argmin()
            ratios = table[:, hi] / table[:, lo]
            expected = (channel[hi] / channel[lo]) ** (np.array([1.0, 2.0, 4.0, 8.0]) - 1.0)
            np.testing.assert_allclose(ratios, expected, rtol=1e-8)
            self.assertTrue(np.all(np.diff(ratios) >= 0))

    def test_table_shape(self):
        table = gradient_concentration_table(np.linspace(0.1, 1.0, 5), (1.0, 3.0))
        self.assertEqual(table.shape, (2, 5))


if __name__ == '__main__':
    # Run tests with verbose output
    unittest.main(verbosity=2)
