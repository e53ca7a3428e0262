"""
Test suite for Poincare-ball operations and the Riemannian instance enhancer.
"""

import numpy as np
from django.test import SimpleTestCase

from symploc import autodiff as ad
from symploc.autodiff import Tensor
from symploc.hyperbolic import (
    BALL_MARGIN,
    BallParams,
    RiemannianInstanceEnhancer,
    clamp_to_ball,
    conformal_factor,
    exp_map,
    log_map,
    mobius_add,
    mobius_sub,
    project_to_manifold,
    rie_forward,
    riemannian_self_attention,
)
from symploc.params import ModelParams


def ball_point(rng, dim, c, scaled_radius):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v) * scaled_radius / np.sqrt(c)


class GyrovectorTests(SimpleTestCase):
    """Tests for Mobius addition and subtraction."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_self_subtraction_is_zero(self):
        """x (-) x = 0 in the default mode."""
        for c in (0.1, 1.0, 2.0):
            x = ball_point(self.rng, 6, c, 0.9)
            self.assertLess(np.linalg.norm(mobius_sub(x, x, c).data), 1e-12)

    def test_literal_self_subtraction_is_not_zero(self):
        """The literal subtraction keeps its +2c<x,y> cross term."""
        x = ball_point(self.rng, 6, 1.0, 0.5)
        self.assertGreater(np.linalg.norm(mobius_sub(x, x, 1.0, mode='literal').data), 1e-3)

    def test_origin_identities(self):
        """x (-) 0 = x and 0 (-) y = -y."""
        x = ball_point(self.rng, 4, 1.0, 0.7)
        zero = np.zeros(4)
        np.testing.assert_allclose(mobius_sub(x, zero, 1.0).data, x, atol=1e-14)
        np.testing.assert_allclose(mobius_sub(zero, x, 1.0).data, -x, atol=1e-14)

    def test_left_cancellation(self):
        """(-x) (+) (x (+) y) = y."""
        x = ball_point(self.rng, 5, 1.0, 0.6)
        y = ball_point(self.rng, 5, 1.0, 0.6)
        back = mobius_add(-x, mobius_add(x, y, 1.0), 1.0).data
        np.testing.assert_allclose(back, y, atol=1e-12)

    def test_unknown_mode(self):
        """An unknown geometry mode is rejected."""
        with self.assertRaises(ValueError):
            mobius_sub(np.zeros(2), np.zeros(2), 1.0, mode='hyperboloid')


class ExpLogTests(SimpleTestCase):
    """Tests for the exponential and logarithmic maps."""

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_zero_velocity_returns_base(self):
        """exp_x(0) = x in both modes."""
        x = ball_point(self.rng, 4, 1.0, 0.5)
        for mode in ('default', 'literal'):
            np.testing.assert_allclose(exp_map(x, np.zeros(4), 1.0, mode=mode).data, x, atol=1e-15)

    def test_log_of_base_is_zero(self):
        """log_x(x) = 0."""
        x = ball_point(self.rng, 4, 2.0, 0.8)
        self.assertLess(np.linalg.norm(log_map(x, x, 2.0).data), 1e-10)

    def test_round_trip(self):
        """log_x(exp_x(v)) = v for points inside the ball."""
        for c in (0.1, 1.0, 2.0):
            for _ in range(20):
                x = ball_point(self.rng, 8, c, 0.5)
                v = self.rng.normal(size=8)
                v *= 0.4 / np.linalg.norm(v)
                back = log_map(x, exp_map(x, v, c), c).data
                np.testing.assert_allclose(back, v, atol=1e-8)

    def test_literal_log_at_origin_is_doubled_for_small_targets(self):
        """With the (2/sqrt(c)) scale, log_0(y) is approximately 2y."""
        y = np.full(3, 1e-4)
        out = log_map(np.zeros(3), y, 1.0, mode='literal').data
        np.testing.assert_allclose(out, 2.0 * y, rtol=1e-6)

    def test_default_log_at_origin_is_identity_for_small_targets(self):
        """The default map includes lambda_0 = 2, so log_0(y) is approximately y."""
        y = np.full(3, 1e-4)
        out = log_map(np.zeros(3), y, 1.0).data
        np.testing.assert_allclose(out, y, rtol=1e-6)

    def test_conformal_factor_at_origin(self):
        self.assertEqual(conformal_factor(np.zeros(3), 1.0).data[0], 2.0)


class BallContainmentTests(SimpleTestCase):
    """Tests that every op stays inside the ball."""

    def test_clamp_shrinks_outside_points(self):
        """Points beyond the radius land on (1 - margin)/sqrt(c)."""
        out = clamp_to_ball(np.array([[3.0, 4.0]]), 4.0).data
        self.assertAlmostEqual(float(np.linalg.norm(out)), (1.0 - BALL_MARGIN) / 2.0, places=12)

    def test_clamp_keeps_inside_points(self):
        x = np.array([0.1, 0.2])
        np.testing.assert_array_equal(clamp_to_ball(x, 1.0).data, x)

    def test_large_steps_stay_inside(self):
        """Huge tangent vectors still map inside the ball."""
        rng = np.random.default_rng(3)
        limit = 1.0 - BALL_MARGIN
        for c in (0.1, 1.0, 2.0):
            for mode in ('default', 'literal'):
                x = ball_point(rng, 4, c, 0.99)
                out = exp_map(x, rng.normal(size=4) * 3.0, c, mode=mode).data
                self.assertLessEqual(np.sqrt(c) * np.linalg.norm(out), limit + 1e-12)

    def test_projection_of_zero_vector(self):
        """Tiny vectors project to the origin."""
        np.testing.assert_array_equal(project_to_manifold(np.zeros((2, 3)), 1.0).data, np.zeros((2, 3)))

    def test_projection_norm_is_tanh_zeta(self):
        out = project_to_manifold(np.array([[3.0, 4.0]]), 0.5).data
        self.assertAlmostEqual(float(np.linalg.norm(out)), np.tanh(0.5), places=12)


class RiemannianAttentionTests(SimpleTestCase):
    """Tests for Riemannian self-attention and the gated enhancer."""

    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.store = ModelParams()
        self.rie = RiemannianInstanceEnhancer(self.store, 'rie', 6, self.rng)

    def test_weights_are_row_stochastic(self):
        V = self.rng.normal(size=(5, 6))
        result = riemannian_self_attention(V, self.rie.params, self.rie.w_q, self.rie.w_k, self.rie.w_v)
        np.testing.assert_allclose(result.weights.data.sum(axis=1), np.ones(5))
        self.assertEqual(result.features.shape, (5, 6))

    def test_single_instance(self):
        """N = 1 attends to itself with weight 1."""
        V = self.rng.normal(size=(1, 6))
        result = riemannian_self_attention(V, self.rie.params, self.rie.w_q, self.rie.w_k, self.rie.w_v)
        np.testing.assert_array_equal(result.weights.data, [[1.0]])

    def test_zero_gate_is_identity(self):
        """beta = 0 returns V exactly."""
        V = self.rng.normal(size=(4, 6))
        np.testing.assert_array_equal(self.rie(V, beta=0.0).data, V)

    def test_unit_gate_is_attention_output(self):
        """beta = 1 returns the normalized attention output."""
        V = self.rng.normal(size=(4, 6))
        expected = riemannian_self_attention(V, self.rie.params, self.rie.w_q, self.rie.w_k, self.rie.w_v).features
        np.testing.assert_array_equal(self.rie(V, beta=1.0).data, expected.data)

    def test_empty_input_rejected(self):
        with self.assertRaises(ValueError):
            rie_forward(np.zeros((0, 6)), self.rie.params, self.rie.w_q, self.rie.w_k, self.rie.w_v)

    def test_registered_parameter_names(self):
        self.assertEqual(
            self.store.names(),
            ['rie.c_raw', 'rie.zeta', 'rie.beta_gate', 'rie.w_q', 'rie.w_k', 'rie.w_v'],
        )

    def test_constant_params(self):
        params = BallParams.constant(curvature=2.0, beta=0.25)
        self.assertAlmostEqual(float(params.curvature().data), 2.0, places=9)
        self.assertAlmostEqual(float(params.gate().data), 0.25, places=12)

    def test_gradients_match_finite_differences(self):
        """Every enhancer parameter and the input get correct gradients."""
        V = Tensor(self.rng.normal(size=(3, 6)))
        readout = self.rng.normal(size=(3, 6))
        for mode in ('default', 'literal'):
            store = ModelParams()
            rie = RiemannianInstanceEnhancer(store, 'rie', 6, np.random.default_rng(5), mode=mode)
            error = ad.finite_difference_check(lambda *_: ad.tsum(rie(V) * readout), store.tensors() + [V])
            self.assertLess(error, 1e-5)
