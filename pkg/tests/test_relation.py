"""
Test suite for relation encoding: offsets, information geometry and the symplectic step.
"""

import numpy as np
from django.test import SimpleTestCase

from symploc import autodiff as ad
from symploc.autodiff import Tensor
from symploc.exceptions import ShapeMismatchError
from symploc.params import ModelParams
from symploc.relation import (
    NaturalParams,
    PhaseState,
    RelationEncoder,
    build_offset_tensor,
    build_text_offset_tensor,
    edge_to_node_aggregate,
    fisher_rao_distance,
    info_geometry_project,
    residual_enhance,
    split_phase,
    symplectic_step,
    symplectic_update,
)


class OffsetTests(SimpleTestCase):
    """Tests for pairwise offset tensors."""

    def test_point_offsets_are_antisymmetric(self):
        c = np.random.default_rng(0).normal(size=(5, 3))
        O = build_offset_tensor(c).data
        self.assertEqual(O.shape, (5, 5, 3))
        np.testing.assert_array_equal(O, -O.transpose(1, 0, 2))
        np.testing.assert_array_equal(np.diagonal(O, axis1=0, axis2=1), np.zeros((3, 5)))

    def test_text_offsets_concatenate_pairs(self):
        t = np.arange(6.0).reshape(3, 2)
        O = build_text_offset_tensor(t).data
        self.assertEqual(O.shape, (3, 3, 4))
        np.testing.assert_array_equal(O[0, 2], [0.0, 1.0, 4.0, 5.0])

    def test_empty_centroids_rejected(self):
        with self.assertRaises(ValueError):
            build_offset_tensor(np.zeros((0, 3)))


class InformationGeometryTests(SimpleTestCase):
    """Tests for the natural-parameter projection and the Fisher-Rao approximation."""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.edges = rng.normal(size=(4, 4, 8)) * 3
        self.w_eta = rng.normal(size=(8, 8))

    def test_ranges(self):
        """theta lies in (-1, 1) and eta >= 1."""
        natural = info_geometry_project(self.edges, self.w_eta)
        self.assertTrue(np.all(np.abs(natural.theta.data) < 1.0))
        self.assertTrue(np.all(natural.eta.data >= 1.0))
        self.assertEqual(natural.eta.shape, (4, 4, 1))

    def test_saturated_edges_stay_inside_open_interval(self):
        """Edges large enough to saturate tanh still give |theta| < 1."""
        natural = info_geometry_project(self.edges * 1e3, self.w_eta)
        self.assertLess(np.max(np.abs(natural.theta.data)), 1.0)
        self.assertTrue(np.all(np.isfinite(natural.theta.data)))

    def test_fisher_rao_distance(self):
        """Zero on the diagonal of pairs and symmetric."""
        natural = info_geometry_project(self.edges, self.w_eta)
        self.assertEqual(fisher_rao_distance((0, 1), (0, 1), natural), 0.0)
        self.assertAlmostEqual(
            fisher_rao_distance((0, 1), (2, 3), natural),
            fisher_rao_distance((2, 3), (0, 1), natural),
            places=14,
        )

    def test_split_phase_halves(self):
        natural = info_geometry_project(self.edges, self.w_eta)
        q, p = split_phase(natural)
        self.assertEqual(q.shape, (4, 4, 4))
        self.assertEqual(p.shape, (4, 4, 4))

    def test_split_phase_needs_even_width(self):
        natural = NaturalParams(theta=Tensor(np.zeros((2, 2, 3))), eta=Tensor(np.ones((2, 2, 1))))
        with self.assertRaises(ValueError):
            split_phase(natural)


class SymplecticStepTests(SimpleTestCase):
    """Tests for the two symplectic update variants."""

    def setUp(self):
        rng = np.random.default_rng(2)
        self.q = rng.normal(size=(3, 2))
        self.p = rng.normal(size=(3, 2))
        self.w_v = rng.normal(size=(2, 2))

    def test_momentum_update_matches_force(self):
        """p' = p - dt tanh(W_V q) in both variants."""
        expected = self.p - 0.1 * np.tanh(self.q @ self.w_v.T)
        for variant in ('literal', 'symplectic'):
            _, p_next = symplectic_update(self.q, self.p, self.w_v, 0.1, variant=variant)
            np.testing.assert_allclose(p_next.data, expected, atol=1e-15)

    def test_position_update_differs_by_variant(self):
        """The literal step uses p, the volume-preserving one uses p'."""
        q_lit, p_next = symplectic_update(self.q, self.p, self.w_v, 0.1, variant='literal')
        q_sym, _ = symplectic_update(self.q, self.p, self.w_v, 0.1, variant='symplectic')
        np.testing.assert_allclose(q_lit.data, self.q + 0.1 * self.p, atol=1e-15)
        np.testing.assert_allclose(q_sym.data, self.q + 0.1 * p_next.data, atol=1e-15)

    def test_zero_step_is_identity(self):
        q, p = symplectic_update(self.q, self.p, self.w_v, 0.0)
        np.testing.assert_array_equal(q.data, self.q)
        np.testing.assert_array_equal(p.data, self.p)

    def test_unknown_variant(self):
        with self.assertRaises(ValueError):
            symplectic_update(self.q, self.p, self.w_v, 0.1, variant='leapfrog')

    def test_step_returns_phase_state(self):
        natural = NaturalParams(theta=Tensor(np.full((2, 2, 4), 0.5)), eta=Tensor(np.full((2, 2, 1), 4.0)))
        state = symplectic_step(natural, np.zeros((2, 2)), 0.2)
        self.assertIsInstance(state, PhaseState)
        # zero force: p' = p = 0.5/2, q' = q + dt p
        np.testing.assert_allclose(state.p.data, np.full((2, 2, 2), 0.25))
        np.testing.assert_allclose(state.q.data, np.full((2, 2, 2), 0.25 + 0.2 * 0.25))


class RelationEncoderTests(SimpleTestCase):
    """Tests for the full relation encoder."""

    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.store = ModelParams()
        self.encoder = RelationEncoder(self.store, 'rel', 6, 3, 8, self.rng, dt_init=0.1)
        self.X = self.rng.normal(size=(5, 6))
        self.offsets = build_offset_tensor(self.rng.normal(size=(5, 3)))

    def test_output_shape(self):
        self.assertEqual(self.encoder(self.X, self.offsets).shape, (5, 8))

    def test_time_step_starts_at_init(self):
        self.assertAlmostEqual(float(self.encoder.time_step().data), 0.1, places=12)

    def test_registered_names(self):
        for name in ('rel.w_eta', 'rel.w_v', 'rel.dt_raw', 'rel.geo.hidden.weight', 'rel.fuse.out.bias'):
            self.assertIn(name, self.store)
        self.assertEqual(self.store['rel.w_v'].shape, (4, 4))

    def test_permutation_equivariance(self):
        """Permuting the nodes permutes the descriptors."""
        perm = np.array([3, 0, 4, 1, 2])
        centroids = self.rng.normal(size=(5, 3))
        out = self.encoder(self.X, build_offset_tensor(centroids)).data
        out_p = self.encoder(self.X[perm], build_offset_tensor(centroids[perm])).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_single_node(self):
        """N = 1 gives one descriptor from the self-edge."""
        out = self.encoder(self.X[:1], build_offset_tensor(np.zeros((1, 3))))
        self.assertEqual(out.shape, (1, 8))

    def test_without_isre_aggregates_normalized_edges(self):
        store = ModelParams()
        plain = RelationEncoder(store, 'rel', 6, 3, 8, np.random.default_rng(3), use_isre=False)
        edges = plain.edges(self.X, self.offsets)
        expected = edge_to_node_aggregate(ad.layer_norm(edges)).data
        np.testing.assert_array_equal(plain(self.X, self.offsets).data, expected)

    def test_odd_width_rejected(self):
        with self.assertRaises(ValueError):
            RelationEncoder(ModelParams(), 'rel', 6, 3, 7, self.rng)

    def test_residual_shape_mismatch(self):
        phase = PhaseState(q=Tensor(np.zeros((2, 2, 2))), p=Tensor(np.zeros((2, 2, 2))), dt=Tensor(0.1))
        with self.assertRaises(ShapeMismatchError):
            residual_enhance(np.zeros((2, 2, 6)), phase, 0.1)

    def test_gradients_match_finite_differences(self):
        readout = self.rng.normal(size=(5, 8))
        X = Tensor(self.X)
        for variant in ('literal', 'symplectic'):
            store = ModelParams()
            encoder = RelationEncoder(store, 'rel', 6, 3, 8, np.random.default_rng(4), variant=variant)
            error = ad.finite_difference_check(
                lambda *_: ad.tsum(encoder(X, self.offsets) * readout), store.tensors() + [X])
            self.assertLess(error, 1e-5)


class AggregationTests(SimpleTestCase):
    """Tests for edge-to-node aggregation."""

    def test_constant_edges(self):
        """Identical edges aggregate to that edge."""
        E = np.tile(np.array([1.0, -2.0]), (3, 3, 1))
        np.testing.assert_allclose(edge_to_node_aggregate(E).data, np.tile([1.0, -2.0], (3, 1)))

    def test_equivariance(self):
        E = np.random.default_rng(5).normal(size=(4, 4, 3))
        perm = np.array([2, 3, 1, 0])
        np.testing.assert_allclose(
            edge_to_node_aggregate(E[perm][:, perm]).data,
            edge_to_node_aggregate(E).data[perm],
            atol=1e-12,
        )
