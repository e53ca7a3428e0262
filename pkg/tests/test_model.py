"""
Test suite for the three-branch model and the fine regressor.
"""

import numpy as np
from django.test import SimpleTestCase

from symploc.dataset import Query, Submap, iou_matrix
from symploc.model import BRANCHES, FINE_PREFIX, ModelConfig, SympLocModel
from symploc.verification import toy_batch

DIM = 8


def toy_model(**overrides):
    values = dict(dim=DIM, d_features=DIM, d_hints=DIM + 8, fine_dim=DIM, tau_init=float(DIM), seed=3)
    values.update(overrides)
    return SympLocModel(ModelConfig(**values))


def permuted(submap: Submap, perm) -> Submap:
    return Submap(submap.id, submap.origin, submap.side, [submap.instances[i] for i in perm])


class ModelConfigTests(SimpleTestCase):
    """Tests for model configuration validation."""

    def test_dim_must_be_multiple_of_four(self):
        with self.assertRaises(ValueError):
            ModelConfig(dim=10)

    def test_unknown_branch(self):
        with self.assertRaises(ValueError):
            ModelConfig(branches=('instance', 'fine'))

    def test_empty_branches(self):
        with self.assertRaises(ValueError):
            ModelConfig(branches=())

    def test_unknown_modes(self):
        with self.assertRaises(ValueError):
            ModelConfig(geometry_mode='klein')
        with self.assertRaises(ValueError):
            ModelConfig(symplectic_variant='rk4')

    def test_branches_are_normalized_to_tuple(self):
        self.assertEqual(ModelConfig(branches=['global']).branches, ('global',))


class ParameterLayoutTests(SimpleTestCase):
    """Tests for branch parameter registration."""

    def test_every_name_has_a_known_prefix(self):
        model = toy_model()
        prefixes = tuple(f"{b}." for b in BRANCHES) + (FINE_PREFIX,)
        for name in model.params:
            self.assertTrue(name.startswith(prefixes), name)

    def test_coarse_and_fine_names_partition_the_registry(self):
        model = toy_model()
        coarse, fine = model.coarse_parameter_names(), model.fine_parameter_names()
        self.assertFalse(set(coarse) & set(fine))
        self.assertEqual(len(coarse) + len(fine), len(model.params))
        self.assertIn('fine.regressor.out.bias', fine)

    def test_branch_subset_registers_only_that_branch(self):
        model = toy_model(branches=('relation',))
        coarse = model.coarse_parameter_names()
        self.assertTrue(coarse)
        self.assertTrue(all(name.startswith('relation.') for name in coarse))

    def test_same_seed_same_weights(self):
        a, b = toy_model(), toy_model()
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


class CoarseForwardTests(SimpleTestCase):
    """Tests for branch encodings and the coarse loss."""

    def setUp(self):
        self.submaps, self.queries = toy_batch(seed=1, d_features=DIM, batch=3)
        self.model = toy_model()

    def test_encoding_shapes(self):
        submap, query = self.submaps[0], self.queries[0]
        self.assertEqual(self.model.encode_submap_instance(submap).shape, (4, DIM))
        self.assertEqual(self.model.encode_query_instance(query).shape, (3, DIM))
        self.assertEqual(self.model.encode_submap_relation(submap).shape, (4, DIM))
        self.assertEqual(self.model.encode_query_relation(query).shape, (3, DIM))
        self.assertEqual(self.model.encode_submap_global(submap).shape, (DIM,))
        self.assertEqual(self.model.encode_query_global(query).shape, (DIM,))

    def test_coarse_loss_parts(self):
        loss = self.model.coarse_loss(self.submaps, self.queries, iou=iou_matrix(self.submaps))
        self.assertEqual(set(loss.parts), set(BRANCHES))
        self.assertTrue(all(np.isfinite(v) and v >= 0.0 for v in loss.parts.values()))
        self.assertAlmostEqual(float(loss.total.data), sum(loss.parts.values()), places=10)

    def test_coarse_loss_needs_matched_batch(self):
        with self.assertRaises(ValueError):
            self.model.coarse_loss(self.submaps, self.queries[:2])

    def test_ablation_flags_change_the_encoding(self):
        plain = toy_model(use_rie=False, use_isre=False, use_smt=False)
        submap = self.submaps[0]
        self.assertFalse(np.allclose(plain.encode_submap_instance(submap).data,
                                     self.model.encode_submap_instance(submap).data))
        self.assertFalse(np.allclose(plain.encode_submap_relation(submap).data,
                                     self.model.encode_submap_relation(submap).data))
        self.assertFalse(np.allclose(plain.encode_submap_global(submap).data,
                                     self.model.encode_submap_global(submap).data))

    def test_global_descriptors_are_order_free(self):
        """Shuffling instances or hints leaves the global descriptors bit-identical."""
        submap, query = self.submaps[1], self.queries[1]
        shuffled_query = Query(query.id, query.hints[::-1].copy(), query.gt_submap_id, query.gt_position)
        np.testing.assert_array_equal(
            self.model.encode_submap_global(permuted(submap, [2, 0, 3, 1])).data,
            self.model.encode_submap_global(submap).data,
        )
        np.testing.assert_array_equal(
            self.model.encode_query_global(shuffled_query).data,
            self.model.encode_query_global(query).data,
        )

    def test_branch_scores_cover_the_gallery(self):
        encoding = self.model.encode_gallery(self.submaps)
        scores = self.model.branch_scores(self.queries[0], encoding)
        self.assertEqual(set(scores), set(BRANCHES))
        for values in scores.values():
            self.assertEqual(values.shape, (3,))
            self.assertTrue(np.all(np.abs(values) <= 1.0 + 1e-12))


class FineStageTests(SimpleTestCase):
    """Tests for the fine position regressor."""

    def setUp(self):
        self.submaps, self.queries = toy_batch(seed=2, d_features=DIM)
        self.model = toy_model(branches=('instance',))

    def test_zero_weights_predict_bias_offset(self):
        """With zeroed fine weights the prediction is anchor + side/2 * output bias."""
        for name in self.model.fine_parameter_names():
            self.model.params[name].data[...] = 0.0
        self.model.params['fine.regressor.out.bias'].data[:] = [0.2, -0.4]
        submap = self.submaps[1]
        prediction = self.model.fine_localize(self.queries[1], submap)
        np.testing.assert_allclose(prediction, submap.anchor + 15.0 * np.array([0.2, -0.4]), atol=1e-12)

    def test_fine_loss_is_finite_and_non_negative(self):
        loss = float(self.model.fine_loss(list(zip(self.queries, self.submaps))).data)
        self.assertTrue(np.isfinite(loss))
        self.assertGreaterEqual(loss, 0.0)

    def test_empty_submap_rejected(self):
        empty = Submap(9, np.zeros(2), 30.0)
        with self.assertRaises(ValueError):
            self.model.fine_offset(self.queries[0], empty)
