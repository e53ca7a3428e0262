"""
Test suite for retrieval, localization and recall metrics.
"""

from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from symploc.dataset import DatasetConfig, generate_synthetic_dataset
from symploc.evaluation import (
    anchor_localizer,
    check_k_list,
    composite_scores,
    coarse_retrieve,
    evaluate_baselines,
    evaluate_model,
    evaluate_recall,
    format_metrics_table,
    model_ranker,
    nearest_class_ranker,
    oracle_localizer,
    oracle_ranker,
    random_ranker,
    rank_by_score,
    retrieve_and_localize,
    zscore,
)
from symploc.model import ModelConfig, SympLocModel


def small_dataset(**overrides):
    values = dict(grid_cols=2, grid_rows=2, n_train=6, n_val=8, d_features=8, n_classes=8,
                  min_instances=3, max_instances=4, min_hints=2, max_hints=3, seed=21)
    values.update(overrides)
    return generate_synthetic_dataset(DatasetConfig(**values))


def small_model(dataset, **overrides):
    values = dict(dim=8, d_features=dataset.config.d_features, d_hints=dataset.config.d_hints,
                  fine_dim=8, tau_init=8.0, seed=2)
    values.update(overrides)
    return SympLocModel(ModelConfig(**values))


class ScoreTests(SimpleTestCase):
    """Tests for score normalization and ranking."""

    def test_zscore(self):
        z = zscore([1.0, 2.0, 3.0])
        self.assertAlmostEqual(z.mean(), 0.0)
        self.assertAlmostEqual(z.std(), 1.0)

    def test_constant_scores_map_to_zero(self):
        np.testing.assert_array_equal(zscore([4.0, 4.0]), [0.0, 0.0])

    def test_composite_sums_normalized_branches(self):
        scores = {'instance': np.array([1.0, 2.0]), 'global': np.array([10.0, 0.0])}
        np.testing.assert_allclose(composite_scores(scores), [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(composite_scores(scores, ['instance']), [-1.0, 1.0])

    def test_composite_needs_a_branch(self):
        with self.assertRaises(ValueError):
            composite_scores({'instance': np.ones(2)}, ['relation'])

    def test_constant_shift_of_one_branch_keeps_the_ranking(self):
        rng = np.random.default_rng(4)
        scores = {'instance': rng.normal(size=6), 'relation': rng.normal(size=6), 'global': rng.normal(size=6)}
        shifted = dict(scores, relation=scores['relation'] + 3.5)
        ids = list(range(6))
        np.testing.assert_allclose(composite_scores(shifted), composite_scores(scores), atol=1e-12)
        np.testing.assert_array_equal(rank_by_score(ids, composite_scores(shifted)),
                                      rank_by_score(ids, composite_scores(scores)))

    def test_check_k_list(self):
        self.assertEqual(check_k_list((1, 4), 4), [1, 4])
        with self.assertRaises(ValueError):
            check_k_list([0], 4)

    def test_ties_go_to_the_lower_id(self):
        order = rank_by_score([7, 3, 5], [0.5, 0.5, 0.9])
        self.assertEqual([[7, 3, 5][i] for i in order], [5, 3, 7])


class RecallTests(SimpleTestCase):
    """Tests for evaluate_recall with reference rankers."""

    def setUp(self):
        self.dataset = small_dataset()
        self.gallery = self.dataset.gallery

    def test_oracle_scores_perfectly(self):
        metrics = evaluate_recall(self.dataset.val, oracle_ranker(self.gallery), [1, 3], [5.0],
                                  oracle_localizer())
        self.assertEqual(metrics['n_queries'], 8)
        self.assertEqual(metrics['retrieval'], {'1': 1.0, '3': 1.0})
        self.assertEqual(metrics['localization'], {'1': {'5': 1.0}, '3': {'5': 1.0}})

    def test_recall_is_monotone_in_k(self):
        metrics = evaluate_recall(self.dataset.val, random_ranker(self.gallery, seed=3), [1, 2, 4])
        values = [metrics['retrieval'][k] for k in ('1', '2', '4')]
        self.assertEqual(values, sorted(values))
        self.assertEqual(values[-1], 1.0)
        self.assertEqual(metrics['localization'], {})

    def test_random_ranker_ignores_worker_count(self):
        ranker = random_ranker(self.gallery, seed=9)
        serial = evaluate_recall(self.dataset.val, ranker, [1, 2], workers=1)
        threaded = evaluate_recall(self.dataset.val, ranker, [1, 2], workers=4)
        self.assertEqual(serial, threaded)

    def test_anchor_localizer_is_within_half_diagonal(self):
        """The cell center is never farther than side / sqrt(2) from a point in the cell."""
        metrics = evaluate_recall(self.dataset.val, oracle_ranker(self.gallery), [1], [30.0 / np.sqrt(2.0)],
                                  anchor_localizer(self.gallery))
        self.assertEqual(metrics['localization']['1']['21.2132'], 1.0)

    def test_nearest_class_finds_distinct_cells(self):
        """With disjoint classes and noise-free features the class match is exact."""
        dataset = small_dataset(disjoint_classes=True, noise=0.0, feature_jitter=0.0)
        ranker = nearest_class_ranker(dataset.gallery, dataset.config.d_features)
        self.assertEqual(evaluate_recall(dataset.val, ranker, [1])['retrieval']['1'], 1.0)

    def test_non_positive_k_rejected(self):
        with self.assertRaises(ValueError):
            evaluate_recall(self.dataset.val, oracle_ranker(self.gallery), [0, 1])

    def test_empty_query_list(self):
        metrics = evaluate_recall([], oracle_ranker(self.gallery), [1])
        self.assertEqual(metrics['retrieval'], {'1': 0.0})


class ModelRetrievalTests(SimpleTestCase):
    """Tests for model-driven retrieval and the metrics table."""

    def setUp(self):
        self.dataset = small_dataset()
        self.model = small_model(self.dataset)

    def test_coarse_retrieve_orders_by_score(self):
        result = coarse_retrieve(self.dataset.val[0], self.dataset.gallery, self.model, 3)
        self.assertEqual(len(result.ranked_ids), 3)
        self.assertEqual(result.scores, sorted(result.scores, reverse=True))
        self.assertEqual(len(set(result.ranked_ids)), 3)

    def test_duplicated_submap_ties_toward_the_lower_id(self):
        """A copy of cell 1 under a higher id scores identically and ranks right after it."""
        model = small_model(self.dataset, branches=('instance', 'relation'))
        original = self.dataset.gallery[1]
        gallery = [replace(original, id=99)] + list(self.dataset.gallery)
        for query in self.dataset.val:
            result = coarse_retrieve(query, gallery, model, len(gallery))
            position = result.ranked_ids.index(original.id)
            self.assertEqual(result.ranked_ids[position + 1], 99)
            self.assertEqual(result.scores[position], result.scores[position + 1])

    def test_coarse_retrieve_argument_errors(self):
        query = self.dataset.val[0]
        with self.assertRaises(ValueError):
            coarse_retrieve(query, [], self.model, 1)
        with self.assertRaises(ValueError):
            coarse_retrieve(query, self.dataset.gallery, self.model, 5)
        with self.assertRaises(ValueError):
            coarse_retrieve(query, self.dataset.gallery, self.model, 0)

    def test_retrieve_and_localize(self):
        result = retrieve_and_localize(self.dataset.val[0], self.dataset.gallery, self.model, 2)
        self.assertEqual(result.predicted_position.shape, (2,))
        self.assertEqual(result.to_dict()['query_id'], self.dataset.val[0].id)

    def test_evaluate_model_layout(self):
        metrics = evaluate_model(self.model, self.dataset, [1, 3], [5.0, 10.0])
        self.assertEqual(metrics['split'], 'val')
        self.assertEqual(set(metrics['per_branch']), {'instance', 'relation', 'global'})
        self.assertEqual(set(metrics['combined']['retrieval']), {'1', '3'})
        self.assertEqual(set(metrics['combined']['localization']['1']), {'5', '10'})

    def test_k_beyond_the_gallery_is_rejected(self):
        """A k larger than the gallery is an error, not a silently dropped key."""
        with self.assertRaises(ValueError):
            evaluate_model(self.model, self.dataset, [1, 3, 10], [5.0])
        with self.assertRaises(ValueError):
            evaluate_baselines(self.dataset, [1, 5], [5.0])

    def test_table_lists_every_variant(self):
        metrics = evaluate_model(self.model, self.dataset, [1], [5.0], split='train')
        metrics['baselines'] = evaluate_baselines(self.dataset, [1], [5.0], split='train', seed=1)
        table = format_metrics_table(metrics)
        for variant in ('combined', 'instance', 'relation', 'global', 'baseline:random', 'baseline:nearest_class'):
            self.assertIn(variant, table)
        self.assertIn('loc@5m', table)


class ChanceLevelTests(SimpleTestCase):
    """Untrained models and the seeded random ranker sit at chance."""

    def test_random_recall_is_k_over_gallery(self):
        dataset = small_dataset(n_train=1, n_val=500, seed=8)
        metrics = evaluate_recall(dataset.val, random_ranker(dataset.gallery, seed=8), [1, 2])
        for k in (1, 2):
            p = k / 4
            sigma = np.sqrt(p * (1.0 - p) / 500)
            self.assertLess(abs(metrics['retrieval'][str(k)] - p), 3.0 * sigma)

    def test_untrained_model_recall_is_chance(self):
        """500 queries spread over 50 independently initialized models score 1/4 at k=1."""
        dataset = small_dataset(n_train=1, n_val=500, seed=8)
        hits = 0
        for seed in range(50):
            model = small_model(dataset, seed=100 + seed)
            chunk = dataset.val[10 * seed:10 * (seed + 1)]
            hits += round(evaluate_recall(chunk, model_ranker(model, dataset.gallery), [1])['retrieval']['1'] * 10)
        p = 1 / 4
        sigma = np.sqrt(p * (1.0 - p) / 500)
        self.assertLess(abs(hits / 500 - p), 3.0 * sigma)
