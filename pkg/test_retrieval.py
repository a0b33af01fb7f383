#!/usr/bin/env python3
"""
Unit tests for retrieval evaluation
Recall@K, R-Precision and mAP against a brute-force oracle, plus k-NN accuracy
"""

import unittest

import numpy as np

from ml.errors import InvalidArgument
from ml.retrieval import DescriptorSet, average_precision, evaluate, knn_accuracy, rank_gallery
from ml.tensor_core import Rng


def oracle(descriptors, labels, ks):
    """Euclidean self-retrieval evaluated with plain loops over exact integer distances"""
    count = len(labels)
    recalls = {k: 0 for k in ks}
    r_precisions, aps = [], []
    for q in range(count):
        others = [g for g in range(count) if g != q]
        squared = {g: int(sum((int(a) - int(b)) ** 2 for a, b in zip(descriptors[q], descriptors[g]))) for g in others}
        ranked = sorted(others, key=lambda g: (squared[g], g))
        relevant = [labels[g] == labels[q] for g in ranked]
        positives = sum(relevant)
        if positives == 0:
            continue
        first = relevant.index(True) + 1
        for k in ks:
            recalls[k] += first <= k
        r_precisions.append(sum(relevant[:positives]) / positives)
        hits, precision_sum = 0, 0.0
        for rank, is_hit in enumerate(relevant, start=1):
            if is_hit:
                hits += 1
                precision_sum += hits / rank
        aps.append(precision_sum / positives)
    evaluated = len(aps)
    return {k: v / evaluated for k, v in recalls.items()}, sum(r_precisions) / evaluated, sum(aps) / evaluated


class TestAgainstOracle(unittest.TestCase):
    """Random sets with many exact ties"""

    def test_random_sets(self):
        ks = (1, 5, 10)
        for seed in range(20):
            with self.subTest(seed=seed):
                rng = Rng(seed)
                descriptors = np.floor(rng.uniform(0.0, 4.0, (50, 3)))
                labels = np.floor(rng.uniform(0.0, 5.0, 50)).astype(int)
                items = DescriptorSet.create(descriptors, labels)

                report = evaluate(items, items, ks=ks, self_exclude=True, metric='euclidean')
                recall, r_precision, map_score = oracle(descriptors, labels, ks)

                for k in ks:
                    self.assertAlmostEqual(report.recall_at_k[k], recall[k], places=12)
                self.assertAlmostEqual(report.r_precision, r_precision, places=12)
                self.assertAlmostEqual(report.map_score, map_score, places=12)


class TestRanking(unittest.TestCase):
    """Ranking order and tie handling"""

    def test_cosine_order(self):
        gallery = DescriptorSet.create([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [0, 1, 2], ids=[10, 11, 12])
        self.assertEqual(rank_gallery([1.0, 0.1], gallery), [10, 12, 11])

    def test_ties_break_by_ascending_id(self):
        gallery = DescriptorSet.create([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], [0, 0, 0], ids=[7, 3, 5])
        self.assertEqual(rank_gallery([1.0, 0.0], gallery), [3, 5, 7])

    def test_euclidean_order(self):
        gallery = DescriptorSet.create([[0.0], [5.0], [2.0]], [0, 0, 0], ids=['a', 'b', 'c'])
        self.assertEqual(rank_gallery([1.0], gallery, metric='euclidean'), ['a', 'c', 'b'])

    def test_zero_query_rejected_for_cosine(self):
        gallery = DescriptorSet.create([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        with self.assertRaises(InvalidArgument):
            rank_gallery([0.0, 0.0], gallery)

    def test_unknown_metric(self):
        gallery = DescriptorSet.create([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        with self.assertRaises(InvalidArgument):
            rank_gallery([1.0, 0.0], gallery, metric='manhattan')


class TestMetrics(unittest.TestCase):
    """Hand-checked metric values and edge cases"""

    def test_average_precision_hand_value(self):
        relevant = np.array([True, False, True, False])
        self.assertAlmostEqual(average_precision(relevant), (1.0 + 2.0 / 3.0) / 2.0)

    def test_all_positive_gallery(self):
        items = DescriptorSet.create(Rng(1).normal(1.0, (8, 4)), np.zeros(8))
        report = evaluate(items, items, ks=(1, 3), self_exclude=True)
        self.assertEqual(report.recall_at_k, {1: 1.0, 3: 1.0})
        self.assertEqual(report.r_precision, 1.0)
        self.assertEqual(report.map_score, 1.0)

    def test_query_without_positive_is_skipped(self):
        items = DescriptorSet.create(Rng(2).normal(1.0, (5, 3)), [0, 0, 1, 1, 2], ids=[1, 2, 3, 4, 5])
        report = evaluate(items, items, self_exclude=True)
        self.assertEqual(report.skipped_queries, [5])
        self.assertEqual(len(report.queries), 4)

    def test_same_set_needs_self_exclusion(self):
        items = DescriptorSet.create(Rng(3).normal(1.0, (4, 2)), [0, 0, 1, 1])
        with self.assertRaises(InvalidArgument):
            evaluate(items, items)

    def test_recall_is_monotone_in_k(self):
        rng = Rng(4)
        items = DescriptorSet.create(rng.normal(1.0, (40, 6)), np.floor(rng.uniform(0, 4, 40)))
        report = evaluate(items, items, ks=(1, 2, 4, 8, 16), self_exclude=True)
        values = [report.recall_at_k[k] for k in (1, 2, 4, 8, 16)]
        self.assertEqual(values, sorted(values))
        self.assertGreaterEqual(values[0], 0.0)
        self.assertLessEqual(values[-1], 1.0)

    def test_cosine_ignores_descriptor_scale(self):
        rng = Rng(5)
        descriptors = rng.normal(1.0, (30, 5))
        labels = np.floor(rng.uniform(0, 3, 30))
        scaled = descriptors * rng.uniform(0.5, 4.0, (30, 1))
        queries = DescriptorSet.create(descriptors[:10], labels[:10], ids=np.arange(10))
        gallery = DescriptorSet.create(descriptors[10:], labels[10:], ids=np.arange(10, 30))
        scaled_gallery = DescriptorSet.create(scaled[10:], labels[10:], ids=np.arange(10, 30))

        plain = evaluate(queries, gallery, ks=(1, 5))
        rescaled = evaluate(queries, scaled_gallery, ks=(1, 5))
        self.assertEqual(plain.recall_at_k, rescaled.recall_at_k)
        self.assertAlmostEqual(plain.map_score, rescaled.map_score, places=12)

    def test_report_dict(self):
        items = DescriptorSet.create(Rng(6).normal(1.0, (6, 2)), [0, 0, 1, 1, 2, 2])
        data = evaluate(items, items, ks=(1, 2), self_exclude=True).to_dict()
        self.assertEqual(set(data['recall_at_k']), {'1', '2'})
        self.assertEqual(data['evaluated_queries'], 6)

    def test_descriptor_set_validation(self):
        with self.assertRaises(InvalidArgument):
            DescriptorSet.create([[1.0]], [0])
        with self.assertRaises(InvalidArgument):
            DescriptorSet.create([[1.0], [2.0]], [0, 1], ids=[3, 3])
        with self.assertRaises(InvalidArgument):
            DescriptorSet.create([[1.0], [np.nan]], [0, 1])


class TestKnn(unittest.TestCase):
    """Majority-vote k-NN accuracy"""

    def test_separated_clusters(self):
        descriptors = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0], [5.0, 5.1]]
        items = DescriptorSet.create(descriptors, [0, 0, 0, 1, 1, 1])
        self.assertEqual(knn_accuracy(items, items, k=2, self_exclude=True, metric='euclidean'), 1.0)

    def test_vote_tie_goes_to_nearest_label(self):
        queries = DescriptorSet.create([[0.0], [10.0]], [1, 0], ids=[100, 101])
        gallery = DescriptorSet.create([[1.0], [2.0], [3.0], [9.0]], [1, 0, 1, 0])
        # query 100: neighbours 1,0 -> tie, label 1 ranks first
        # query 101: neighbours 0,1 -> tie, label 0 ranks first
        self.assertEqual(knn_accuracy(queries, gallery, k=2, metric='euclidean'), 1.0)

    def test_rejects_nonpositive_k(self):
        items = DescriptorSet.create([[1.0], [2.0]], [0, 1])
        with self.assertRaises(InvalidArgument):
            knn_accuracy(items, items, k=0, self_exclude=True)


if __name__ == '__main__':
    # Run tests with verbose output
    unittest.main(verbosity=2)
