#!/usr/bin/env python3
"""
Tests for the rank based loss: distances, target assignment, loss value and gradient.
"""

import itertools
import math
import unittest

import numpy as np

from hierarchy import build_rank_map, build_tree
from rank_embedding_common import (
    UNDETERMINED_RANK,
    NoIncludedPairsError,
    NonUnitEmbeddingError,
    ShapeMismatchError,
    ValidationError,
)
from rank_loss import (
    assign_targets,
    frozen_rbl_loss,
    pairwise_cosine_distances,
    rbl_backward,
    rbl_forward,
)
from utils import central_difference, relative_error


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def angles(*degrees):
    rad = np.radians(degrees)
    return np.stack([np.cos(rad), np.sin(rad)], axis=1)


def literal_rbl(embeddings, labels):
    """
    Straight-line reading of the loss: rank map from the tree, every pairwise
    distance, sort, per-rank spans with the median target, lenient tie check,
    mean squared gap of the wrong pairs over the included pairs.
    """
    tree = build_tree(labels)
    pairs = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            r = build_rank_map(tree, labels).rank(labels[i], labels[j])
            if r is None:
                continue
            d = 1.0 - sum(float(a) * float(b) for a, b in zip(embeddings[i], embeddings[j]))
            d = min(max(d, 0.0), 2.0)
            pairs.append((d, r))
    sorted_d = sorted(d for d, _ in pairs)
    ranks = sorted({r for _, r in pairs})
    span = {}
    start = 0
    for r in ranks:
        count = sum(1 for _, rr in pairs if rr == r)
        span[r] = (start, start + count - 1, sorted_d[start + count // 2])
        start += count
    total = 0.0
    for d, r in pairs:
        lo, hi, target = span[r]
        valid = [q for q, value in enumerate(sorted_d) if value == d]
        if not any(lo <= q <= hi for q in valid):
            total += (d - target) ** 2
    return total / len(pairs)


class TestPairwiseDistances(unittest.TestCase):
    def test_definition(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        rows, cols, d = pairwise_cosine_distances(e)
        lookup = {(int(i), int(j)): float(x) for i, j, x in zip(rows, cols, d)}
        self.assertAlmostEqual(lookup[(0, 1)], 0.0)
        self.assertAlmostEqual(lookup[(0, 2)], 1.0)
        self.assertAlmostEqual(lookup[(0, 3)], 2.0)
        self.assertEqual(len(d), 6)

    def test_ten_degrees(self):
        _, _, d = pairwise_cosine_distances(angles(0, 10))
        self.assertAlmostEqual(float(d[0]), 1 - math.cos(math.radians(10)), places=12)
        self.assertAlmostEqual(float(d[0]), 0.01519, places=5)

    def test_errors(self):
        with self.assertRaises(NonUnitEmbeddingError):
            pairwise_cosine_distances(np.array([[1.0, 0.0], [2.0, 0.0]]))
        with self.assertRaises(ValidationError):
            pairwise_cosine_distances(np.array([[1.0, 0.0]]))


class TestAssignTargets(unittest.TestCase):
    def test_three_pair_example(self):
        spans, table = assign_targets([0.01519, 0.82635, 1.0], [1, 1, 0])
        self.assertEqual(spans.as_dict(), {0: (0, 0, 0.01519), 1: (1, 2, 1.0)})
        np.testing.assert_array_equal(table.correct, [False, True, False])
        np.testing.assert_array_equal(table.position, [0, 1, 2])
        np.testing.assert_allclose(table.target, [1.0, 1.0, 0.01519])

    def test_consistent_ordering_is_all_correct(self):
        _, table = assign_targets([0.1, 0.5, 0.6, 1.2, 1.5, 1.9], [0, 1, 1, 2, 2, 2])
        self.assertTrue(table.correct.all())

    def test_all_equal_distances_are_correct(self):
        _, table = assign_targets([0.7] * 6, [2, 0, 1, 2, 1, 0])
        self.assertTrue(table.correct.all())

    def test_positions_form_a_permutation(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dist = rng.uniform(0, 2, size=10)
            ranks = rng.integers(-1, 3, size=10)
            if not (ranks != UNDETERMINED_RANK).any():
                continue
            spans, table = assign_targets(dist, ranks)
            included = table.position[table.included]
            np.testing.assert_array_equal(np.sort(included), np.arange(table.num_included))
            self.assertTrue(np.all(np.diff(spans.targets) >= 0))
            self.assertTrue(np.all(table.position[~table.included] == -1))

    def test_excluded_pairs(self):
        with self.assertRaises(NoIncludedPairsError):
            assign_targets([0.1, 0.2, 0.3], [UNDETERMINED_RANK] * 3)
        with self.assertRaises(ShapeMismatchError):
            assign_targets([0.1, 0.2], [0, 1, 1])


class TestRblForward(unittest.TestCase):
    def test_three_pair_example_loss(self):
        # Rows at 0, 10 and 90 degrees: d01 = 1 - cos 10, d02 = 1, d12 = 1 - cos 80
        e = angles(0, 10, 90)
        loss, table = rbl_forward(e, [1, 0, 1])
        d_small = 1 - math.cos(math.radians(10))
        self.assertEqual(table.num_included, 3)
        self.assertAlmostEqual(loss, ((1.0 - d_small) ** 2 + (d_small - 1.0) ** 2) / 3, places=12)
        self.assertAlmostEqual(loss, 0.6465, places=3)

    def test_rank_ordered_batch_has_zero_loss(self):
        # Two tight groups far apart: rank-0 pairs small, rank-2 pairs large
        e = angles(0, 1, 180, 181)
        loss, table = rbl_forward(e, [0, 2, 2, 2, 2, 0])
        self.assertEqual(loss, 0.0)
        self.assertFalse(table.wrong.any())

    def test_perturbing_one_pair_out_of_span_makes_loss_positive(self):
        e = angles(0, 1, 180, 181)
        loss, _ = rbl_forward(e, [0, 2, 2, 2, 2, 0])
        self.assertEqual(loss, 0.0)
        moved = angles(0, 1, 180, 90)
        loss, table = rbl_forward(moved, [0, 2, 2, 2, 2, 0])
        self.assertGreater(loss, 0.0)
        self.assertTrue(table.wrong.any())

    def test_single_included_pair(self):
        e = angles(0, 90, 45)
        loss, table = rbl_forward(e, [UNDETERMINED_RANK, 1, UNDETERMINED_RANK])
        self.assertEqual(loss, 0.0)
        self.assertEqual(table.num_included, 1)

    def test_missing_ranks_are_fine(self):
        e = angles(0, 30, 60)
        loss, _ = rbl_forward(e, [2, 2, 2])
        self.assertEqual(loss, 0.0)

    def test_rank_count_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            rbl_forward(angles(0, 30, 60), [0, 1])

    def test_matches_literal_implementation(self):
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 100:
            n = int(rng.integers(2, 7))
            depth = int(rng.integers(1, 4))
            labels = [tuple(f"l{k}_{int(rng.integers(2))}" for k in range(depth)) for _ in range(n)]
            rank_map = build_rank_map(build_tree(labels), labels)
            e = unit_rows(rng, n, 3)
            loss, _ = rbl_forward(e, rank_map.pair_ranks(labels))
            self.assertAlmostEqual(loss, literal_rbl(e, labels), delta=1e-12)
            checked += 1

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        labels = [("a", "x"), ("a", "x"), ("a", "y"), ("b", "z"), ("b", "w"), ("a", "y")]
        rank_map = build_rank_map(build_tree(labels), labels)
        for _ in range(20):
            e = unit_rows(rng, len(labels), 3)
            loss, table = rbl_forward(e, rank_map.pair_ranks(labels))
            grad = rbl_backward(table, e)
            perm = rng.permutation(len(labels))
            permuted_labels = [labels[k] for k in perm]
            loss_p, table_p = rbl_forward(e[perm], rank_map.pair_ranks(permuted_labels))
            self.assertAlmostEqual(loss, loss_p, places=12)
            # Distinct random distances: no ties, so the permuted batch has the same wrong pairs
            np.testing.assert_allclose(rbl_backward(table_p, e[perm]), grad[perm], atol=1e-12)


class TestRblBackward(unittest.TestCase):
    def test_zero_loss_gives_zero_gradient(self):
        e = angles(0, 1, 180, 181)
        _, table = rbl_forward(e, [0, 2, 2, 2, 2, 0])
        np.testing.assert_array_equal(rbl_backward(table, e), np.zeros_like(e))

    def test_three_pair_example_single_terms(self):
        e = angles(0, 10, 90)
        _, table = rbl_forward(e, [1, 0, 1])
        grad = rbl_backward(table, e)
        # Wrong pairs: (0,1) rank 1 with target 1.0 and (0,2) rank 0 with target d01
        d01 = 1 - math.cos(math.radians(10))
        c01 = (2.0 / 3) * (d01 - 1.0)
        c02 = (2.0 / 3) * (1.0 - d01)
        np.testing.assert_allclose(grad[0], -c01 * e[1] - c02 * e[2], atol=1e-12)
        np.testing.assert_allclose(grad[1], -c01 * e[0], atol=1e-12)
        np.testing.assert_allclose(grad[2], -c02 * e[0], atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        labels = [("a", "x"), ("a", "x"), ("a", "y"), ("b", "z"), ("b", "z"), ("b", "w")]
        ranks = build_rank_map(build_tree(labels), labels).pair_ranks(labels)
        tested = 0
        for _ in range(40):
            e = unit_rows(rng, len(labels), 4)
            _, table = rbl_forward(e, ranks)
            if not table.wrong.any():
                continue
            analytic = rbl_backward(table, e)
            work = e.copy()
            numeric = central_difference(lambda: frozen_rbl_loss(table, work), work)
            self.assertLess(relative_error(analytic, numeric), 1e-4)
            tested += 1
        self.assertGreater(tested, 0)

    def test_shape_mismatch(self):
        e = angles(0, 10, 90)
        _, table = rbl_forward(e, [1, 0, 1])
        with self.assertRaises(ShapeMismatchError):
            rbl_backward(table, angles(0, 10))

    def test_moving_a_wrong_pair_toward_its_target_never_increases_loss(self):
        distances = np.array([0.2, 1.5, 0.9, 1.8, 0.3, 1.7])
        ranks = np.array([0, 0, 1, 1, 2, 2])
        _, table = assign_targets(distances, ranks)
        wrong = np.flatnonzero(table.wrong)
        self.assertGreater(len(wrong), 0)

        def loss_with(dist):
            gap = dist[table.wrong] - table.target[table.wrong]
            return float(np.sum(gap ** 2) / table.num_included)

        base = loss_with(distances)
        for p in wrong:
            moved = distances.copy()
            moved[p] += 0.5 * (table.target[p] - moved[p])
            self.assertLessEqual(loss_with(moved), base)


if __name__ == "__main__":
    unittest.main()
