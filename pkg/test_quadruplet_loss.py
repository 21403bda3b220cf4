#!/usr/bin/env python3
"""
Tests for quadruplet mining and the two-hinge quadruplet loss.
"""

import unittest

import numpy as np

from quadruplet_loss import Margins, Quadruplet, mine_quadruplets, quad_backward, quad_forward
from rank_embedding_common import UnusableBatchError, ValidationError
from utils import central_difference, relative_error


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestMargins(unittest.TestCase):
    def test_defaults(self):
        margins = Margins()
        self.assertEqual((margins.m_fine, margins.m_coarse), (0.25, 0.5))

    def test_invalid(self):
        with self.assertRaises(ValidationError):
            Margins(0.5, 0.5)
        with self.assertRaises(ValidationError):
            Margins(-0.1, 0.5)


class TestMining(unittest.TestCase):
    def test_role_enumeration(self):
        labels = [("A", "x"), ("A", "x"), ("A", "y"), ("B", "z")]
        quads = mine_quadruplets(labels, seed=0)
        self.assertEqual(quads, [Quadruplet(0, 1, 2, 3), Quadruplet(1, 0, 2, 3)])

    def test_single_class(self):
        self.assertEqual(mine_quadruplets([("A", "x")] * 5, seed=0), [])

    def test_balanced_composition(self):
        labels = [("A", "x"), ("A", "x"), ("A", "y"), ("B", "z"), ("B", "z"), ("B", "w")]
        quads = mine_quadruplets(labels, seed=3)
        self.assertGreater(len(quads), 0)
        for q in quads:
            self.assertEqual(labels[q.anchor], labels[q.positive])
            self.assertEqual(labels[q.anchor][0], labels[q.neg_fine][0])
            self.assertNotEqual(labels[q.anchor], labels[q.neg_fine])
            self.assertNotEqual(labels[q.anchor][0], labels[q.neg_coarse][0])

    def test_truncated_labels_are_skipped(self):
        labels = [("A", "x"), ("A", "x"), ("A",), ("B", "z")]
        self.assertEqual(mine_quadruplets(labels, seed=0), [])

    def test_seeded(self):
        labels = [(f"c{i % 2}", f"f{i % 4}") for i in range(12)]
        self.assertEqual(mine_quadruplets(labels, seed=9), mine_quadruplets(labels, seed=9))


class TestQuadForward(unittest.TestCase):
    margins = Margins(0.25, 0.5)

    def test_inactive_hinges(self):
        # d(a,p)=0, d(a,nf)=1, d(a,nc)=2
        e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        quads = [Quadruplet(0, 1, 2, 3)]
        self.assertEqual(quad_forward(e, quads, self.margins), 0.0)
        np.testing.assert_array_equal(quad_backward(e, quads, self.margins), np.zeros_like(e))

    def test_equal_distances(self):
        # Positive and both negatives orthogonal to the anchor: every distance is 1
        e = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
        quads = [Quadruplet(0, 1, 2, 3)]
        self.assertAlmostEqual(quad_forward(e, quads, self.margins), 0.75, places=12)

    def test_identical_embeddings(self):
        e = np.tile([[0.6, 0.8]], (4, 1))
        quads = [Quadruplet(0, 1, 2, 3), Quadruplet(1, 0, 2, 3)]
        self.assertAlmostEqual(quad_forward(e, quads, self.margins), 0.75, places=12)

    def test_empty_quadruplets(self):
        with self.assertRaises(UnusableBatchError):
            quad_forward(np.eye(2), [], self.margins)
        with self.assertRaises(UnusableBatchError):
            quad_backward(np.eye(2), [], self.margins)

    def test_larger_margins_never_decrease_loss(self):
        rng = np.random.default_rng(0)
        labels = [(f"c{c}", f"f{c}_{f}") for c in range(2) for f in range(2) for _ in range(2)]
        quads = mine_quadruplets(labels, seed=0)
        for _ in range(20):
            e = unit_rows(rng, len(labels), 3)
            small = quad_forward(e, quads, Margins(0.1, 0.3))
            large = quad_forward(e, quads, Margins(0.3, 0.6))
            self.assertGreaterEqual(large, small)
            self.assertGreaterEqual(small, 0.0)


class TestQuadBackward(unittest.TestCase):
    margins = Margins(0.25, 0.5)

    def test_single_active_fine_hinge(self):
        # d(a,p)=1 - cos 20, d(a,nf)=1 - cos 30: fine hinge active; coarse negative is antipodal
        rad = np.radians([0.0, 20.0, 30.0, 180.0, 90.0])
        e = np.stack([np.cos(rad), np.sin(rad)], axis=1)
        grad = quad_backward(e, [Quadruplet(0, 1, 2, 3)], self.margins)
        self.assertFalse(np.any(grad[3]))
        self.assertFalse(np.any(grad[4]))
        self.assertTrue(np.any(grad[0]) and np.any(grad[1]) and np.any(grad[2]))

    def test_matches_finite_differences_away_from_kinks(self):
        rng = np.random.default_rng(4)
        labels = [(f"c{c}", f"f{c}_{f}") for c in range(2) for f in range(2) for _ in range(2)]
        tested = 0
        for _ in range(30):
            quads = mine_quadruplets(labels, rng=rng)
            e = unit_rows(rng, len(labels), 4)
            hinge_args = []
            for q in quads:
                d_ap = 1 - e[q.anchor] @ e[q.positive]
                hinge_args.append(d_ap - (1 - e[q.anchor] @ e[q.neg_fine]) + 0.25)
                hinge_args.append(d_ap - (1 - e[q.anchor] @ e[q.neg_coarse]) + 0.5)
            if np.min(np.abs(hinge_args)) < 1e-3:
                continue
            analytic = quad_backward(e, quads, self.margins)
            work = e.copy()
            numeric = central_difference(lambda: quad_forward(work, quads, self.margins), work)
            self.assertLess(relative_error(analytic, numeric), 1e-4)
            tested += 1
        self.assertGreater(tested, 10)


if __name__ == "__main__":
    unittest.main()
