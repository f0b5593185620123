"""
Tests for metric calculations
"""
import itertools
import unittest

import numpy as np

import helpers  # noqa: F401

from utils.calculations import ScoreCalculations, LagCalculations, IsotonicCalculations
from utils.errors import ValidationError


def best_non_increasing_fit(values, weights):
    """Exhaustive search over contiguous poolings for the weighted least-squares non-increasing fit"""
    n = len(values)
    best, best_cost = None, float('inf')
    for cuts in itertools.product([False, True], repeat=n - 1):
        blocks, start = [], 0
        for i, cut in enumerate(cuts, start=1):
            if cut:
                blocks.append((start, i))
                start = i
        blocks.append((start, n))
        fit = []
        for lo, hi in blocks:
            w = weights[lo:hi]
            mean = sum(v * wi for v, wi in zip(values[lo:hi], w)) / sum(w)
            fit.extend([mean] * (hi - lo))
        if any(fit[i] < fit[i + 1] - 1e-12 for i in range(n - 1)):
            continue
        cost = sum(w * (v - f) ** 2 for v, w, f in zip(values, weights, fit))
        if cost < best_cost:
            best, best_cost = fit, cost
    return best


class ScoreTest(unittest.TestCase):

    def test_token_f1(self):
        self.assertEqual(ScoreCalculations.token_f1("Pilot", "pilot"), 1.0)
        self.assertAlmostEqual(ScoreCalculations.token_f1("york", "new york"), 2 / 3)
        self.assertEqual(ScoreCalculations.token_f1("", ""), 1.0)
        self.assertEqual(ScoreCalculations.token_f1("", "pilot"), 0.0)
        self.assertEqual(ScoreCalculations.token_f1("chef", "pilot"), 0.0)
        self.assertEqual(ScoreCalculations.token_f1("the pilot!", "the pilot"), 1.0)
        self.assertAlmostEqual(ScoreCalculations.token_f1("pilot pilot", "pilot"), 2 / 3)

    def test_retained_score_is_clamped(self):
        self.assertAlmostEqual(ScoreCalculations.retained_score(0.8, 0.3), 0.5)
        self.assertEqual(ScoreCalculations.retained_score(0.2, 0.7), 0.0)


class LagTest(unittest.TestCase):

    def test_lag_uses_the_earliest_evidence(self):
        self.assertEqual(LagCalculations.evidence_lag(40, [12, 30]), 28)
        with self.assertRaises(ValidationError):
            LagCalculations.evidence_lag(5, [])

    def test_bucket_edges(self):
        cases = {0: 0, 31: 0, 32: 1, 63: 1, 64: 2, 127: 2, 128: 3, 255: 3, 256: 4, 10 ** 6: 4}
        for lag, bucket in cases.items():
            self.assertEqual(LagCalculations.bucket_index(lag), bucket, lag)
        with self.assertRaises(ValidationError):
            LagCalculations.bucket_index(-1)
        self.assertEqual(LagCalculations.bucket_label(0), "[0,32)")
        self.assertEqual(LagCalculations.bucket_label(4), "[256,inf)")


class IsotonicTest(unittest.TestCase):

    def test_already_monotone_is_unchanged(self):
        self.assertEqual(IsotonicCalculations.pava_non_increasing([0.9, 0.5, 0.5, 0.1]), [0.9, 0.5, 0.5, 0.1])

    def test_single_violation_is_pooled(self):
        fit = IsotonicCalculations.pava_non_increasing([0.2, 0.6], [3, 1])
        self.assertEqual(len(fit), 2)
        self.assertAlmostEqual(fit[0], 0.3)
        self.assertAlmostEqual(fit[1], 0.3)

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            n = int(rng.integers(1, 7))
            values = rng.random(n).round(2).tolist()
            weights = rng.integers(1, 5, size=n).astype(float).tolist()
            fit = IsotonicCalculations.pava_non_increasing(values, weights)
            np.testing.assert_allclose(fit, best_non_increasing_fit(values, weights), atol=1e-9,
                                       err_msg=f"trial {trial}: {values} {weights}")

    def test_fit_preserves_the_weighted_mean(self):
        rng = np.random.default_rng(1)
        for trial in range(50):
            n = int(rng.integers(1, 9))
            values = rng.random(n).tolist()
            weights = rng.integers(1, 6, size=n).astype(float).tolist()
            fit = IsotonicCalculations.pava_non_increasing(values, weights)
            self.assertAlmostEqual(IsotonicCalculations.weighted_mean(fit, weights),
                                   IsotonicCalculations.weighted_mean(values, weights), places=9, msg=f"trial {trial}")
        self.assertEqual(IsotonicCalculations.weighted_mean([0.3], [0.0]), 0.0)

    def test_weights_are_validated(self):
        with self.assertRaises(ValidationError):
            IsotonicCalculations.pava_non_increasing([0.1, 0.2], [1])
        with self.assertRaises(ValidationError):
            IsotonicCalculations.pava_non_increasing([0.1, 0.2], [1, 0])
        self.assertEqual(IsotonicCalculations.pava_non_increasing([]), [])


if __name__ == "__main__":
    unittest.main()
