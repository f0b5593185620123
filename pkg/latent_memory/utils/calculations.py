"""
Calculation utilities for the forgetting-curve and knowledge metrics
"""
from collections import Counter
import math
import re

from config import LAG_BUCKET_EDGES
from utils.errors import ValidationError

_PUNCT = re.compile(r"[^\w\s]")


class ScoreCalculations:
    """Answer quality scores"""

    @staticmethod
    def normalize_answer(text):
        """Lowercase, strip punctuation, split on whitespace. Articles are kept."""
        return _PUNCT.sub(" ", str(text).lower()).split()

    @staticmethod
    def token_f1(prediction, gold):
        """F1 of the multiset token overlap; both empty -> 1, one empty -> 0"""
        pred = ScoreCalculations.normalize_answer(prediction)
        ref = ScoreCalculations.normalize_answer(gold)
        if not pred and not ref:
            return 1.0
        if not pred or not ref:
            return 0.0
        common = sum((Counter(pred) & Counter(ref)).values())
        if common == 0:
            return 0.0
        precision = common / len(pred)
        recall = common / len(ref)
        return 2 * precision * recall / (precision + recall)

    @staticmethod
    def retained_score(f1_mem, f1_ablated):
        """Clamped F1 drop when the persistent state is ablated"""
        return max(0.0, f1_mem - f1_ablated)


class LagCalculations:
    """Evidence lag and lag buckets"""

    @staticmethod
    def evidence_lag(ask_after_turn, evidence):
        """T - min(E) in global turns"""
        if not evidence:
            raise ValidationError("evidence lag needs at least one evidence turn")
        return int(ask_after_turn) - min(int(e) for e in evidence)

    @staticmethod
    def bucket_index(lag, edges=LAG_BUCKET_EDGES):
        """Index of the half-open bucket [edges[i], edges[i+1]) holding lag; the last bucket is open"""
        if lag < edges[0]:
            raise ValidationError(f"lag {lag} is below the first bucket edge {edges[0]}")
        for i in range(len(edges) - 1, -1, -1):
            if lag >= edges[i]:
                return i
        return 0

    @staticmethod
    def bucket_label(index, edges=LAG_BUCKET_EDGES):
        lo = edges[index]
        if index + 1 < len(edges):
            return f"[{lo},{edges[index + 1]})"
        return f"[{lo},inf)"


class IsotonicCalculations:
    """Weighted pool-adjacent-violators"""

    @staticmethod
    def pava_non_increasing(values, weights=None):
        """
        Weighted least-squares projection of values onto non-increasing sequences.
        Returns a list the same length as values.
        """
        values = [float(v) for v in values]
        weights = [1.0] * len(values) if weights is None else [float(w) for w in weights]
        if len(weights) != len(values):
            raise ValidationError(f"{len(values)} values but {len(weights)} weights")
        if any(w <= 0 or math.isnan(w) for w in weights):
            raise ValidationError("PAVA weights must be positive")

        # Blocks of pooled neighbours: [weighted mean, total weight, length]
        blocks = []
        for v, w in zip(values, weights):
            blocks.append([v, w, 1])
            while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
                mean_b, w_b, n_b = blocks.pop()
                mean_a, w_a, n_a = blocks.pop()
                pooled = IsotonicCalculations.weighted_mean([mean_a, mean_b], [w_a, w_b])
                blocks.append([pooled, w_a + w_b, n_a + n_b])

        fitted = []
        for mean, _, length in blocks:
            fitted.extend([mean] * length)
        return fitted

    @staticmethod
    def weighted_mean(values, weights):
        total = sum(weights)
        return sum(v * w for v, w in zip(values, weights)) / total if total else 0.0
