"""Ranking metrics (MRR, success@k, WMRR, WACP) and the two-tailed
paired t-test used for model comparison.

Ranks may be fractional: ties among scores resolve to the expected rank
over all tie-breaking permutations, keeping every metric deterministic.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import DataError, DimensionError


def rank_of_clicked(scores, clicked_index):
    """Expected rank (1-based, possibly fractional) of the clicked doc.

    rank = 1 + #strictly-higher + (#tied-others + ... averaged), i.e.
    higher_count + (tied_count + 1) / 2 where tied_count includes the
    clicked document itself.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not (0 <= clicked_index < len(scores)):
        raise DataError(f"clicked_index {clicked_index} out of range")
    s = scores[clicked_index]
    higher = int(np.sum(scores > s))
    tied = int(np.sum(scores == s))  # includes the clicked doc
    return higher + (tied + 1) / 2.0


def mrr(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("mrr of an empty rank list")
    return float(np.mean(1.0 / ranks))


def success_at_k(ranks, k):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("success@k of an empty rank list")
    return float(np.mean(ranks <= k))


def wmrr(ranks, weights):
    ranks = np.asarray(ranks, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if ranks.shape != weights.shape:
        raise DimensionError("ranks and weights must have equal length")
    if np.any(weights <= 0):
        raise DataError("weights must be positive")
    return float(np.sum(weights / ranks) / np.sum(weights))


def wacp(ranks, weights):
    ranks = np.asarray(ranks, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if ranks.shape != weights.shape:
        raise DimensionError("ranks and weights must have equal length")
    if np.any(weights <= 0):
        raise DataError("weights must be positive")
    return float(np.sum(weights * ranks) / np.sum(weights))


def student_t_sf(t, df):
    """Two-tailed p-value for a Student-t statistic, via the regularized
    incomplete beta function."""
    t = float(t)
    df = float(df)
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_t_test(per_query_a, per_query_b):
    """Classic paired t-test on per-query metric differences.

    Returns (t, p, significant) where significant means p < 0.01.
    Zero-variance differences (identical systems) yield t=0, p=1 and a
    degenerate flag via t being exactly 0 with p 1.0.
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise DataError("need at least 2 paired observations")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return TTestResult(t=0.0, p=1.0, significant=False, degenerate=True)
    t = float(d.mean() / (sd / np.sqrt(n)))
    p = student_t_sf(t, n - 1)
    return TTestResult(t=t, p=p, significant=p < 0.01, degenerate=False)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    degenerate: bool


@dataclass
class MetricsReport:
    mrr: float
    success_at: dict
    wmrr: float
    wacp: float
    per_query_rr: list
    n_queries: int

    def to_dict(self):
        return {
            "mrr": self.mrr,
            "success_at": {str(k): v for k, v in self.success_at.items()},
            "wmrr": self.wmrr,
            "wacp": self.wacp,
            "n_queries": self.n_queries,
        }

    def save(self, path, per_query_path=None):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        if per_query_path is not None:
            with open(per_query_path, "w", encoding="utf-8") as fh:
                fh.write("query_index\treciprocal_rank\n")
                for i, rr in enumerate(self.per_query_rr):
                    fh.write(f"{i}\t{rr!r}\n")


def evaluate_ranks(ranks, weights, ks=(1, 5)):
    """Assemble a MetricsReport from per-query ranks and weights."""
    ranks = np.asarray(ranks, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return MetricsReport(
        mrr=mrr(ranks),
        success_at={k: success_at_k(ranks, k) for k in ks},
        wmrr=wmrr(ranks, weights),
        wacp=wacp(ranks, weights),
        per_query_rr=(1.0 / ranks).tolist(),
        n_queries=int(ranks.size),
    )
