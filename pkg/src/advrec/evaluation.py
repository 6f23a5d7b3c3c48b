"""Ranking metrics, debiasing metrics and paired significance tests."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import ConfigError, ContractError, DataError


def ndcg_at_k(ranked_items, holdout_set, k: int = 10, foldin_set=None) -> float:
    """Binary-relevance NDCG of the top-k ranking against the holdout items."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    holdout = set(int(i) for i in holdout_set)
    if not holdout:
        raise ContractError("ndcg is undefined for an empty holdout set")
    top = [int(i) for i in ranked_items[:k]]
    if foldin_set is not None:
        overlap = set(top) & set(int(i) for i in foldin_set)
        if overlap:
            raise ContractError(f"ranking contains fold-in items {sorted(overlap)}")
    dcg = sum(1.0 / math.log2(pos + 2) for pos, item in enumerate(top) if item in holdout)
    ideal = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(holdout))))
    return dcg / ideal


def recall_at_k(ranked_items, holdout_set, k: int = 10, foldin_set=None) -> float:
    """Fraction of reachable holdout items present in the top-k ranking."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    holdout = set(int(i) for i in holdout_set)
    if not holdout:
        raise ContractError("recall is undefined for an empty holdout set")
    top = [int(i) for i in ranked_items[:k]]
    if foldin_set is not None:
        overlap = set(top) & set(int(i) for i in foldin_set)
        if overlap:
            raise ContractError(f"ranking contains fold-in items {sorted(overlap)}")
    hits = sum(1 for item in top if item in holdout)
    return hits / min(k, len(holdout))


def rank_excluding(scores: np.ndarray, foldin: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest-scoring items, with fold-in items masked out."""
    masked = scores.astype(np.float64, copy=True)
    masked[foldin] = -np.inf
    if k >= masked.size:
        return np.argsort(-masked, kind="stable")
    top = np.argpartition(-masked, k)[:k]
    return top[np.argsort(-masked[top], kind="stable")]


def ranking_metrics(scores: np.ndarray, foldin_rows, holdout_rows, k: int = 10):
    """Per-user NDCG and recall; users with empty holdout are skipped.

    Returns ``(ndcg, recall, evaluated_mask)`` arrays over the input users.
    """
    n = scores.shape[0]
    ndcg = np.zeros(n)
    recall = np.zeros(n)
    evaluated = np.zeros(n, dtype=bool)
    for i in range(n):
        holdout = holdout_rows[i]
        if len(holdout) == 0:
            continue
        ranked = rank_excluding(scores[i], foldin_rows[i], k)
        ndcg[i] = ndcg_at_k(ranked, holdout, k, foldin_set=foldin_rows[i])
        recall[i] = recall_at_k(ranked, holdout, k)
        evaluated[i] = True
    return ndcg, recall, evaluated


def balanced_accuracy(predictions, labels, n_classes: int) -> float:
    """Mean of per-class recalls."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            raise DataError(f"class {c} absent from labels; balanced accuracy undefined")
        recalls.append(float((predictions[mask] == c).mean()))
    return float(np.mean(recalls))


def mae_metric(predictions, targets) -> float:
    """Mean absolute error between predictions and targets in [0, 1]."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ConfigError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
    return float(np.abs(predictions - targets).mean())


@dataclass
class TestResult:
    statistic: float
    p_value: float
    significant: bool
    degenerate: bool = False


def _normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _chi2_sf_1dof(x: float) -> float:
    return math.erfc(math.sqrt(x / 2.0))


def _rank_with_ties(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Average ranks of |values| plus the tie correction term sum(t^3 - t)."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    tie_term = 0.0
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for idx in range(i, j + 1):
            ranks[order[idx]] = avg
        t = j - i + 1
        tie_term += t**3 - t
        i = j + 1
    return ranks, tie_term


_WILCOXON_EXACT_MAX_N = 16


def _wilcoxon_exact_p(ranks: np.ndarray, statistic: float) -> float:
    """P(min(W+, W-) <= statistic) by enumerating all sign assignments."""
    sums = np.zeros(1)
    for r in ranks:
        sums = np.concatenate([sums, sums + r])
    total = ranks.sum()
    mins = np.minimum(sums, total - sums)
    return float(np.mean(mins <= statistic + 1e-9))


def wilcoxon_signed_rank(scores_a, scores_b, alpha: float = 0.05) -> TestResult:
    """Two-sided signed-rank test on paired scores.

    Zero differences are dropped and |differences| ranked with average ranks
    for ties. Small samples (n <= 16) get the exact sign-enumeration p;
    larger samples the tie-corrected, continuity-corrected normal
    approximation, whose center-of-distribution error at tiny n would
    otherwise exceed the accuracy the exact computation provides.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        return TestResult(statistic=0.0, p_value=1.0, significant=False, degenerate=True)
    if n < 10:
        raise DataError(f"need >= 10 nonzero differences, got {n}")
    ranks, tie_term = _rank_with_ties(np.abs(diffs))
    w_plus = ranks[diffs > 0].sum()
    w_minus = ranks[diffs < 0].sum()
    statistic = min(w_plus, w_minus)
    if n <= _WILCOXON_EXACT_MAX_N:
        p = _wilcoxon_exact_p(ranks, statistic)
        return TestResult(statistic=float(statistic), p_value=p, significant=p <= alpha)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if var <= 0:
        return TestResult(statistic=statistic, p_value=1.0, significant=False, degenerate=True)
    z = (statistic - mean + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * _normal_cdf(z))
    return TestResult(statistic=float(statistic), p_value=p, significant=p <= alpha)


def mcnemar_test(correct_a, correct_b, alpha: float = 0.05) -> TestResult:
    """Continuity-corrected McNemar test on paired correctness indicators."""
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    if a.shape != b.shape:
        raise ConfigError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    only_a = int(np.sum(a & ~b))
    only_b = int(np.sum(~a & b))
    discordant = only_a + only_b
    if discordant == 0:
        return TestResult(statistic=0.0, p_value=1.0, significant=False, degenerate=True)
    statistic = (abs(only_a - only_b) - 1.0) ** 2 / discordant
    p = _chi2_sf_1dof(statistic)
    return TestResult(statistic=float(statistic), p_value=p, significant=p <= alpha)


def paired_t_test(errors_a, errors_b, alpha: float = 0.05) -> TestResult:
    """Two-sided paired t-test; p from the regularized incomplete beta."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise DataError(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        p = 1.0 if d.mean() == 0.0 else 0.0
        return TestResult(statistic=0.0 if d.mean() == 0.0 else math.inf, p_value=p,
                          significant=p <= alpha, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TestResult(statistic=float(t), p_value=p, significant=p <= alpha)


def as_percent(value: float) -> float:
    return 100.0 * value


def aggregate(values) -> tuple[float, float]:
    """Mean and standard deviation across folds, in percent."""
    arr = np.asarray(values, dtype=np.float64)
    return as_percent(float(arr.mean())), as_percent(float(arr.std()))


METRIC_COLUMNS = ["ndcg@10", "recall@10"]


def result_columns(attr_specs) -> list[str]:
    cols = list(METRIC_COLUMNS)
    for spec in attr_specs:
        cols.append(f"bacc_{spec.name}" if spec.kind == "categorical" else f"mae_{spec.name}")
    return cols


def write_rows_csv(path: str, fieldnames: list[str], rows: list[dict]) -> None:
    """Atomically write dict rows as CSV (floats rendered with 6 decimals)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                rendered = {}
                for key in fieldnames:
                    value = row.get(key, "")
                    if isinstance(value, float):
                        rendered[key] = f"{value:.6f}"
                    else:
                        rendered[key] = value
                writer.writerow(rendered)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
