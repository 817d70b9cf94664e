"""Estimator-quality evaluation.

ROC AUC uses the rank-based Mann-Whitney statistic (ties credited 0.5), with
"model answered incorrectly" as the positive class so a useful difficulty
estimator scores above 0.5. Accuracy follows the exclusion rules: IDK and
invalid-format responses leave the denominator entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .metrics import token_entropy
from .model import ResponseTrace


class EvaluationError(Exception):
    pass


class DegenerateLabels(EvaluationError):
    """Only one outcome class present; ranking metrics are undefined."""


class EmptySet(EvaluationError):
    """No responses survive the exclusion rules."""


class NonFiniteFeature(EvaluationError):
    pass


@dataclass(frozen=True)
class LabeledScore:
    record_id: str
    score: float
    incorrect: bool  # positive class


def roc_auc(pairs: Sequence[LabeledScore]) -> float:
    """Probability that a random positive outranks a random negative.

    Computed by sort-and-rank with average ranks on ties, which equals the
    pairwise statistic (1 per win, 0.5 per tie) and the trapezoidal ROC area.
    """
    scores = [p.score for p in pairs]
    if any(not math.isfinite(s) for s in scores):
        raise EvaluationError("scores must be finite")
    n_pos = sum(1 for p in pairs if p.incorrect)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positive / {n_neg} negative")

    order = sorted(range(len(pairs)), key=lambda i: scores[i])
    ranks = [0.0] * len(pairs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # Tied block gets the average rank; always a multiple of 0.5, so the
        # rank sum below is exact and matches the pairwise oracle bit-for-bit.
        avg = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1

    rank_sum = math.fsum(ranks[i] for i, p in enumerate(pairs) if p.incorrect)
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class AccuracyReport:
    value: float
    n_valid: int  # answered with a concrete option (the denominator)
    n_idk: int
    n_invalid: int


def accuracy(
    traces: Sequence[ResponseTrace],
    gold_by_id: Mapping[str, int],
    exclude_idk: bool = True,
    exclude_invalid: bool = True,
) -> AccuracyReport:
    """Fraction of concrete answers matching gold, with exclusion counts."""
    n_correct = 0
    n_valid = 0
    n_idk = 0
    n_invalid = 0
    denominator = 0
    for trace in traces:
        if not trace.is_valid:
            n_invalid += 1
            if not exclude_invalid:
                denominator += 1
            continue
        if trace.parsed_answer == 0:
            n_idk += 1
            if not exclude_idk:
                denominator += 1
            continue
        n_valid += 1
        denominator += 1
        if trace.parsed_answer == gold_by_id[trace.record_id]:
            n_correct += 1
    if denominator == 0:
        raise EmptySet("no responses left after exclusions")
    return AccuracyReport(n_correct / denominator, n_valid, n_idk, n_invalid)


# ---------------------------------------------------------------------------
# Logistic-regression feature importance

FEATURE_NAMES = (
    "thinking_total_entropy",
    "thinking_num_tokens",
    "answer_total_entropy",
    "answer_length",
)

MAX_THINKING_TOKENS = 5000  # mirrors the reasoning-trace generation cap


@dataclass(frozen=True)
class FeatureRow:
    thinking_total_entropy: float
    thinking_num_tokens: int
    answer_total_entropy: float
    answer_length: int
    incorrect: bool

    def as_vector(self) -> list[float]:
        return [
            self.thinking_total_entropy,
            float(self.thinking_num_tokens),
            self.answer_total_entropy,
            float(self.answer_length),
        ]


def feature_row_from_trace(trace: ResponseTrace, gold: int) -> FeatureRow | None:
    """Split a valid CoT trace at its answer event: before = thinking segment,
    from the answer event on = answer segment. Returns None for traces the
    evaluation excludes (invalid or IDK)."""
    if not trace.is_valid or trace.parsed_answer in (None, 0):
        return None
    if trace.answer_event_index is None:
        return None
    split = trace.answer_event_index
    thinking = trace.events[:split][:MAX_THINKING_TOKENS]
    answer = trace.events[split:]
    return FeatureRow(
        thinking_total_entropy=math.fsum(token_entropy(e) for e in thinking),
        thinking_num_tokens=len(thinking),
        answer_total_entropy=math.fsum(token_entropy(e) for e in answer),
        answer_length=len(answer),
        incorrect=trace.parsed_answer != gold,
    )


def feature_rows(
    traces: Sequence[ResponseTrace], gold_by_id: Mapping[str, int]
) -> list[FeatureRow]:
    rows = []
    for trace in traces:
        if trace.prompt_mode.is_cot:
            row = feature_row_from_trace(trace, gold_by_id[trace.record_id])
            if row is not None:
                rows.append(row)
    return rows


@dataclass(frozen=True)
class RegressionConfig:
    iterations: int = 5000
    step: float = 0.1
    l2: float = 1e-4
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class FeatureImportance:
    abs_weights: dict[str, float]
    holdout_accuracy: float
    config: RegressionConfig = field(default=RegressionConfig())

    def ordering(self) -> list[str]:
        return sorted(self.abs_weights, key=self.abs_weights.__getitem__, reverse=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_feature_importance(
    rows: Sequence[FeatureRow], config: RegressionConfig = RegressionConfig()
) -> FeatureImportance:
    """Binary logistic regression by full-batch gradient descent on
    standardized features; absolute coefficients are the importances.

    Standardization statistics come from the training split only; the
    held-out fraction provides the reported accuracy.
    """
    if len(rows) < 20:
        raise EvaluationError(f"need at least 20 rows, got {len(rows)}")
    X = np.array([row.as_vector() for row in rows], dtype=np.float64)
    y = np.array([1.0 if row.incorrect else 0.0 for row in rows])
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("feature matrix contains non-finite values")
    if y.min() == y.max():
        raise DegenerateLabels("both outcome classes are required")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(rows))
    n_hold = max(1, int(round(config.holdout_fraction * len(rows))))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    X_train, y_train = X[train_idx], y[train_idx]
    X_hold, y_hold = X[hold_idx], y[hold_idx]
    if y_train.min() == y_train.max():
        raise DegenerateLabels("training split collapsed to one class")

    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)
    std[std == 0.0] = 1.0
    X_train = (X_train - mean) / std
    X_hold = (X_hold - mean) / std

    n, d = X_train.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(config.iterations):
        p = _sigmoid(X_train @ w + b)
        grad_w = X_train.T @ (p - y_train) / n + config.l2 * w
        grad_b = float(np.mean(p - y_train))
        w -= config.step * grad_w
        b -= config.step * grad_b

    predictions = (_sigmoid(X_hold @ w + b) >= 0.5).astype(np.float64)
    holdout_accuracy = float(np.mean(predictions == y_hold))
    abs_weights = {name: float(abs(w[i])) for i, name in enumerate(FEATURE_NAMES)}
    return FeatureImportance(abs_weights, holdout_accuracy, config)
