"""Complexity and uncertainty metrics.

All entropies are in nats (natural log). Per-token entropy treats the
uncaptured residual mass as one pseudo-event, which lower-bounds the true
full-vocabulary entropy; traces with residual 0 are exact.

Aggregation methods operate on a `TraceProfile` (per-event entropies, top-2
probability margins, claim boundaries, answer-event index) extracted from a
trace, so the formulas are testable independently of distribution shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .model import ComplexityScore, PromptMode, QuestionRecord, ResponseTrace, TokenEvent


class MetricError(Exception):
    pass


class InvalidTrace(MetricError):
    pass


class EmptyTrace(MetricError):
    pass


class UnknownMethod(MetricError):
    pass


# Methods with a dedicated operation (not handled by `aggregate`).
ANSWER_ENTROPY = "answer_entropy"
COT_ANSWER_ENTROPY = "cot_answer_entropy"
GOLD_CROSS_ENTROPY = "gold_cross_entropy"

# Chain-of-thought aggregation methods.
COT_MEAN = "cot_mean"
COT_MAX = "cot_max"
COT_MAX_MINUS_ANSWER = "cot_max_minus_answer"
SEQ_MEAN_MEAN = "seq_mean_mean"
SEQ_MEAN_MAX = "seq_mean_max"
SEQ_MAX_MEAN = "seq_max_mean"
MARGINAL_DIFF_MEAN = "marginal_diff_mean"
TOP2_ENTROPY_DIFF = "top2_entropy_diff"
HYBRID_MIX = "hybrid_mix"

# Model-as-judge scores enter the shared score files under these identifiers.
MASJ_REASONING_STEPS = "masj_reasoning_steps"
MASJ_EDUCATION_LEVEL = "masj_education_level"

AGGREGATE_METHODS = frozenset(
    {
        COT_MEAN,
        COT_MAX,
        COT_MAX_MINUS_ANSWER,
        SEQ_MEAN_MEAN,
        SEQ_MEAN_MAX,
        SEQ_MAX_MEAN,
        MARGINAL_DIFF_MEAN,
        TOP2_ENTROPY_DIFF,
        HYBRID_MIX,
    }
)

METHOD_NAMES = AGGREGATE_METHODS | {
    ANSWER_ENTROPY,
    COT_ANSWER_ENTROPY,
    GOLD_CROSS_ENTROPY,
    MASJ_REASONING_STEPS,
    MASJ_EDUCATION_LEVEL,
}


@dataclass(frozen=True)
class MethodId:
    """A method identifier; `hybrid_mix` carries its mixing weight alpha.

    Canonical string form is the method name, with hybrid_mix serialized as
    `hybrid_mix@<alpha>` (alpha in repr form so parsing round-trips exactly).
    """

    name: str
    alpha: float | None = None

    def __post_init__(self) -> None:
        if self.name not in METHOD_NAMES:
            raise UnknownMethod(f"unknown method {self.name!r}")
        if self.name == HYBRID_MIX:
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise UnknownMethod(f"hybrid_mix alpha must be in [0,1], got {self.alpha!r}")
        elif self.alpha is not None:
            raise UnknownMethod(f"method {self.name!r} takes no alpha")

    def __str__(self) -> str:
        if self.name == HYBRID_MIX:
            return f"{self.name}@{self.alpha!r}"
        return self.name

    @classmethod
    def parse(cls, text: str) -> "MethodId":
        if "@" in text:
            name, _, alpha = text.partition("@")
            try:
                return cls(name, float(alpha))
            except ValueError as exc:
                raise UnknownMethod(f"bad method string {text!r}") from exc
        return cls(text)


def hybrid_mix(alpha: float = 0.05) -> MethodId:
    """The tuned default alpha is 0.05."""
    return MethodId(HYBRID_MIX, alpha)


def is_known_method(text: str) -> bool:
    try:
        MethodId.parse(text)
        return True
    except UnknownMethod:
        return False


def methods_for_mode(mode: PromptMode) -> list[str]:
    """Method names computable from traces of the given prompt mode."""
    if mode.is_cot:
        return [COT_ANSWER_ENTROPY, *sorted(AGGREGATE_METHODS)]
    return [ANSWER_ENTROPY, GOLD_CROSS_ENTROPY]


# ---------------------------------------------------------------------------
# Per-token metrics

_RESIDUAL_FLOOR = 1e-9
_CROSS_ENTROPY_CAP = 23.0  # -ln of a 1e-10 floor probability, clamped
_PROB_FLOOR = 1e-10


def token_entropy(event: TokenEvent) -> float:
    """Shannon entropy -sum p*ln(p) of one token's truncated distribution.

    The residual mass is folded in as a single pseudo-event when it exceeds
    1e-9. Uses exact summation so the result is invariant under permutation
    of the entries.
    """
    terms = [-math.exp(lp) * lp for _, lp in event.top_entries]
    r = event.residual_mass
    if r > _RESIDUAL_FLOOR:
        terms.append(-r * math.log(r))
    return max(math.fsum(terms), 0.0)


def gold_cross_entropy(event: TokenEvent, gold_text: str) -> float:
    """-ln p(gold token) read from the captured entries.

    When the gold token was not captured, the best available bound is the
    residual mass; the result is clamped to 23.0 (floor probability 1e-10).
    """
    for text, lp in event.top_entries:
        if text == gold_text:
            return -lp
    return min(-math.log(max(event.residual_mass, _PROB_FLOOR)), _CROSS_ENTROPY_CAP)


def answer_entropy(trace: ResponseTrace) -> float:
    """Entropy of the answer-token distribution (events[0] for single-token
    prompts, the answer-digit event for chain-of-thought prompts)."""
    if not trace.is_valid or trace.answer_event_index is None:
        raise InvalidTrace(f"trace {trace.record_id!r} has no valid answer")
    return token_entropy(trace.events[trace.answer_event_index])


# ---------------------------------------------------------------------------
# Claim segmentation

_SENTENCE_END = (".", "!", "?")


@dataclass(frozen=True)
class ClaimSegmentation:
    """Contiguous, non-overlapping [start, end) event ranges covering a trace."""

    boundaries: tuple[tuple[int, int], ...]

    def validate(self, n_events: int) -> None:
        if not self.boundaries:
            raise EmptyTrace("segmentation must contain at least one claim")
        expected = 0
        for start, end in self.boundaries:
            if start != expected or end <= start:
                raise MetricError(f"claim ranges must tile the trace, got {self.boundaries}")
            expected = end
        if expected != n_events:
            raise MetricError(f"claims cover {expected} events, trace has {n_events}")


def _ends_claim(token_text: str) -> bool:
    if "\n" in token_text:
        return True
    return token_text.rstrip(" \t").endswith(_SENTENCE_END)


def segment_claims(events: tuple[TokenEvent, ...] | list[TokenEvent]) -> ClaimSegmentation:
    """Split events into claims at sentence-final punctuation or newlines.

    Recomputed deterministically from token texts; a trace with no boundary
    tokens is one single claim.
    """
    if not events:
        raise EmptyTrace("cannot segment an empty trace")
    boundaries: list[tuple[int, int]] = []
    start = 0
    for i, event in enumerate(events):
        if _ends_claim(event.token_text):
            boundaries.append((start, i + 1))
            start = i + 1
    if start < len(events):
        boundaries.append((start, len(events)))
    return ClaimSegmentation(tuple(boundaries))


# ---------------------------------------------------------------------------
# Chain-of-thought aggregation

@dataclass(frozen=True)
class TraceProfile:
    """Everything the aggregation formulas need from a trace."""

    entropies: tuple[float, ...]
    margins: tuple[float, ...]  # p(1) - p(2) per event
    answer_index: int | None
    claims: ClaimSegmentation


def _event_margin(event: TokenEvent) -> float:
    # Residual mass is a bucket, not a single token, so a missing second
    # entry contributes probability 0 to the margin.
    if not event.top_entries:
        return 0.0
    p1 = math.exp(event.top_entries[0][1])
    p2 = math.exp(event.top_entries[1][1]) if len(event.top_entries) > 1 else 0.0
    return p1 - p2


def trace_profile(trace: ResponseTrace, seg: ClaimSegmentation | None = None) -> TraceProfile:
    if not trace.events:
        raise EmptyTrace(f"trace {trace.record_id!r} has no events")
    if seg is None:
        seg = segment_claims(trace.events)
    seg.validate(len(trace.events))
    return TraceProfile(
        entropies=tuple(token_entropy(e) for e in trace.events),
        margins=tuple(_event_margin(e) for e in trace.events),
        answer_index=trace.answer_event_index,
        claims=seg,
    )


def _mean(values: list[float] | tuple[float, ...]) -> float:
    return math.fsum(values) / len(values)


def aggregate_profile(profile: TraceProfile, method: MethodId) -> float:
    """Evaluate one aggregation method over a trace profile."""
    h = profile.entropies
    if not h:
        raise EmptyTrace("profile has no events")
    name = method.name

    if name == COT_MEAN:
        return _mean(h)
    if name == COT_MAX:
        return max(h)
    if name in (COT_MAX_MINUS_ANSWER, HYBRID_MIX):
        if profile.answer_index is None:
            raise InvalidTrace("method needs the answer-event entropy")
        h_answer = h[profile.answer_index]
        if name == COT_MAX_MINUS_ANSWER:
            return abs(max(h) - h_answer)
        alpha = method.alpha if method.alpha is not None else 0.05
        return (1.0 - alpha) * h_answer + alpha * max(h)
    if name in (SEQ_MEAN_MEAN, SEQ_MEAN_MAX, SEQ_MAX_MEAN):
        claim_means = [_mean(h[s:e]) for s, e in profile.claims.boundaries]
        claim_maxes = [max(h[s:e]) for s, e in profile.claims.boundaries]
        if name == SEQ_MEAN_MEAN:
            return _mean(claim_means)
        if name == SEQ_MEAN_MAX:
            return _mean(claim_maxes)
        return max(claim_means)
    if name == MARGINAL_DIFF_MEAN:
        return _mean(profile.margins)
    if name == TOP2_ENTROPY_DIFF:
        if len(h) < 2:
            return 0.0
        first, second = sorted(h, reverse=True)[:2]
        return first - second
    raise UnknownMethod(f"{name!r} is not an aggregation method")


def aggregate(trace: ResponseTrace, seg: ClaimSegmentation | None, method: MethodId) -> float:
    """Aggregate a chain-of-thought trace into one complexity scalar."""
    if method.name not in AGGREGATE_METHODS:
        raise UnknownMethod(f"{method.name!r} has a dedicated operation, not an aggregate")
    if not trace.events:
        raise EmptyTrace(f"trace {trace.record_id!r} has no events")
    if not trace.is_valid:
        raise InvalidTrace(f"trace {trace.record_id!r} is not valid")
    return aggregate_profile(trace_profile(trace, seg), method)


def score_trace(
    trace: ResponseTrace, record: QuestionRecord, methods: Sequence[MethodId]
) -> list[ComplexityScore]:
    """Compute the given methods for one trace. Methods needing a valid answer
    are skipped on invalid traces; gold cross-entropy reads the first-token
    distribution and works regardless of answer validity."""
    rows = []
    for method in methods:
        try:
            if method.name in (ANSWER_ENTROPY, COT_ANSWER_ENTROPY):
                value = answer_entropy(trace)
            elif method.name == GOLD_CROSS_ENTROPY:
                if not trace.events:
                    continue
                value = gold_cross_entropy(trace.events[0], str(record.gold_option))
            else:
                value = aggregate(trace, None, method)
        except (InvalidTrace, EmptyTrace):
            continue
        rows.append(ComplexityScore(trace.record_id, str(method), value))
    return rows
