"""Core domain types: question records, token-level response traces, complexity
scores, tiers, distillation samples, and the training manifest.

All types are immutable after construction and safe to share across workers.
The JSONL field names used by `*_to_dict` / `*_from_dict` are the external wire
format; round-tripping any valid value through them yields an equal value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator


class Tier(Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @property
    def rank(self) -> int:
        return _TIER_ORDER[self]

    def __lt__(self, other: "Tier") -> bool:
        if not isinstance(other, Tier):
            return NotImplemented
        return self.rank < other.rank


_TIER_ORDER = {Tier.EASY: 0, Tier.MEDIUM: 1, Tier.HARD: 2}

# "Regular" data is everything that does not get teacher reasoning.
REGULAR_TIERS = (Tier.EASY, Tier.MEDIUM)


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class PromptMode(Enum):
    SINGLE_TOKEN = "single_token"
    SINGLE_TOKEN_IDK = "single_token_idk"
    COT = "cot"
    COT_IDK = "cot_idk"

    @property
    def is_idk(self) -> bool:
        return self in (PromptMode.SINGLE_TOKEN_IDK, PromptMode.COT_IDK)

    @property
    def is_cot(self) -> bool:
        return self in (PromptMode.COT, PromptMode.COT_IDK)


@dataclass(frozen=True)
class QuestionRecord:
    """One multiple-choice item. Options are 1-based; 0 is reserved for IDK."""

    id: str
    subject: str
    question: str
    options: tuple[str, ...]
    gold_option: int
    source_tag: str

    @property
    def n_options(self) -> int:
        return len(self.options)


@dataclass(frozen=True)
class TokenEvent:
    """One generated token plus its truncated probability distribution.

    `top_entries` holds (token_text, logprob) pairs sorted by probability
    descending; logprobs are natural-log units. `residual_mass` is the
    probability not covered by the captured entries (0 for full-vocabulary
    dumps), clamped at 0.
    """

    token_text: str
    chosen_logprob: float
    top_entries: tuple[tuple[str, float], ...]
    residual_mass: float = 0.0


@dataclass(frozen=True)
class ResponseTrace:
    """A full model response under one prompt mode.

    `parsed_answer`: 0 = IDK (only under an IDK mode), 1..n = option number,
    None = invalid format. `answer_event_index` points at the event carrying
    the answer digit and is present iff `is_valid`.
    """

    record_id: str
    prompt_mode: PromptMode
    events: tuple[TokenEvent, ...]
    parsed_answer: int | None
    answer_event_index: int | None
    is_valid: bool
    raw_text: str


@dataclass(frozen=True)
class ComplexityScore:
    record_id: str
    method: str
    value: float


@dataclass(frozen=True)
class DistillationSample:
    """(question, teacher reasoning, answer) triple for hard-question SFT."""

    record_id: str
    teacher_reasoning: str
    final_answer: int
    teacher_id: str
    teacher_wrong: bool = False


@dataclass(frozen=True)
class TrainingManifest:
    """Pipeline output: plain SFT rows for regular data, teacher-reasoning rows
    for hard data, split assignments, per-arm token totals, and provenance."""

    regular_sft: tuple[tuple[str, str], ...]  # (record_id, target answer text)
    hard_cot: tuple[DistillationSample, ...]
    split: dict[str, Split]
    token_counts: dict[str, int] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    def referenced_ids(self) -> set[str]:
        return {rid for rid, _ in self.regular_sft} | {s.record_id for s in self.hard_cot}


# ---------------------------------------------------------------------------
# Validation


def validate_record(record: QuestionRecord) -> list[str]:
    """Check one record's invariants. Returns violation messages; empty = ok."""
    violations: list[str] = []
    if not record.id:
        violations.append("id empty")
    if len(record.options) < 2:
        violations.append("fewer than 2 options")
    for i, text in enumerate(record.options, start=1):
        if not text:
            violations.append(f"option {i} empty")
    if not 1 <= record.gold_option <= len(record.options):
        violations.append("gold_option out of range")
    return violations


def validate_records(records: Iterable[QuestionRecord]) -> dict[str, list[str]]:
    """Batch validation; adds the cross-record duplicate-id check."""
    seen: set[str] = set()
    result: dict[str, list[str]] = {}
    for record in records:
        violations = validate_record(record)
        if record.id in seen:
            violations.append("duplicate id")
        seen.add(record.id)
        if violations:
            result[record.id] = violations
    return result


# ---------------------------------------------------------------------------
# JSONL wire format


def record_to_dict(record: QuestionRecord) -> dict[str, Any]:
    return {
        "id": record.id,
        "subject": record.subject,
        "question": record.question,
        "options": list(record.options),
        "gold_option": record.gold_option,
        "source_tag": record.source_tag,
    }


def record_from_dict(row: dict[str, Any]) -> QuestionRecord:
    return QuestionRecord(
        id=row["id"],
        subject=row["subject"],
        question=row["question"],
        options=tuple(row["options"]),
        gold_option=row["gold_option"],
        source_tag=row["source_tag"],
    )


def event_to_dict(event: TokenEvent) -> dict[str, Any]:
    return {
        "token_text": event.token_text,
        "chosen_logprob": event.chosen_logprob,
        "top_entries": [[text, lp] for text, lp in event.top_entries],
        "residual_mass": event.residual_mass,
    }


def event_from_dict(row: dict[str, Any]) -> TokenEvent:
    return TokenEvent(
        token_text=row["token_text"],
        chosen_logprob=row["chosen_logprob"],
        top_entries=tuple((text, lp) for text, lp in row["top_entries"]),
        residual_mass=row["residual_mass"],
    )


def trace_to_dict(trace: ResponseTrace) -> dict[str, Any]:
    return {
        "record_id": trace.record_id,
        "prompt_mode": trace.prompt_mode.value,
        "events": [event_to_dict(e) for e in trace.events],
        "parsed_answer": trace.parsed_answer,
        "answer_event_index": trace.answer_event_index,
        "is_valid": trace.is_valid,
        "raw_text": trace.raw_text,
    }


def trace_from_dict(row: dict[str, Any]) -> ResponseTrace:
    return ResponseTrace(
        record_id=row["record_id"],
        prompt_mode=PromptMode(row["prompt_mode"]),
        events=tuple(event_from_dict(e) for e in row["events"]),
        parsed_answer=row["parsed_answer"],
        answer_event_index=row["answer_event_index"],
        is_valid=row["is_valid"],
        raw_text=row["raw_text"],
    )


def score_to_dict(score: ComplexityScore) -> dict[str, Any]:
    return {"record_id": score.record_id, "method": score.method, "value": score.value}


def score_from_dict(row: dict[str, Any]) -> ComplexityScore:
    return ComplexityScore(record_id=row["record_id"], method=row["method"], value=row["value"])


def sample_to_dict(sample: DistillationSample) -> dict[str, Any]:
    return {
        "record_id": sample.record_id,
        "teacher_reasoning": sample.teacher_reasoning,
        "final_answer": sample.final_answer,
        "teacher_id": sample.teacher_id,
        "teacher_wrong": sample.teacher_wrong,
    }


def sample_from_dict(row: dict[str, Any]) -> DistillationSample:
    return DistillationSample(
        record_id=row["record_id"],
        teacher_reasoning=row["teacher_reasoning"],
        final_answer=row["final_answer"],
        teacher_id=row["teacher_id"],
        teacher_wrong=row.get("teacher_wrong", False),
    )


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def read_records(path: str | Path) -> list[QuestionRecord]:
    return [record_from_dict(row) for row in read_jsonl(path)]


def write_records(path: str | Path, records: Iterable[QuestionRecord]) -> None:
    write_jsonl(path, (record_to_dict(r) for r in records))
