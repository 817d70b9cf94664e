"""Model-as-judge complexity scores: reasoning-steps and education level.

Each record gets two sequential judge calls: the assessment itself, then an
MT-Bench-style self-rating of that assessment from 1 to 10. Only assessments
rated 9 or 10 are accepted; rejected ones never contribute complexity scores.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import metrics
from .gateway import ChatClient, EndpointConfig
from .model import ComplexityScore, QuestionRecord, read_jsonl, write_jsonl


class MasjError(Exception):
    pass


class UnknownLabel(MasjError):
    pass


class MasjKind(Enum):
    REASONING_STEPS = "reasoning_steps"
    EDUCATION_LEVEL = "education_level"


SELF_RATING_THRESHOLD = 9
INVALID_LABEL = "invalid"

REASONING_PROMPT = (
    "You are an expert in the topic of the question. Please act as an impartial "
    "judge and evaluate the complexity of the multiple-choice question with "
    "options below.\n"
    "Begin your evaluation by providing a short explanation. Be as objective as "
    "possible. After providing your explanation, you must not answer the "
    "question.\n"
    "You must rate the question complexity by strictly following the criteria:\n"
    "[[Number of reasoning steps]] - how many reasoning steps do you need to "
    "answer this question? Valid answers: low, medium, high.\n"
    'Your answer must strictly follow this format: "[[Number of reasoning steps: '
    'answer]]".\n'
    'Example 1: "Your explanation... [[Number of reasoning steps: low]]".\n'
    'Example 2: "Your explanation... [[Number of reasoning steps: high]]".\n'
    'Example 3: "Your explanation... [[Number of reasoning steps: medium]]".'
)

EDUCATION_PROMPT = (
    "You are an expert in the topic of the question. Please act as an impartial "
    "judge and evaluate the complexity of the multiple-choice question with "
    "options below. Begin your evaluation by providing a short explanation. Be "
    "as objective as possible. After providing your explanation, you must not "
    "answer the question. You must rate the question complexity by strictly "
    'following the scale: "high school and easier", "undergraduate", '
    '"graduate", "postgraduate". You must return the complexity by strictly '
    'following this format: "[[complexity]]", for example: "Your explanation... '
    'Complexity: [[undergraduate]]", which corresponds to the undergraduate '
    "level."
)

# The self-rating prompt is fixed so the >= 9 exclusion rule is reproducible.
# It quotes the first reply and includes the original question.
RATING_SYSTEM_PROMPT = (
    "You are a strict reviewer of question-complexity assessments. Rate the "
    "quality of the assessment you are given from 1 to 10. Answer with a "
    "single integer and nothing else."
)
RATING_USER_TEMPLATE = (
    "The question under assessment was:\n{question_block}\n\n"
    "The assessment was:\n{assessment}\n\n"
    "Rate the quality of the above assessment from 1 to 10. Answer with a "
    "single integer and nothing else."
)

ENCODINGS: dict[MasjKind, dict[str, float]] = {
    MasjKind.EDUCATION_LEVEL: {
        "high school and easier": 0.2,
        "undergraduate": 0.4,
        "graduate": 0.6,
        "postgraduate": 0.8,
    },
    MasjKind.REASONING_STEPS: {
        "low": 0.25,
        "medium": 0.5,
        "high": 0.75,
    },
}

_SCORE_METHOD = {
    MasjKind.REASONING_STEPS: metrics.MASJ_REASONING_STEPS,
    MasjKind.EDUCATION_LEVEL: metrics.MASJ_EDUCATION_LEVEL,
}


@dataclass(frozen=True)
class MasjAssessment:
    record_id: str
    kind: MasjKind
    label: str
    self_rating: int  # 0 when the rating reply could not be parsed
    accepted: bool
    encoded: float | None


def encode(label: str, kind: MasjKind) -> float:
    """Ordinal encoding of a judge label, per the fixed per-kind tables."""
    table = ENCODINGS[kind]
    key = label.strip().lower()
    if key not in table:
        raise UnknownLabel(f"{label!r} is not a {kind.value} label")
    return table[key]


_BRACKET_RE = re.compile(r"\[\[(.*?)\]\]", re.DOTALL)


def parse_label(text: str, kind: MasjKind) -> str | None:
    """Pull the judged label from a reply; the last bracketed group wins.

    Case-insensitive and whitespace-tolerant; a `prefix: value` group is read
    as its value part.
    """
    groups = _BRACKET_RE.findall(text)
    if not groups:
        return None
    candidate = groups[-1]
    if ":" in candidate:
        candidate = candidate.rsplit(":", 1)[1]
    candidate = candidate.strip().lower()
    return candidate if candidate in ENCODINGS[kind] else None


_INT_RE = re.compile(r"\d+")


def parse_rating(text: str) -> int | None:
    m = _INT_RE.search(text)
    if m is None:
        return None
    value = int(m.group(0))
    return value if 1 <= value <= 10 else None


def _question_block(record: QuestionRecord) -> str:
    lines = [f"Question: {record.question}", "Options:"]
    lines.extend(f"{i}. {text}" for i, text in enumerate(record.options, start=1))
    return "\n".join(lines)


def judge(
    record: QuestionRecord,
    kind: MasjKind,
    endpoint: EndpointConfig,
    client: ChatClient | None = None,
) -> MasjAssessment:
    """Run the two-call judge protocol for one record."""
    system = REASONING_PROMPT if kind == MasjKind.REASONING_STEPS else EDUCATION_PROMPT
    own_client = client is None
    client = client or ChatClient(endpoint)
    try:
        reply, _ = client.complete(system, _question_block(record), want_logprobs=False)
        rating_user = RATING_USER_TEMPLATE.format(
            question_block=_question_block(record), assessment=reply
        )
        rating_reply, _ = client.complete(RATING_SYSTEM_PROMPT, rating_user, want_logprobs=False)
    finally:
        if own_client:
            client.close()

    label = parse_label(reply, kind)
    rating = parse_rating(rating_reply)
    if label is None:
        return MasjAssessment(record.id, kind, INVALID_LABEL, rating or 0, False, None)
    accepted = rating is not None and rating >= SELF_RATING_THRESHOLD
    return MasjAssessment(record.id, kind, label, rating or 0, accepted, encode(label, kind))


def judge_records(
    records: Sequence[QuestionRecord],
    kind: MasjKind,
    endpoint: EndpointConfig,
) -> list[MasjAssessment]:
    with ChatClient(endpoint) as client:
        return [judge(record, kind, endpoint, client) for record in records]


def assessments_to_scores(assessments: Iterable[MasjAssessment]) -> list[ComplexityScore]:
    """Accepted assessments only; rejected ones are dropped here."""
    return [
        ComplexityScore(a.record_id, _SCORE_METHOD[a.kind], a.encoded)
        for a in assessments
        if a.accepted and a.encoded is not None
    ]


# ---------------------------------------------------------------------------
# Persistence: masj_<kind>.jsonl

def assessment_to_dict(a: MasjAssessment) -> dict[str, Any]:
    return {
        "record_id": a.record_id,
        "kind": a.kind.value,
        "label": a.label,
        "self_rating": a.self_rating,
        "accepted": a.accepted,
        "encoded": a.encoded,
    }


def assessment_from_dict(row: dict[str, Any]) -> MasjAssessment:
    return MasjAssessment(
        record_id=row["record_id"],
        kind=MasjKind(row["kind"]),
        label=row["label"],
        self_rating=row["self_rating"],
        accepted=row["accepted"],
        encoded=row["encoded"],
    )


def assessment_file_name(kind: MasjKind) -> str:
    return f"masj_{kind.value}.jsonl"


def write_assessments(run_dir: str | Path, assessments: Sequence[MasjAssessment], kind: MasjKind) -> Path:
    path = Path(run_dir) / assessment_file_name(kind)
    write_jsonl(path, (assessment_to_dict(a) for a in assessments))
    return path


def read_assessments(run_dir: str | Path, kind: MasjKind) -> list[MasjAssessment]:
    path = Path(run_dir) / assessment_file_name(kind)
    return [assessment_from_dict(row) for row in read_jsonl(path)]
