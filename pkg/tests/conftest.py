from __future__ import annotations

import math
import random

import pytest

from entrotier.model import PromptMode, QuestionRecord, ResponseTrace, TokenEvent


@pytest.fixture
def fixture_record() -> QuestionRecord:
    return QuestionRecord(
        id="fx1",
        subject="college mathematics",
        question="What is 2 + 2?",
        options=("3", "4", "5", "22"),
        gold_option=2,
        source_tag="fixture",
    )


def make_event(probs, texts=None, residual=None) -> TokenEvent:
    """Event from explicit probabilities; residual defaults to the leftover."""
    texts = texts or [f"t{i}" for i in range(len(probs))]
    entries = tuple((t, math.log(p)) for t, p in zip(texts, probs))
    if residual is None:
        residual = max(0.0, 1.0 - sum(probs))
    return TokenEvent(
        token_text=texts[0],
        chosen_logprob=math.log(probs[0]),
        top_entries=entries,
        residual_mass=residual,
    )


def make_trace(events, record_id="r1", mode=PromptMode.COT, answer_index=None, parsed=1):
    events = tuple(events)
    if answer_index is None:
        answer_index = len(events) - 1
    return ResponseTrace(
        record_id=record_id,
        prompt_mode=mode,
        events=events,
        parsed_answer=parsed,
        answer_event_index=answer_index,
        is_valid=True,
        raw_text="".join(e.token_text for e in events),
    )


def random_distribution(rng: random.Random, k: int) -> list[float]:
    """k probabilities summing to <= 1 with a real residual left over."""
    weights = [rng.expovariate(1.0) for _ in range(k + rng.randint(0, 3))]
    total = sum(weights)
    probs = sorted((w / total for w in weights), reverse=True)[:k]
    return probs


def random_trace(rng: random.Random, max_events: int = 12) -> ResponseTrace:
    """Valid CoT-shaped trace with random distributions and random sentence
    boundaries; the answer event is a random position."""
    n = rng.randint(1, max_events)
    events = []
    for i in range(n):
        probs = random_distribution(rng, rng.randint(1, 6))
        text = rng.choice(["word", " next", " go.", " stop!", " eh?", " mid", "\n"])
        event = make_event(probs)
        events.append(
            TokenEvent(
                token_text=text,
                chosen_logprob=event.chosen_logprob,
                top_entries=event.top_entries,
                residual_mass=event.residual_mass,
            )
        )
    return make_trace(events, record_id=f"rng{rng.random():.10f}", answer_index=rng.randrange(n))
