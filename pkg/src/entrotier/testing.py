"""Mock OpenAI-compatible chat-completions servers and synthetic datasets.

Used by the test suite and by end-to-end dry runs: a `MockChatServer` wraps a
behavior callable (request body -> response body) behind a real local HTTP
endpoint, and the scripted student/teacher/judge behaviors answer
deterministically from a record list, with per-token top-k logprobs shaped so
that harder (wrongly answered) records carry visibly higher entropy.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Sequence

from .model import QuestionRecord

Behavior = Callable[[dict[str, Any]], dict[str, Any]]


class MockFailure(Exception):
    """Raise inside a behavior to make the server answer a given status."""

    def __init__(self, status: int, body: str = "mock failure"):
        super().__init__(body)
        self.status = status
        self.body = body


def stable_hash(text: str) -> int:
    """Deterministic across processes, unlike the builtin hash."""
    return int.from_bytes(hashlib.sha1(text.encode("utf-8")).digest()[:8], "big")


class MockChatServer:
    def __init__(self, behavior: Behavior, name: str = "mock"):
        self.behavior = behavior
        self.name = name
        self.request_count = 0
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802 (http.server API)
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                with server._lock:
                    server.request_count += 1
                try:
                    response = server.behavior(body)
                    payload = json.dumps(response).encode("utf-8")
                    status = 200
                except MockFailure as failure:
                    payload = failure.body.encode("utf-8")
                    status = failure.status
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args: Any) -> None:
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockChatServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> "MockChatServer":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def flaky(behavior: Behavior, failures: int, status: int = 500) -> Behavior:
    """Fail the first `failures` requests with `status`, then delegate."""
    remaining = {"n": failures}

    def wrapped(body: dict[str, Any]) -> dict[str, Any]:
        if remaining["n"] > 0:
            remaining["n"] -= 1
            raise MockFailure(status, "transient mock failure")
        return behavior(body)

    return wrapped


# ---------------------------------------------------------------------------
# Response assembly

def completion_body(
    model: str,
    token_specs: Sequence[tuple[str, Sequence[tuple[str, float]]]],
    include_logprobs: bool = True,
) -> dict[str, Any]:
    """Build a chat-completions response from (token, [(text, prob), ...])
    specs. Probabilities are converted to natural-log logprobs; the first
    entry of each spec is the sampled token."""
    content = "".join(token for token, _ in token_specs)
    items = []
    for token, dist in token_specs:
        entries = sorted(dist, key=lambda pair: pair[1], reverse=True)
        items.append(
            {
                "token": token,
                "logprob": math.log(dict(dist)[token]),
                "top_logprobs": [{"token": t, "logprob": math.log(p)} for t, p in entries],
            }
        )
    message: dict[str, Any] = {"role": "assistant", "content": content}
    choice: dict[str, Any] = {"index": 0, "message": message, "finish_reason": "stop"}
    if include_logprobs:
        choice["logprobs"] = {"content": items}
    return {
        "id": "mock-cmpl",
        "object": "chat.completion",
        "model": model,
        "choices": [choice],
    }


def _extract_messages(body: dict[str, Any]) -> tuple[str, str]:
    system = user = ""
    for message in body.get("messages", []):
        if message.get("role") == "system":
            system = message.get("content", "")
        elif message.get("role") == "user":
            user = message.get("content", "")
    return system, user


def _find_record(records: Sequence[QuestionRecord], user_text: str) -> QuestionRecord:
    for record in records:
        if record.question and record.question in user_text:
            return record
    raise MockFailure(400, "mock server could not match the question")


def _digit_distribution(
    answer: int, n_options: int, confidence: float
) -> list[tuple[str, float]]:
    """Exact distribution over the option digits: the chosen digit gets
    `confidence`, the rest share the remainder evenly (no residual mass)."""
    others = [i for i in range(1, n_options + 1) if i != answer]
    share = (1.0 - confidence) / len(others)
    dist = [(str(answer), confidence)]
    dist.extend((str(i), share) for i in others)
    return dist


def _token_dist(token: str, prob: float, alt: str = "…") -> list[tuple[str, float]]:
    return [(token, prob), (alt, 1.0 - prob)]


# ---------------------------------------------------------------------------
# Scripted actors

class ScriptedStudent:
    """Deterministic student: answers wrong on every `wrong_every`-th record
    (by stable hash) with low confidence, otherwise correctly with high
    confidence, so entropy separates hard from easy records."""

    def __init__(
        self,
        records: Sequence[QuestionRecord],
        model: str = "mock-student",
        wrong_every: int = 5,
        idk_every: int = 0,
    ):
        self.records = records
        self.model = model
        self.wrong_every = wrong_every
        self.idk_every = idk_every

    def _answer(self, record: QuestionRecord, idk_mode: bool) -> tuple[int, float]:
        h = stable_hash(record.id)
        if idk_mode and self.idk_every and h % self.idk_every == 1:
            return 0, 0.90
        if self.wrong_every and h % self.wrong_every == 0:
            wrong = record.gold_option % record.n_options + 1
            return wrong, 0.35 + (h % 16) / 100.0
        return record.gold_option, 0.80 + (h % 19) / 100.0

    def __call__(self, body: dict[str, Any]) -> dict[str, Any]:
        system, user = _extract_messages(body)
        record = _find_record(self.records, user)
        cot = "step-by-step" in system
        idk_mode = "otherwise return" in system
        answer, confidence = self._answer(record, idk_mode)
        n = record.n_options
        if answer == 0:
            answer_dist = [("0", confidence)] + [
                (str(i), (1.0 - confidence) / n) for i in range(1, n + 1)
            ]
        else:
            answer_dist = _digit_distribution(answer, n, confidence)
        if not cot:
            return completion_body(self.model, [(str(answer if answer else 0), answer_dist)])
        specs = [
            ("Step", _token_dist("Step", 0.99)),
            (" 1:", _token_dist(" 1:", 0.98)),
            (" check", _token_dist(" check", confidence)),  # peak uncertainty token
            (" each", _token_dist(" each", 0.97)),
            (" option.", _token_dist(" option.", 0.96)),
            (" Step", _token_dist(" Step", 0.99)),
            (" 2:", _token_dist(" 2:", 0.98)),
            (" pick", _token_dist(" pick", 0.95)),
            (" one.", _token_dist(" one.", 0.97)),
            (" [[", _token_dist(" [[", 0.99)),
            (str(answer), answer_dist),
            ("]]", _token_dist("]]", 0.99)),
        ]
        return completion_body(self.model, specs)


class ScriptedTeacher:
    """Teacher that reasons in the CoT format; wrong on every `wrong_every`-th
    record, format-invalid (no [[n]] span) on every `invalid_every`-th."""

    def __init__(
        self,
        records: Sequence[QuestionRecord],
        model: str = "mock-teacher",
        wrong_every: int = 7,
        invalid_every: int = 0,
    ):
        self.records = records
        self.model = model
        self.wrong_every = wrong_every
        self.invalid_every = invalid_every

    def __call__(self, body: dict[str, Any]) -> dict[str, Any]:
        _, user = _extract_messages(body)
        record = _find_record(self.records, user)
        h = stable_hash("teacher:" + record.id)
        if self.invalid_every and h % self.invalid_every == 2:
            text = "The options are all plausible and no definite answer emerges."
            return completion_body(self.model, [(text, _token_dist(text, 0.9))])
        answer = record.gold_option
        if self.wrong_every and h % self.wrong_every == 0:
            answer = record.gold_option % record.n_options + 1
        text = (
            f"We evaluate each option against the question. Option {answer} is "
            f"the one consistent with every constraint. Therefore the answer is [[{answer}]]"
        )
        return completion_body(self.model, [(text, _token_dist(text, 0.9))])


class ScriptedJudge:
    """Judge for both MASJ prompts plus the self-rating follow-up; every
    `reject_every`-th record (by stable hash) gets a rating below 9."""

    REASONING_LABELS = ("low", "medium", "high")
    EDUCATION_LABELS = ("high school and easier", "undergraduate", "graduate", "postgraduate")

    def __init__(
        self,
        records: Sequence[QuestionRecord],
        model: str = "mock-judge",
        reject_every: int = 6,
    ):
        self.records = records
        self.model = model
        self.reject_every = reject_every

    def __call__(self, body: dict[str, Any]) -> dict[str, Any]:
        system, user = _extract_messages(body)
        record = _find_record(self.records, user)
        h = stable_hash("judge:" + record.id)
        if "strict reviewer" in system:
            rejected = self.reject_every and h % self.reject_every == 0
            rating = "7" if rejected else str(9 + h % 2)
            return completion_body(self.model, [(rating, _token_dist(rating, 0.95))])
        if "Number of reasoning steps" in system:
            label = self.REASONING_LABELS[h % 3]
            text = (
                "The question requires recalling a fact and mapping it to an "
                f"option. [[Number of reasoning steps: {label}]]"
            )
        else:
            label = self.EDUCATION_LABELS[h % 4]
            text = f"The material is standard coursework. Complexity: [[{label}]]"
        return completion_body(self.model, [(text, _token_dist(text, 0.9))])


# ---------------------------------------------------------------------------
# Synthetic data

SUBJECTS = ("algebra", "biology", "history", "physics")


def synthetic_records(n: int, n_options: int = 4, seed: int = 0) -> list[QuestionRecord]:
    records = []
    for i in range(n):
        h = stable_hash(f"{seed}:{i}")
        gold = h % n_options + 1
        records.append(
            QuestionRecord(
                id=f"q{i:04d}",
                subject=SUBJECTS[i % len(SUBJECTS)],
                question=f"Synthetic item {i}: which choice is marked number {gold}?",
                options=tuple(f"choice marked number {j}" for j in range(1, n_options + 1)),
                gold_option=gold,
                source_tag="synthetic",
            )
        )
    return records
