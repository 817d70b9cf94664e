"""Student/teacher/judge endpoint access: prompt construction, answer parsing,
chat-completions calls with per-token logprob capture, and the idempotent
trace store.

Wire protocol is the OpenAI-compatible chat-completions API (request fields
model, messages, temperature, max_tokens, logprobs, top_logprobs). Traces are
stored one per line under the run directory as traces_<model>_<mode>.jsonl;
each row is the ResponseTrace wire dict plus a `config_hash` provenance key.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence

import httpx

from .model import (
    PromptMode,
    QuestionRecord,
    ResponseTrace,
    TokenEvent,
    trace_from_dict,
    trace_to_dict,
)


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Network-level failure that survived the retry budget."""


class ProviderError(GatewayError):
    """Non-2xx response from the endpoint."""

    def __init__(self, status: int, body: str):
        super().__init__(f"provider returned {status}: {body[:500]}")
        self.status = status
        self.body = body


class LogprobsUnsupported(GatewayError):
    """Endpoint answered without per-token logprobs."""


class IdkVariant(Enum):
    CERTAIN = "certain"
    KNOW = "know"


# System prompts, keyed by (mode, idk variant). `{subject}` is substituted
# verbatim; the templates themselves must not be edited (downstream answer
# parsing relies on the formats they demand).
SYSTEM_PROMPTS: dict[tuple[PromptMode, IdkVariant | None], str] = {
    (PromptMode.SINGLE_TOKEN, None): (
        "The following are multiple choice questions about {subject}. "
        "Write down ONLY the NUMBER of the correct answer and nothing else."
    ),
    (PromptMode.SINGLE_TOKEN_IDK, IdkVariant.CERTAIN): (
        "The following are multiple choice questions about {subject}. "
        "If you are certain about the answer return the correct option number, "
        "otherwise return 0. Write down ONLY the NUMBER and nothing else."
    ),
    (PromptMode.SINGLE_TOKEN_IDK, IdkVariant.KNOW): (
        "The following are multiple choice questions about {subject}. "
        "If you know the answer return the correct option number, otherwise "
        "return 0. Write down ONLY the NUMBER and nothing else."
    ),
    (PromptMode.COT, None): (
        "The following are multiple choice questions about {subject}. "
        "Explain your thinking process step-by-step. At the end, write down "
        "the number of the correct answer by strictly following this format: "
        "[[number of correct answer]]."
    ),
    (PromptMode.COT_IDK, IdkVariant.CERTAIN): (
        "The following are multiple choice questions about {subject}. "
        "Explain your thinking process step-by-step. At the end, if you are "
        "certain about the answer write down the number of the correct answer "
        "by strictly following this format: [[number of correct answer]], "
        "otherwise return [[0]]."
    ),
    (PromptMode.COT_IDK, IdkVariant.KNOW): (
        "The following are multiple choice questions about {subject}. "
        "Explain your thinking process step-by-step. At the end, if you know "
        "the answer write down the number of the correct answers by strictly "
        "following this format: [[number of correct answers]], otherwise "
        "return [[0]]."
    ),
}

USER_PROMPT_CLOSING = (
    "Choose one of the answers. Write down ONLY the NUMBER of the correct "
    "answer and nothing else."
)


@dataclass(frozen=True)
class EndpointConfig:
    """Connection and decoding settings for one chat-completions endpoint."""

    base_url: str
    model: str
    api_key_env: str = ""
    top_logprobs: int = 20
    max_new_tokens: int = 30
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 5
    max_in_flight: int = 4
    retry_backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.top_logprobs < 1:
            raise ValueError("top_logprobs must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


def endpoint_config_hash(endpoint: EndpointConfig) -> str:
    """Hash of the settings that shape the captured distribution (retry and
    concurrency knobs are excluded: they cannot change the response)."""
    payload = json.dumps(
        {
            "base_url": endpoint.base_url,
            "model": endpoint.model,
            "top_logprobs": endpoint.top_logprobs,
            "max_new_tokens": endpoint.max_new_tokens,
            "temperature": endpoint.temperature,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def build_prompt(
    record: QuestionRecord,
    mode: PromptMode,
    idk_variant: IdkVariant = IdkVariant.CERTAIN,
) -> tuple[str, str]:
    """Return (system text, user text) for one record under one prompt mode."""
    key = (mode, idk_variant if mode.is_idk else None)
    system = SYSTEM_PROMPTS[key].replace("{subject}", record.subject)
    lines = [f"Question: {record.question}", "Options:"]
    lines.extend(f"{i}. {text}" for i, text in enumerate(record.options, start=1))
    lines.append(USER_PROMPT_CLOSING)
    return system, "\n".join(lines)


# ---------------------------------------------------------------------------
# Answer parsing

class ParsedAnswer(NamedTuple):
    value: int | None  # 0 = IDK, 1..n = option, None = invalid format
    span: tuple[int, int] | None  # character span of the answer digits


_COT_ANSWER_RE = re.compile(r"\[\[\s*(\d+)\s*\]\]")
_FIRST_TOKEN_RE = re.compile(r"\S+")


def parse_answer(raw_text: str, mode: PromptMode, n_options: int) -> ParsedAnswer:
    """Extract the answer number from a response.

    Single-token modes require the first non-whitespace token to be an
    integer; CoT modes take the last `[[integer]]` occurrence. 0 is accepted
    only under an IDK prompt; out-of-range or missing answers are invalid.
    """
    if mode.is_cot:
        matches = list(_COT_ANSWER_RE.finditer(raw_text))
        if not matches:
            return ParsedAnswer(None, None)
        value, span = int(matches[-1].group(1)), matches[-1].span(1)
    else:
        m = _FIRST_TOKEN_RE.search(raw_text)
        if m is None:
            return ParsedAnswer(None, None)
        try:
            value = int(m.group(0))
        except ValueError:
            return ParsedAnswer(None, None)
        span = m.span()
    if value == 0:
        return ParsedAnswer(0, span) if mode.is_idk else ParsedAnswer(None, None)
    if 1 <= value <= n_options:
        return ParsedAnswer(value, span)
    return ParsedAnswer(None, None)


def locate_answer_event(
    events: Sequence[TokenEvent], raw_text: str, span: tuple[int, int]
) -> int | None:
    """Map a character span in the response text to the event carrying it.

    Uses cumulative token offsets when the tokens tile the text exactly (the
    normal provider behavior); otherwise falls back to a last-match scan for
    the answer digits.
    """
    total = sum(len(e.token_text) for e in events)
    if total == len(raw_text):
        offset = 0
        for i, event in enumerate(events):
            end = offset + len(event.token_text)
            if offset <= span[0] < end:
                return i
            offset = end
        return None
    digits = raw_text[span[0] : span[1]]
    for i in range(len(events) - 1, -1, -1):
        if digits in events[i].token_text:
            return i
    return None


def trace_from_completion(
    record: QuestionRecord,
    mode: PromptMode,
    content: str,
    logprob_items: Sequence[dict[str, Any]],
) -> ResponseTrace:
    """Build a ResponseTrace from chat-completions content + logprob items."""
    events = []
    for item in logprob_items:
        entries = [(t["token"], float(t["logprob"])) for t in item.get("top_logprobs", [])]
        entries.sort(key=lambda pair: pair[1], reverse=True)
        residual = max(0.0, 1.0 - sum(math.exp(lp) for _, lp in entries))
        events.append(
            TokenEvent(
                token_text=item["token"],
                chosen_logprob=float(item["logprob"]),
                top_entries=tuple(entries),
                residual_mass=residual,
            )
        )
    parsed = parse_answer(content, mode, record.n_options)
    answer_index = None
    if parsed.value is not None and parsed.span is not None:
        answer_index = locate_answer_event(events, content, parsed.span)
    is_valid = parsed.value is not None and answer_index is not None
    return ResponseTrace(
        record_id=record.id,
        prompt_mode=mode,
        events=tuple(events),
        parsed_answer=parsed.value if is_valid else None,
        answer_event_index=answer_index if is_valid else None,
        is_valid=is_valid,
        raw_text=content,
    )


# ---------------------------------------------------------------------------
# HTTP client

_RETRYABLE_STATUS = {429}


class ChatClient:
    """Minimal chat-completions client with exponential-backoff retries.

    Retries transport failures, 429 and 5xx responses up to the endpoint's
    retry budget; other non-2xx responses raise ProviderError immediately.
    """

    def __init__(self, endpoint: EndpointConfig):
        self.endpoint = endpoint
        self._client = httpx.Client(timeout=endpoint.timeout)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.endpoint.api_key_env, "") if self.endpoint.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(
        self, system: str, user: str, *, want_logprobs: bool = True
    ) -> tuple[str, list[dict[str, Any]] | None]:
        """POST one completion request; returns (content, logprob items)."""
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        payload: dict[str, Any] = {
            "model": self.endpoint.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_new_tokens,
        }
        if want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = self.endpoint.top_logprobs

        last_exc: Exception | None = None
        last_response: httpx.Response | None = None
        for attempt in range(self.endpoint.max_retries):
            if attempt:
                time.sleep(self.endpoint.retry_backoff * (2 ** (attempt - 1)))
            try:
                response = self._client.post(url, headers=self._headers(), json=payload)
            except httpx.TransportError as exc:
                last_exc = exc
                continue
            if response.status_code in _RETRYABLE_STATUS or response.status_code >= 500:
                last_response = response
                continue
            if response.status_code >= 400:
                raise ProviderError(response.status_code, response.text)
            return self._parse(response.json(), want_logprobs)
        if last_response is not None:
            raise ProviderError(last_response.status_code, last_response.text)
        raise TransportError(f"request to {url} failed after retries: {last_exc}")

    @staticmethod
    def _parse(
        body: dict[str, Any], want_logprobs: bool
    ) -> tuple[str, list[dict[str, Any]] | None]:
        choice = body["choices"][0]
        content = choice["message"]["content"]
        logprobs = (choice.get("logprobs") or {}).get("content")
        if want_logprobs and not logprobs:
            raise LogprobsUnsupported("endpoint returned no per-token logprobs")
        return content, logprobs


# ---------------------------------------------------------------------------
# Trace store

def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", name)


def trace_file_name(model: str, mode: PromptMode) -> str:
    return f"traces_{_sanitize(model)}_{mode.value}.jsonl"


class TraceStore:
    """Append-only JSONL trace persistence, idempotent by
    (record_id, mode, model, config-hash)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str], dict[tuple[str, str], ResponseTrace]] = {}
        self._order: dict[tuple[str, str], list[ResponseTrace]] = {}

    def path_for(self, model: str, mode: PromptMode) -> Path:
        return self.root / trace_file_name(model, mode)

    def _load(self, model: str, mode: PromptMode) -> None:
        file_key = (model, mode.value)
        if file_key in self._index:
            return
        index: dict[tuple[str, str], ResponseTrace] = {}
        order: list[ResponseTrace] = []
        path = self.path_for(model, mode)
        if path.exists():
            with path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    row = json.loads(line)
                    trace = trace_from_dict(row)
                    index[(trace.record_id, row.get("config_hash", ""))] = trace
                    order.append(trace)
        self._index[file_key] = index
        self._order[file_key] = order

    def get(
        self, record_id: str, mode: PromptMode, model: str, config_hash: str
    ) -> ResponseTrace | None:
        with self._lock:
            self._load(model, mode)
            return self._index[(model, mode.value)].get((record_id, config_hash))

    def put(
        self, trace: ResponseTrace, mode: PromptMode, model: str, config_hash: str
    ) -> bool:
        """Persist a trace unless its key is already stored. Returns True when
        a new row was written."""
        with self._lock:
            self._load(model, mode)
            index = self._index[(model, mode.value)]
            key = (trace.record_id, config_hash)
            if key in index:
                return False
            row = trace_to_dict(trace)
            row["config_hash"] = config_hash
            with self.path_for(model, mode).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            index[key] = trace
            self._order[(model, mode.value)].append(trace)
            return True

    def traces(
        self, model: str, mode: PromptMode, config_hash: str | None = None
    ) -> list[ResponseTrace]:
        """All stored traces for (model, mode) in file order."""
        with self._lock:
            self._load(model, mode)
            rows = list(self._order[(model, mode.value)])
            if config_hash is None:
                return rows
            index = self._index[(model, mode.value)]
            return [t for (rid, ch), t in index.items() if ch == config_hash]

    def import_file(
        self, src: str | Path, model: str, mode: PromptMode, config_hash: str = "imported"
    ) -> int:
        """Ingest pre-dumped trace JSONL (e.g. full-vocabulary captures)."""
        count = 0
        for row in _iter_jsonl(src):
            if self.put(trace_from_dict(row), mode, model, row.get("config_hash", config_hash)):
                count += 1
        return count


def _iter_jsonl(path: str | Path):
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


# ---------------------------------------------------------------------------
# Trace collection

def collect_trace(
    record: QuestionRecord,
    mode: PromptMode,
    endpoint: EndpointConfig,
    store: TraceStore,
    idk_variant: IdkVariant = IdkVariant.CERTAIN,
    client: ChatClient | None = None,
) -> ResponseTrace:
    """Fetch (or reuse) one trace; stored traces never trigger a network call."""
    config_hash = endpoint_config_hash(endpoint)
    cached = store.get(record.id, mode, endpoint.model, config_hash)
    if cached is not None:
        return cached
    trace = _fetch_trace(record, mode, endpoint, idk_variant, client)
    store.put(trace, mode, endpoint.model, config_hash)
    return trace


def _fetch_trace(
    record: QuestionRecord,
    mode: PromptMode,
    endpoint: EndpointConfig,
    idk_variant: IdkVariant,
    client: ChatClient | None,
) -> ResponseTrace:
    system, user = build_prompt(record, mode, idk_variant)
    own_client = client is None
    client = client or ChatClient(endpoint)
    try:
        content, items = client.complete(system, user, want_logprobs=True)
    finally:
        if own_client:
            client.close()
    assert items is not None  # complete() raises LogprobsUnsupported otherwise
    return trace_from_completion(record, mode, content, items)


def collect_traces(
    records: Sequence[QuestionRecord],
    mode: PromptMode,
    endpoint: EndpointConfig,
    store: TraceStore,
    idk_variant: IdkVariant = IdkVariant.CERTAIN,
    progress: Callable[[int, int], None] | None = None,
) -> list[ResponseTrace]:
    """Collect traces for a batch with at most `max_in_flight` requests open.

    Traces are persisted in input record order regardless of completion
    order, and flushed incrementally so interrupted runs resume where they
    stopped.
    """
    config_hash = endpoint_config_hash(endpoint)
    results: dict[int, ResponseTrace] = {}
    next_flush = 0
    flush_lock = threading.Lock()

    def flush_ready() -> None:
        nonlocal next_flush
        with flush_lock:
            while next_flush < len(records) and next_flush in results:
                store.put(results[next_flush], mode, endpoint.model, config_hash)
                next_flush += 1
                if progress:
                    progress(next_flush, len(records))

    with ChatClient(endpoint) as client:
        with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
            pending = {}
            for i, record in enumerate(records):
                cached = store.get(record.id, mode, endpoint.model, config_hash)
                if cached is not None:
                    results[i] = cached
                    continue
                pending[pool.submit(_fetch_trace, record, mode, endpoint, idk_variant, client)] = i
            flush_ready()
            not_done = set(pending)
            while not_done:
                done, not_done = wait(not_done, return_when=FIRST_COMPLETED)
                for future in done:
                    results[pending[future]] = future.result()  # re-raises worker errors
                flush_ready()
    flush_ready()
    return [results[i] for i in range(len(records))]
