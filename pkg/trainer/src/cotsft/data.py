"""Manifest ingestion and tokenization.

Reads the curation pipeline's file formats directly:
  sft_regular.jsonl  rows {record_id, prompt, target}
  cot_hard.jsonl     rows {record_id, prompt, target, teacher_id, teacher_wrong}
  eval_val.jsonl     rows {record_id, prompt, gold_option, n_options}

The word tokenizer keeps `[[` and `]]` atomic so chain-of-thought answer
spans survive encode/decode round trips.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator


class ManifestError(Exception):
    pass


@dataclass(frozen=True)
class Example:
    record_id: str
    prompt: str
    target: str


@dataclass(frozen=True)
class EvalItem:
    record_id: str
    prompt: str
    gold_option: int
    n_options: int


@dataclass(frozen=True)
class ManifestData:
    regular: tuple[Example, ...]
    hard: tuple[Example, ...]
    eval_val: tuple[EvalItem, ...]

    def corpus(self) -> Iterator[str]:
        for example in self.regular + self.hard:
            yield example.prompt
            yield example.target
        for item in self.eval_val:
            yield item.prompt


def _read_jsonl(path: Path) -> Iterator[dict]:
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path.name}:{line_no}: not valid JSON") from exc


def load_manifest(manifest_dir: str | Path) -> ManifestData:
    manifest_dir = Path(manifest_dir)
    if not manifest_dir.exists():
        raise ManifestError(f"manifest directory {manifest_dir} does not exist")

    def examples(name: str) -> tuple[Example, ...]:
        path = manifest_dir / name
        if not path.exists():
            raise ManifestError(f"missing manifest file {name}")
        rows = []
        for row in _read_jsonl(path):
            for field in ("record_id", "prompt", "target"):
                if field not in row:
                    raise ManifestError(f"{name}: row missing {field!r}")
            rows.append(Example(row["record_id"], row["prompt"], row["target"]))
        return tuple(rows)

    eval_rows: list[EvalItem] = []
    eval_path = manifest_dir / "eval_val.jsonl"
    if eval_path.exists():
        for row in _read_jsonl(eval_path):
            eval_rows.append(
                EvalItem(row["record_id"], row["prompt"], row["gold_option"], row["n_options"])
            )
    return ManifestData(
        regular=examples("sft_regular.jsonl"),
        hard=examples("cot_hard.jsonl"),
        eval_val=tuple(eval_rows),
    )


_TOKEN_RE = re.compile(r"\[\[|\]\]|\d+|[A-Za-z]+|[^\sA-Za-z0-9]")


class WordTokenizer:
    """Word-level tokenizer with a vocabulary built from the manifest corpus."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, vocab: list[str]):
        self.id_to_token = list(self.SPECIALS) + vocab
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_corpus(cls, corpus: Iterable[str]) -> "WordTokenizer":
        seen: dict[str, None] = {}
        for text in corpus:
            for token in _TOKEN_RE.findall(text):
                seen.setdefault(token)
        return cls(sorted(seen))

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, self.UNK) for t in _TOKEN_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        tokens = [self.id_to_token[i] for i in ids if i not in (self.PAD, self.BOS, self.EOS)]
        return " ".join(tokens)

    def to_json(self) -> str:
        return json.dumps({"vocab": self.id_to_token[len(self.SPECIALS):]})

    @classmethod
    def from_json(cls, text: str) -> "WordTokenizer":
        return cls(json.loads(text)["vocab"])


@dataclass(frozen=True)
class EncodedExample:
    input_ids: list[int]
    labels: list[int]  # -100 on prompt/pad positions


def encode_example(
    example: Example,
    tokenizer: WordTokenizer,
    max_target_tokens: int,
    max_seq_len: int,
) -> EncodedExample:
    """BOS + prompt + target + EOS; loss is computed on target tokens only."""
    prompt_ids = [tokenizer.BOS] + tokenizer.encode(example.prompt)
    target_ids = tokenizer.encode(example.target)[:max_target_tokens] + [tokenizer.EOS]
    input_ids = (prompt_ids + target_ids)[:max_seq_len]
    n_prompt = min(len(prompt_ids), len(input_ids))
    labels = [-100] * n_prompt + input_ids[n_prompt:]
    return EncodedExample(input_ids=input_ids, labels=labels)
