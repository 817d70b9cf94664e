"""Two-stage training: plain SFT on regular rows, then chain-of-thought
targets on hard rows, with per-epoch loss and validation accuracy logging.

The `alternative` ordering flag swaps which arm each stage draws from (hard
first, regular second); stage epoch counts and the loss definition never
change. Validation accuracy follows the evaluation exclusion rules: invalid
answers and IDK (0) leave the denominator.
"""

from __future__ import annotations

import csv
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .data import (
    EncodedExample,
    EvalItem,
    Example,
    ManifestData,
    ManifestError,
    WordTokenizer,
    encode_example,
    load_manifest,
)
from .model import (
    LoraSettings,
    apply_lora,
    count_parameters,
    load_model,
    save_artifact,
    sequence_loss,
)

PIPELINE = "pipeline"  # regular then hard
ALTERNATIVE = "alternative"  # hard then regular


@dataclass(frozen=True)
class TrainSpec:
    manifest_dir: str
    output_dir: str
    model: str = "toy:small"
    e1: int = 5
    e2: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_new_tokens_regular: int = 30
    max_new_tokens_hard: int = 8192
    lora: LoraSettings | None = None
    seed: int = 0
    ordering: str = PIPELINE
    grad_accum: int = 1
    max_seq_len: int = 512

    def __post_init__(self) -> None:
        if self.e1 < 0 or self.e2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ordering not in (PIPELINE, ALTERNATIVE):
            raise ValueError(f"ordering must be {PIPELINE!r} or {ALTERNATIVE!r}")


@dataclass(frozen=True)
class LogRow:
    epoch: int  # 0 = pre-training evaluation of the stage's data
    stage: str  # "regular" or "hard"
    loss: float
    eval_accuracy: float | None


@dataclass
class TrainResult:
    model_dir: Path
    log_rows: list[LogRow] = field(default_factory=list)
    parameter_count: int = 0

    def stage_losses(self, stage: str) -> list[float]:
        return [r.loss for r in self.log_rows if r.stage == stage and r.epoch > 0]

    def initial_loss(self, stage: str) -> float | None:
        for row in self.log_rows:
            if row.stage == stage and row.epoch == 0:
                return row.loss
        return None


def _batches(
    examples: Sequence[EncodedExample], batch_size: int, rng: random.Random
) -> list[list[EncodedExample]]:
    order = list(range(len(examples)))
    rng.shuffle(order)
    return [
        [examples[i] for i in order[start : start + batch_size]]
        for start in range(0, len(order), batch_size)
    ]


def _collate(batch: Sequence[EncodedExample], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(e.input_ids) for e in batch)
    input_ids = torch.full((len(batch), width), pad_id, dtype=torch.long)
    labels = torch.full((len(batch), width), -100, dtype=torch.long)
    for i, example in enumerate(batch):
        n = len(example.input_ids)
        input_ids[i, :n] = torch.tensor(example.input_ids, dtype=torch.long)
        labels[i, :n] = torch.tensor(example.labels, dtype=torch.long)
    return input_ids, labels


@torch.no_grad()
def _dataset_loss(model: torch.nn.Module, examples, batch_size: int, pad_id: int) -> float:
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        input_ids, labels = _collate(examples[start : start + batch_size], pad_id)
        loss, n = sequence_loss(model(input_ids), labels)
        total += float(loss.item())
        count += n
    return total / max(count, 1)


@dataclass(frozen=True)
class EvalAccuracy:
    value: float | None
    n_valid: int
    n_idk: int
    n_invalid: int


_SPAN_RE = re.compile(r"\[\[\s*(\d+)\s*\]\]")


def parse_generated_answer(text: str, n_options: int) -> int | None:
    """First integer token, falling back to the last [[n]] span; 0 is IDK."""
    head = text.split()
    if head:
        try:
            value = int(head[0])
        except ValueError:
            value = None
        if value is not None:
            return value if 0 <= value <= n_options else None
    spans = _SPAN_RE.findall(text)
    if spans:
        value = int(spans[-1])
        return value if 0 <= value <= n_options else None
    return None


@torch.no_grad()
def evaluate_accuracy(
    model: torch.nn.Module,
    tokenizer: WordTokenizer,
    items: Sequence[EvalItem],
    max_new_tokens: int = 8,
    max_seq_len: int = 512,
) -> EvalAccuracy:
    if not items:
        return EvalAccuracy(None, 0, 0, 0)
    model.eval()
    n_correct = n_valid = n_idk = n_invalid = 0
    for item in items:
        prompt_ids = [tokenizer.BOS] + tokenizer.encode(item.prompt)
        prompt_ids = prompt_ids[: max_seq_len - max_new_tokens]
        generated: list[int] = []
        ids = torch.tensor([prompt_ids], dtype=torch.long)
        for _ in range(max_new_tokens):
            logits = model(ids)
            next_id = int(torch.argmax(logits[0, -1]).item())
            if next_id == tokenizer.EOS:
                break
            generated.append(next_id)
            ids = torch.cat([ids, torch.tensor([[next_id]], dtype=torch.long)], dim=1)
        answer = parse_generated_answer(tokenizer.decode(generated), item.n_options)
        if answer is None:
            n_invalid += 1
        elif answer == 0:
            n_idk += 1
        else:
            n_valid += 1
            if answer == item.gold_option:
                n_correct += 1
    value = n_correct / n_valid if n_valid else None
    return EvalAccuracy(value, n_valid, n_idk, n_invalid)


def random_choice_baseline(items: Sequence[EvalItem]) -> float:
    return sum(1.0 / item.n_options for item in items) / len(items)


def _stage_plan(spec: TrainSpec, data: ManifestData) -> list[tuple[str, tuple[Example, ...], int, int]]:
    regular = ("regular", data.regular, spec.e1, spec.max_new_tokens_regular)
    hard = ("hard", data.hard, spec.e2, spec.max_new_tokens_hard)
    if spec.ordering == ALTERNATIVE:
        regular = ("regular", data.regular, spec.e2, spec.max_new_tokens_regular)
        hard = ("hard", data.hard, spec.e1, spec.max_new_tokens_hard)
        return [hard, regular]
    return [regular, hard]


def train_two_stage(spec: TrainSpec) -> TrainResult:
    """Run both stages and write train_log.csv plus the model artifact."""
    data = load_manifest(spec.manifest_dir)
    tokenizer = WordTokenizer.from_corpus(data.corpus())

    torch.manual_seed(spec.seed)
    model = load_model(spec.model, tokenizer.vocab_size, spec.max_seq_len)
    if spec.lora is not None:
        model = apply_lora(model, spec.lora)
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ManifestError("model has no trainable parameters")
    optimizer = torch.optim.AdamW(trainable, lr=spec.learning_rate)
    rng = random.Random(spec.seed)

    result = TrainResult(model_dir=Path(spec.output_dir), parameter_count=count_parameters(model))
    for stage, examples, epochs, max_target in _stage_plan(spec, data):
        if epochs == 0 or not examples:
            continue
        encoded = [
            encode_example(e, tokenizer, max_target, spec.max_seq_len) for e in examples
        ]
        pre = _dataset_loss(model, encoded, spec.batch_size, tokenizer.PAD)
        accuracy = evaluate_accuracy(
            model, tokenizer, data.eval_val, max_seq_len=spec.max_seq_len
        )
        result.log_rows.append(LogRow(0, stage, pre, accuracy.value))
        for epoch in range(1, epochs + 1):
            model.train()
            total, count = 0.0, 0
            optimizer.zero_grad()
            for i, batch in enumerate(_batches(encoded, spec.batch_size, rng), start=1):
                input_ids, labels = _collate(batch, tokenizer.PAD)
                loss_sum, n_tokens = sequence_loss(model(input_ids), labels)
                if n_tokens == 0:
                    continue
                (loss_sum / n_tokens / spec.grad_accum).backward()
                if i % spec.grad_accum == 0:
                    optimizer.step()
                    optimizer.zero_grad()
                total += float(loss_sum.item())
                count += n_tokens
            optimizer.step()
            optimizer.zero_grad()
            accuracy = evaluate_accuracy(
                model, tokenizer, data.eval_val, max_seq_len=spec.max_seq_len
            )
            result.log_rows.append(LogRow(epoch, stage, total / max(count, 1), accuracy.value))

    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "train_log.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "loss", "eval_accuracy"])
        for row in result.log_rows:
            writer.writerow(
                [row.epoch, row.stage, f"{row.loss:.6f}",
                 "" if row.eval_accuracy is None else f"{row.eval_accuracy:.6f}"]
            )
    spec_meta = {
        "model": spec.model,
        "e1": spec.e1,
        "e2": spec.e2,
        "learning_rate": spec.learning_rate,
        "batch_size": spec.batch_size,
        "ordering": spec.ordering,
        "seed": spec.seed,
        "parameters": result.parameter_count,
    }
    save_artifact(model, tokenizer.to_json(), spec_meta, out_dir / "model")
    return result
