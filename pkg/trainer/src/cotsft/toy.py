"""Bundled toy experiment: a synthetic manifest whose answers are readable
off the question text, so a tiny freshly initialized model can learn the task
within a couple of epochs on a CPU."""

from __future__ import annotations

import json
import random
from pathlib import Path

_SINGLE_INSTRUCTION = (
    "Choose one of the answers. Write down ONLY the NUMBER of the correct "
    "answer and nothing else."
)
_COT_INSTRUCTION = (
    "Explain your thinking process step-by-step. At the end, write down the "
    "number of the correct answer by strictly following this format: "
    "[[number of correct answer]]."
)


def _question(index: int, gold: int, n_options: int) -> str:
    options = "\n".join(f"{j}. {j}" for j in range(1, n_options + 1))
    return (
        f"Question: gauge {index} shows the number {gold}. "
        f"Which number does the gauge show?\nOptions:\n{options}\n"
    )


def make_toy_manifest(
    out_dir: str | Path,
    n: int = 200,
    n_options: int = 4,
    seed: int = 0,
    regular_fraction: float = 0.7,
    hard_fraction: float = 0.2,
) -> Path:
    """Write a manifest of `n` items split into regular / hard / validation
    rows in the curation pipeline's file formats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    n_regular = int(regular_fraction * n)
    n_hard = int(hard_fraction * n)

    regular, hard, val = [], [], []
    for i in range(n):
        gold = rng.randrange(1, n_options + 1)
        record_id = f"toy{i:04d}"
        question = _question(i, gold, n_options)
        if i < n_regular:
            regular.append(
                {
                    "record_id": record_id,
                    "prompt": f"{question}{_SINGLE_INSTRUCTION}",
                    "target": str(gold),
                }
            )
        elif i < n_regular + n_hard:
            hard.append(
                {
                    "record_id": record_id,
                    "prompt": f"{question}{_COT_INSTRUCTION}",
                    "target": (
                        f"The gauge reads {gold} and the options map one to one. [[{gold}]]"
                    ),
                    "teacher_id": "toy-teacher",
                    "teacher_wrong": False,
                }
            )
        else:
            val.append(
                {
                    "record_id": record_id,
                    "prompt": f"{question}{_SINGLE_INSTRUCTION}",
                    "gold_option": gold,
                    "n_options": n_options,
                }
            )

    for name, rows in (
        ("sft_regular.jsonl", regular),
        ("cot_hard.jsonl", hard),
        ("eval_val.jsonl", val),
    ):
        with (out_dir / name).open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return out_dir
