"""Command-line entry point: `python -m cotsft.run --manifest <dir> --out <dir>`."""

from __future__ import annotations

import argparse

from .model import LoraSettings
from .train import ALTERNATIVE, PIPELINE, TrainSpec, train_two_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Two-stage SFT on a training manifest.")
    parser.add_argument("--manifest", required=True, help="Directory with the manifest JSONL files.")
    parser.add_argument("--out", required=True, help="Output directory for logs and the model.")
    parser.add_argument("--model", default="toy:small", help="toy[:preset] or a local model path.")
    parser.add_argument("--e1", type=int, default=5, help="Stage-1 epochs.")
    parser.add_argument("--e2", type=int, default=5, help="Stage-2 epochs.")
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--grad-accum", type=int, default=1)
    parser.add_argument("--max-seq-len", type=int, default=512)
    parser.add_argument("--max-new-regular", type=int, default=30)
    parser.add_argument("--max-new-hard", type=int, default=8192)
    parser.add_argument("--ordering", choices=[PIPELINE, ALTERNATIVE], default=PIPELINE)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lora-rank", type=int, default=0, help="0 disables low-rank adaptation.")
    parser.add_argument("--lora-alpha", type=float, default=128.0)
    parser.add_argument("--lora-dropout", type=float, default=0.05)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    lora = None
    if args.lora_rank > 0:
        lora = LoraSettings(rank=args.lora_rank, alpha=args.lora_alpha, dropout=args.lora_dropout)
    spec = TrainSpec(
        manifest_dir=args.manifest,
        output_dir=args.out,
        model=args.model,
        e1=args.e1,
        e2=args.e2,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_new_tokens_regular=args.max_new_regular,
        max_new_tokens_hard=args.max_new_hard,
        lora=lora,
        seed=args.seed,
        ordering=args.ordering,
        grad_accum=args.grad_accum,
        max_seq_len=args.max_seq_len,
    )
    result = train_two_stage(spec)
    for row in result.log_rows:
        accuracy = "-" if row.eval_accuracy is None else f"{row.eval_accuracy:.3f}"
        print(f"stage={row.stage} epoch={row.epoch} loss={row.loss:.4f} val_acc={accuracy}")
    print(f"artifacts written to {result.model_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
