from __future__ import annotations

import csv
import time

import pytest
import torch

from cotsft.data import EvalItem, WordTokenizer, load_manifest
from cotsft.model import (
    LoraSettings,
    TinyCausalLM,
    ToyConfig,
    apply_lora,
    count_parameters,
    count_trainable,
    load_model,
    ModelLoadError,
)
from cotsft.train import (
    ALTERNATIVE,
    TrainSpec,
    evaluate_accuracy,
    parse_generated_answer,
    random_choice_baseline,
    train_two_stage,
)
from cotsft.toy import make_toy_manifest


def toy_spec(manifest_dir, output_dir, **overrides) -> TrainSpec:
    defaults = dict(
        manifest_dir=str(manifest_dir),
        output_dir=str(output_dir),
        model="toy:small",
        e1=2,
        e2=2,
        learning_rate=3e-3,
        batch_size=16,
        max_new_tokens_hard=64,
        seed=0,
    )
    defaults.update(overrides)
    return TrainSpec(**defaults)


class TestParseGeneratedAnswer:
    def test_first_integer_token(self):
        assert parse_generated_answer("3", 4) == 3
        assert parse_generated_answer("2 junk after", 4) == 2

    def test_span_fallback(self):
        assert parse_generated_answer("the gauge reads 9 so [[ 3 ]]", 4) == 3

    def test_idk_and_invalid(self):
        assert parse_generated_answer("0", 4) == 0
        assert parse_generated_answer("7", 4) is None
        assert parse_generated_answer("word salad", 4) is None


class TestSecondaryAcceptance:
    def test_toy_two_stage_training(self, tmp_path):
        """200-example manifest, <100M-parameter model, E1 = E2 = 2."""
        manifest = make_toy_manifest(tmp_path / "manifest", n=200, seed=0)
        start = time.perf_counter()
        result = train_two_stage(toy_spec(manifest, tmp_path / "out"))
        elapsed = time.perf_counter() - start

        assert result.parameter_count < 100_000_000

        initial = result.initial_loss("regular")
        stage1 = result.stage_losses("regular")
        assert initial is not None and stage1
        assert stage1[-1] < 0.7 * initial

        stage2 = result.stage_losses("hard")
        assert len(stage2) == 2
        assert all(b < a for a, b in zip(stage2, stage2[1:]))

        data = load_manifest(manifest)
        baseline = random_choice_baseline(data.eval_val)
        final_accuracy = result.log_rows[-1].eval_accuracy
        assert final_accuracy is not None
        assert final_accuracy >= baseline

        assert elapsed < 15 * 60
        log_path = tmp_path / "out" / "train_log.csv"
        with log_path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(result.log_rows)
        assert (tmp_path / "out" / "model" / "model.pt").exists()
        print(
            f"[PASS] toy two-stage training ({elapsed:.1f}s, "
            f"stage1 {initial:.2f}->{stage1[-1]:.2f}, stage2 {stage2[0]:.2f}->{stage2[-1]:.2f}, "
            f"val acc {final_accuracy:.2f} vs baseline {baseline:.2f})"
        )


class TestTrainingContracts:
    def test_zero_epochs_is_noop_with_empty_log(self, tmp_path):
        manifest = make_toy_manifest(tmp_path / "manifest", n=40, seed=1)
        spec = toy_spec(manifest, tmp_path / "out", e1=0, e2=0)
        result = train_two_stage(spec)
        assert result.log_rows == []

        # identical RNG consumption -> the saved weights equal a fresh init
        data = load_manifest(manifest)
        tokenizer = WordTokenizer.from_corpus(data.corpus())
        torch.manual_seed(spec.seed)
        reference = load_model(spec.model, tokenizer.vocab_size, spec.max_seq_len)
        saved = torch.load(tmp_path / "out" / "model" / "model.pt", weights_only=True)
        for name, tensor in reference.state_dict().items():
            assert torch.equal(saved[name], tensor), name

    def test_same_seed_reproducible_log(self, tmp_path):
        manifest = make_toy_manifest(tmp_path / "manifest", n=60, seed=2)
        a = train_two_stage(toy_spec(manifest, tmp_path / "a", e1=1, e2=1))
        b = train_two_stage(toy_spec(manifest, tmp_path / "b", e1=1, e2=1))
        assert a.log_rows == b.log_rows

    def test_alternative_ordering_swaps_sources(self, tmp_path):
        manifest = make_toy_manifest(tmp_path / "manifest", n=60, seed=3)
        result = train_two_stage(
            toy_spec(manifest, tmp_path / "out", e1=1, e2=1, ordering=ALTERNATIVE)
        )
        stages = [row.stage for row in result.log_rows]
        assert stages == ["hard", "hard", "regular", "regular"]

    def test_spec_validation(self, tmp_path):
        with pytest.raises(ValueError):
            toy_spec(tmp_path, tmp_path, e1=-1)
        with pytest.raises(ValueError):
            toy_spec(tmp_path, tmp_path, batch_size=0)
        with pytest.raises(ValueError):
            toy_spec(tmp_path, tmp_path, ordering="shuffled")

    def test_default_hyperparameters(self, tmp_path):
        spec = TrainSpec(manifest_dir=".", output_dir=".")
        assert spec.learning_rate == 1e-4
        assert spec.batch_size == 64
        assert spec.max_new_tokens_regular == 30
        assert spec.max_new_tokens_hard == 8192
        lora = LoraSettings()
        assert (lora.rank, lora.alpha, lora.dropout) == (64, 128.0, 0.05)

    def test_grad_accum_runs(self, tmp_path):
        manifest = make_toy_manifest(tmp_path / "manifest", n=40, seed=4)
        result = train_two_stage(
            toy_spec(manifest, tmp_path / "out", e1=1, e2=0, grad_accum=2)
        )
        assert result.stage_losses("regular")


class TestEvaluateAccuracy:
    def test_exclusion_rules(self):
        tok = WordTokenizer.from_corpus(["prompt text", "1 2 3 4 0"])

        class FixedModel(torch.nn.Module):
            """Emits the token for "2" once, then EOS."""

            def __init__(self, token_id):
                super().__init__()
                self.token_id = token_id

            def forward(self, ids):
                logits = torch.zeros(1, ids.shape[1], tok.vocab_size)
                already_answered = int(ids[0, -1].item()) == self.token_id
                target = tok.EOS if already_answered else self.token_id
                logits[0, -1, target] = 10.0
                return logits

        items = [
            EvalItem("a", "prompt text", gold_option=2, n_options=4),
            EvalItem("b", "prompt text", gold_option=3, n_options=4),
        ]
        model = FixedModel(tok.encode("2")[0])
        report = evaluate_accuracy(model, tok, items, max_new_tokens=2)
        assert report.n_valid == 2
        assert report.value == 0.5

    def test_empty_items(self):
        tok = WordTokenizer.from_corpus(["x"])
        report = evaluate_accuracy(torch.nn.Linear(1, 1), tok, [])
        assert report.value is None


class TestLora:
    def test_base_frozen_adapters_train(self):
        model = TinyCausalLM(ToyConfig(vocab_size=32, d_model=32, n_heads=2, n_layers=1))
        total = count_parameters(model)
        apply_lora(model, LoraSettings(rank=2, alpha=4.0, dropout=0.0))
        trainable = count_trainable(model)
        assert 0 < trainable < total
        frozen_before = model.head.base.weight.clone()
        ids = torch.randint(0, 32, (2, 8))
        loss = model(ids).sum()
        loss.backward()
        assert model.head.base.weight.grad is None
        assert model.head.lora_a.grad is not None
        assert torch.equal(model.head.base.weight, frozen_before)

    def test_lora_run_end_to_end(self, tmp_path):
        manifest = make_toy_manifest(tmp_path / "manifest", n=40, seed=5)
        result = train_two_stage(
            toy_spec(manifest, tmp_path / "out", e1=1, e2=1,
                     lora=LoraSettings(rank=4, alpha=8.0, dropout=0.0))
        )
        assert result.stage_losses("regular") and result.stage_losses("hard")
        assert (tmp_path / "out" / "train_log.csv").exists()


class TestModelLoading:
    def test_unknown_toy_preset(self):
        with pytest.raises(ModelLoadError):
            load_model("toy:humongous", vocab_size=10, max_seq_len=32)

    def test_bogus_path_raises(self):
        with pytest.raises(ModelLoadError):
            load_model("/nonexistent/model/dir", vocab_size=10, max_seq_len=32)

    def test_local_transformers_model(self, tmp_path):
        transformers = pytest.importorskip("transformers")
        config = transformers.GPT2Config(
            vocab_size=64, n_positions=128, n_embd=32, n_layer=2, n_head=2
        )
        local = tmp_path / "tiny-gpt2"
        transformers.GPT2LMHeadModel(config).save_pretrained(local)

        manifest = make_toy_manifest(tmp_path / "manifest", n=30, seed=6)
        spec = toy_spec(
            manifest, tmp_path / "out", model=str(local), e1=1, e2=0, max_seq_len=96
        )
        result = train_two_stage(spec)
        losses = result.stage_losses("regular")
        assert losses and losses[-1] < result.initial_loss("regular")
