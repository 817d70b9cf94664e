"""The trainer must consume the curation pipeline's files as written, without
any shared in-memory types."""

from __future__ import annotations

import pytest

entrotier = pytest.importorskip("entrotier")

from entrotier import curation  # noqa: E402
from entrotier.model import DistillationSample, Split, Tier  # noqa: E402
from entrotier.testing import synthetic_records  # noqa: E402

from cotsft.data import load_manifest  # noqa: E402
from cotsft.train import TrainSpec, train_two_stage  # noqa: E402


@pytest.fixture
def curated_run(tmp_path):
    records = synthetic_records(24, seed=21)
    by_id = {r.id: r for r in records}
    tiers = {r.id: [Tier.EASY, Tier.MEDIUM, Tier.HARD][i % 3] for i, r in enumerate(records)}
    splits = curation.split_train_val_test([r.id for r in records], curation.SplitPlan(seed=2))
    samples = [
        DistillationSample(
            record_id=r.id,
            teacher_reasoning=f"Each option was checked; option {r.gold_option} holds. [[{r.gold_option}]]",
            final_answer=r.gold_option,
            teacher_id="interop-teacher",
        )
        for r in records
        if tiers[r.id] == Tier.HARD and splits[r.id] == Split.TRAIN
    ]
    manifest = curation.emit_manifest(tiers, splits, samples, by_id)
    report = curation.token_report(manifest, by_id, 1, 1)
    curation.write_manifest_files(tmp_path, manifest, by_id, report)
    return tmp_path, manifest


def test_trainer_reads_curated_files_directly(curated_run):
    run_dir, manifest = curated_run
    data = load_manifest(run_dir)
    assert len(data.regular) == len(manifest.regular_sft)
    assert len(data.hard) == len(manifest.hard_cot)
    assert {row.record_id for row in data.regular} == {rid for rid, _ in manifest.regular_sft}
    for row in data.hard:
        assert row.target.endswith("]]")
    for item in data.eval_val:
        assert 1 <= item.gold_option <= item.n_options


def test_short_training_run_on_curated_manifest(curated_run, tmp_path):
    run_dir, _ = curated_run
    spec = TrainSpec(
        manifest_dir=str(run_dir),
        output_dir=str(tmp_path / "out"),
        model="toy:mini",
        e1=1,
        e2=1,
        learning_rate=1e-3,
        batch_size=8,
        max_new_tokens_hard=128,
        seed=0,
    )
    result = train_two_stage(spec)
    assert result.stage_losses("regular")
    assert result.stage_losses("hard")
    assert (tmp_path / "out" / "train_log.csv").exists()
