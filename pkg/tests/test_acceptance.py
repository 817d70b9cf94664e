"""Acceptance suite: one test per criterion, each printing a pass line.

Runtime budgets are asserted with wall-clock measurements around the
criterion's own work (fixture servers excluded where the criterion allows).
"""

from __future__ import annotations

import csv
import math
import os
import random
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import pytest
from click.testing import CliRunner

from entrotier import curation, masj
from entrotier import metrics as M
from entrotier.cli import main
from entrotier.evaluation import (
    LabeledScore,
    RegressionConfig,
    fit_feature_importance,
    roc_auc,
)
from entrotier.model import ComplexityScore, Tier, read_jsonl, write_records
from entrotier.testing import (
    MockChatServer,
    ScriptedJudge,
    ScriptedStudent,
    ScriptedTeacher,
    synthetic_records,
)

from conftest import make_event, random_trace
from test_cli import write_config
from test_evaluation import pairwise_auc_oracle, synthetic_rows


def _report(name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"[PASS] {name}{suffix}")


def test_entropy_correctness():
    start = time.perf_counter()
    cases = [
        (make_event([1.0]), 0.0),
        (make_event([0.5, 0.5]), math.log(2)),
        (make_event([0.25] * 4), math.log(4)),
        (make_event([0.7, 0.2, 0.1]),
         -(0.7 * math.log(0.7) + 0.2 * math.log(0.2) + 0.1 * math.log(0.1))),
    ]
    for event, expected in cases:
        assert abs(M.token_entropy(event) - expected) <= 1e-9
    assert abs(M.token_entropy(make_event([0.7, 0.2, 0.1])) - 0.801819) < 1e-6

    rng = random.Random(2024)
    for _ in range(1000):
        k = rng.randint(1, 10)
        weights = [rng.expovariate(1.0) for _ in range(k)]
        total = sum(weights) * (1.0 + rng.random())
        probs = [w / total for w in weights]
        entries = [(f"t{i}", math.log(p)) for i, p in enumerate(probs)]
        residual = max(0.0, 1.0 - sum(probs))
        base = make_event(probs)
        shuffled = list(entries)
        rng.shuffle(shuffled)
        permuted = replace(base, top_entries=tuple(shuffled), residual_mass=residual)
        assert M.token_entropy(base) == M.token_entropy(permuted)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report("entropy correctness", f"{elapsed:.2f}s, 1000 permutation checks")


def test_aggregator_suite():
    start = time.perf_counter()
    rng = random.Random(515)
    for _ in range(500):
        trace = random_trace(rng)
        profile = M.trace_profile(trace)
        cot_mean = M.aggregate_profile(profile, M.MethodId(M.COT_MEAN))
        cot_max = M.aggregate_profile(profile, M.MethodId(M.COT_MAX))
        assert cot_mean <= cot_max
        assert M.aggregate_profile(profile, M.MethodId(M.SEQ_MEAN_MAX)) <= cot_max
        assert M.aggregate_profile(profile, M.MethodId(M.SEQ_MAX_MEAN)) <= cot_max
        h_answer = profile.entropies[profile.answer_index]
        assert M.aggregate_profile(profile, M.hybrid_mix(0.0)) == h_answer
        assert M.aggregate_profile(profile, M.hybrid_mix(1.0)) == cot_max

    fixture = M.TraceProfile(
        entropies=(0.2, 1.0, 0.4),
        margins=(0.85, 0.2, 0.4),
        answer_index=2,
        claims=M.ClaimSegmentation(((0, 2), (2, 3))),
    )
    expected = {
        M.MethodId(M.COT_MEAN): 0.533333,
        M.MethodId(M.COT_MAX): 1.0,
        M.MethodId(M.COT_MAX_MINUS_ANSWER): 0.6,
        M.MethodId(M.SEQ_MEAN_MEAN): 0.5,
        M.MethodId(M.SEQ_MEAN_MAX): 0.7,
        M.MethodId(M.SEQ_MAX_MEAN): 0.6,
        M.MethodId(M.MARGINAL_DIFF_MEAN): 0.483333,
        M.MethodId(M.TOP2_ENTROPY_DIFF): 0.6,
        M.hybrid_mix(0.05): 0.43,
    }
    for method, value in expected.items():
        assert abs(M.aggregate_profile(fixture, method) - value) <= 1e-6, str(method)
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    _report("aggregator suite", f"{elapsed:.2f}s, 500 traces + 9 fixture values")


def test_roc_auc_oracle_equivalence():
    start = time.perf_counter()
    rng = random.Random(99)
    for trial in range(100):
        n = rng.randint(2, 50)
        labels = [rng.random() < 0.5 for _ in range(n)]
        if all(labels) or not any(labels):
            labels[0] = not labels[0]
        scores = [rng.choice([0.0, 0.25, 0.25, 0.5, 0.5, 0.75, 1.0]) for _ in range(n)]
        pairs = [LabeledScore(str(i), s, l) for i, (s, l) in enumerate(zip(scores, labels))]
        assert roc_auc(pairs) == pairwise_auc_oracle(pairs), f"trial {trial}"
        transformed = [replace(p, score=math.exp(p.score)) for p in pairs]
        assert roc_auc(pairs) == roc_auc(transformed)
        flipped = [replace(p, incorrect=not p.incorrect) for p in pairs]
        assert abs(roc_auc(flipped) - (1.0 - roc_auc(pairs))) <= 1e-12
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    _report("roc auc oracle equivalence", f"{elapsed:.2f}s, 100 instances with ties")


def test_tiering_and_balancing():
    start = time.perf_counter()
    scores9 = [ComplexityScore(f"q{i:02d}", "answer_entropy", i / 10) for i in range(9)]
    tiers9 = curation.assign_tiers(scores9, curation.SplitPlan())
    assert Counter(tiers9.values()) == {Tier.EASY: 3, Tier.MEDIUM: 3, Tier.HARD: 3}

    scores8 = [ComplexityScore(f"q{i:02d}", "answer_entropy", i / 10) for i in range(8)]
    tiers8 = curation.assign_tiers(
        scores8, curation.SplitPlan(tier_fractions=curation.QUARTILES)
    )
    assert Counter(tiers8.values()) == {Tier.EASY: 2, Tier.MEDIUM: 4, Tier.HARD: 2}

    tiers = {}
    tiers.update({f"e{i:02d}": Tier.EASY for i in range(10)})
    tiers.update({f"m{i:02d}": Tier.MEDIUM for i in range(8)})
    tiers.update({f"h{i:02d}": Tier.HARD for i in range(5)})
    balanced = curation.balance_tiers(tiers, seed=1)
    assert Counter(balanced.values()) == {Tier.EASY: 5, Tier.MEDIUM: 5, Tier.HARD: 5}
    assert {r for r, t in balanced.items() if t == Tier.HARD} == {f"h{i:02d}" for i in range(5)}

    assert curation.balance_tiers(tiers, seed=1) == balanced  # same seed, identical
    other = curation.balance_tiers(tiers, seed=2)
    assert Counter(other.values()) == Counter(balanced.values())
    assert other != balanced  # membership differs, sizes do not
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report("tiering and balancing", f"{elapsed:.2f}s")


def test_end_to_end_dry_run(tmp_path):
    records = synthetic_records(30, seed=17)
    dataset = tmp_path / "records.jsonl"
    write_records(dataset, records)
    student = MockChatServer(ScriptedStudent(records, wrong_every=5)).start()
    teacher = MockChatServer(ScriptedTeacher(records, wrong_every=7)).start()
    judge = MockChatServer(ScriptedJudge(records, reject_every=6)).start()
    try:
        run_dir = tmp_path / "run"
        cfg = write_config(
            tmp_path / "config.ini",
            dataset,
            run_dir,
            student_url=student.base_url,
            teacher_urls={"mock-teacher": teacher.base_url},
            judge_url=judge.base_url,
            masj_kinds="reasoning_steps, education_level",
            reference_tokens="1970000",
        )
        runner = CliRunner()
        start = time.perf_counter()
        for command in ("score", "judge", "curate", "eval"):
            result = runner.invoke(main, ["--config", str(cfg), command])
            assert result.exit_code == 0, f"{command} failed: {result.output}"
        elapsed = time.perf_counter() - start

        # one persisted trace per record per mode
        for mode in ("single_token", "cot"):
            lines = (run_dir / f"traces_mock-student_{mode}.jsonl").read_text().splitlines()
            assert len(lines) == 30

        # manifest invariants on the emitted files
        regular = list(read_jsonl(run_dir / "sft_regular.jsonl"))
        hard = list(read_jsonl(run_dir / "cot_hard.jsonl"))
        val = list(read_jsonl(run_dir / "eval_val.jsonl"))
        test_rows = list(read_jsonl(run_dir / "eval_test.jsonl"))
        regular_ids = {r["record_id"] for r in regular}
        hard_ids = {r["record_id"] for r in hard}
        assert regular and hard
        assert not regular_ids & hard_ids
        eval_ids = {r["record_id"] for r in val} | {r["record_id"] for r in test_rows}
        assert not eval_ids & (regular_ids | hard_ids)
        known = {r.id for r in records}
        assert (regular_ids | hard_ids | eval_ids) <= known
        for row in hard:
            assert "[[" in row["target"] and row["target"].endswith("]]")

        # savings ratio from the published token totals used as constants
        ratio = curation.savings_ratio(399_000, 1_970_000)
        assert ratio == 1 - 399 / 1970
        assert abs(ratio - 0.797) < 5e-4
        published = curation.TokenReport(
            totals={"pipeline_total": 399_000, "distillation_reference": 1_970_000},
            savings_ratio=ratio,
        )
        assert published.savings_ratio == pytest.approx(0.797, abs=5e-4)

        with (run_dir / "eval_report.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) > 0
        assert elapsed < 30.0
        _report("end-to-end dry run", f"{elapsed:.2f}s for score/judge/curate/eval")
    finally:
        student.stop()
        teacher.stop()
        judge.stop()


def test_masj_encoding_table():
    assert masj.encode("high school and easier", masj.MasjKind.EDUCATION_LEVEL) == 0.2
    assert masj.encode("undergraduate", masj.MasjKind.EDUCATION_LEVEL) == 0.4
    assert masj.encode("graduate", masj.MasjKind.EDUCATION_LEVEL) == 0.6
    assert masj.encode("postgraduate", masj.MasjKind.EDUCATION_LEVEL) == 0.8
    assert masj.encode("low", masj.MasjKind.REASONING_STEPS) == 0.25
    assert masj.encode("medium", masj.MasjKind.REASONING_STEPS) == 0.5
    assert masj.encode("high", masj.MasjKind.REASONING_STEPS) == 0.75
    admitted = [r for r in range(1, 11) if r >= masj.SELF_RATING_THRESHOLD]
    assert admitted == [9, 10]
    _report("masj encoding table", "exact values, threshold admits 9 and 10 only")


def test_feature_importance_recovery():
    start = time.perf_counter()
    for seed in range(20):
        rows = synthetic_rows(seed=seed, n=160)
        result = fit_feature_importance(rows, RegressionConfig(seed=seed))
        weights = result.abs_weights
        planted = weights["thinking_total_entropy"]
        others = [v for k, v in weights.items() if k != "thinking_total_entropy"]
        assert planted > max(others), f"seed {seed}: {weights}"
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    _report("feature importance recovery", f"{elapsed:.2f}s, 20/20 seeds")


PUBLISHED_DATA_ENV = "ENTROTIER_PUBLISHED_DATA"


def test_replication_on_published_data(tmp_path):
    """Conditional: needs the released per-token trace data (see README for
    the expected layout); skipped when the data is not present."""
    root = os.environ.get(PUBLISHED_DATA_ENV, "")
    if not root or not Path(root).exists():
        pytest.skip(f"{PUBLISHED_DATA_ENV} not set; published-data replication skipped")
    root = Path(root)
    dataset = root / "records.jsonl"
    config_path = root / "config.ini"
    if not dataset.exists() or not config_path.exists():
        pytest.skip("published data directory lacks records.jsonl/config.ini")

    run_dir = tmp_path / "replication"
    runner = CliRunner()
    for command in ("score", "eval"):
        result = runner.invoke(
            main, ["--config", str(config_path), "--run-dir", str(run_dir), command]
        )
        assert result.exit_code == 0, result.output
    with (run_dir / "eval_report.csv").open() as fh:
        rows = {(r["mode"], r["method"]): float(r["roc_auc"]) for r in csv.DictReader(fh)}
    observed = rows[("single_token", "answer_entropy")]
    assert abs(observed - 0.72) <= 0.01

    fi_path = run_dir / "feature_importance.csv"
    if fi_path.exists():
        with fi_path.open() as fh:
            order = [r["feature"] for r in csv.DictReader(fh)]
        assert order == [
            "thinking_total_entropy",
            "thinking_num_tokens",
            "answer_total_entropy",
            "answer_length",
        ]
    _report("published-data replication", f"single-token ROC AUC {observed:.3f}")
