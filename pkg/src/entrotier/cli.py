"""Pipeline orchestration CLI.

Subcommands mirror the pipeline stages: `score` collects traces and computes
complexity scores, `judge` runs the model-as-judge passes, `curate` builds
the tiered training manifest, `eval` reports estimator quality, `report`
summarizes a run directory. Stage outputs are files in the run directory, so
every stage is independently inspectable, re-runnable, and resumable.

Exit codes: 2 config error, 3 endpoint failure, 4 missing distillation,
5 degenerate labels / empty evaluation set.
"""

from __future__ import annotations

import csv
import functools
import sys
from pathlib import Path

import click

from . import curation, masj, metrics
from .config import ConfigError, RunConfig, load_config
from .curation import MissingDistillation
from .evaluation import (
    DegenerateLabels,
    EmptySet,
    LabeledScore,
    accuracy,
    feature_rows,
    fit_feature_importance,
    roc_auc,
    RegressionConfig,
)
from .gateway import (
    GatewayError,
    TraceStore,
    collect_traces,
    endpoint_config_hash,
    trace_file_name,
)
from .model import (
    ComplexityScore,
    PromptMode,
    QuestionRecord,
    read_jsonl,
    read_records,
    score_from_dict,
    score_to_dict,
    validate_records,
    write_jsonl,
)

EXIT_CONFIG = 2
EXIT_ENDPOINT = 3
EXIT_DISTILLATION = 4
EXIT_DEGENERATE = 5

EVAL_REPORT_FILE = "eval_report.csv"
FEATURE_IMPORTANCE_FILE = "feature_importance.csv"
MASJ_SCORES_FILE = "scores_masj.jsonl"


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except GatewayError as exc:
            _fail(EXIT_ENDPOINT, str(exc))
        except MissingDistillation as exc:
            _fail(EXIT_DISTILLATION, str(exc))
        except (DegenerateLabels, EmptySet) as exc:
            _fail(EXIT_DEGENERATE, str(exc))

    return wrapper


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config INI file.")
@click.option("--run-dir", default=None, type=click.Path(), help="Override the run directory.")
@click.option("--seed", default=None, type=int, help="Override the config seed.")
@click.option("--resume/--no-resume", default=True, help="Skip stages whose outputs already exist.")
@click.pass_context
def main(ctx: click.Context, config_path: str, run_dir: str | None, seed: int | None, resume: bool) -> None:
    """Complexity scoring, judging, curation, and evaluation pipeline."""
    ctx.ensure_object(dict)
    try:
        cfg = load_config(config_path, run_dir=run_dir, seed=seed)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ctx.obj["cfg"] = cfg
    ctx.obj["resume"] = resume


def _load_dataset(cfg: RunConfig) -> list[QuestionRecord]:
    records = read_records(cfg.dataset)
    violations = validate_records(records)
    if violations:
        rid, problems = next(iter(violations.items()))
        raise ConfigError("run.dataset", f"record {rid!r}: {'; '.join(problems)}")
    return records


def _store(cfg: RunConfig) -> TraceStore:
    store = TraceStore(cfg.run_dir)
    if cfg.traces_dir is not None and cfg.student is not None:
        for mode in cfg.score_modes:
            src = cfg.traces_dir / trace_file_name(cfg.student.model, mode)
            if src.exists():
                store.import_file(
                    src, cfg.student.model, mode,
                    endpoint_config_hash(cfg.student_endpoint(mode)),
                )
    return store


def scores_file_name(model: str, mode: PromptMode) -> str:
    return trace_file_name(model, mode).replace("traces_", "scores_", 1)


def _write_scores(path: Path, scores: list[ComplexityScore]) -> None:
    write_jsonl(path, (score_to_dict(s) for s in scores))


def _read_scores(path: Path) -> list[ComplexityScore]:
    return [score_from_dict(row) for row in read_jsonl(path)]


@main.command()
@click.pass_context
@_guarded
def score(ctx: click.Context) -> None:
    """Collect response traces and compute complexity scores."""
    cfg: RunConfig = ctx.obj["cfg"]
    records = _load_dataset(cfg)
    store = _store(cfg)
    if cfg.student is None:
        raise ConfigError("student", "score needs a student endpoint or a traces_dir")
    records_by_id = {r.id: r for r in records}

    for mode in cfg.score_modes:
        endpoint = cfg.student_endpoint(mode)
        out_path = cfg.run_dir / scores_file_name(endpoint.model, mode)
        if ctx.obj["resume"] and out_path.exists():
            click.echo(f"score[{mode.value}]: {out_path.name} exists, skipping")
            continue
        traces = collect_traces(records, mode, endpoint, store, cfg.idk_variant)
        methods = cfg.methods_for(mode)
        rows: list[ComplexityScore] = []
        for trace in traces:
            rows.extend(metrics.score_trace(trace, records_by_id[trace.record_id], methods))
        _write_scores(out_path, rows)
        n_valid = sum(1 for t in traces if t.is_valid)
        click.echo(
            f"score[{mode.value}]: {len(traces)} traces ({n_valid} valid), "
            f"{len(rows)} score rows -> {out_path.name}"
        )


@main.command()
@click.pass_context
@_guarded
def judge(ctx: click.Context) -> None:
    """Run the model-as-judge assessments with the self-rating filter."""
    cfg: RunConfig = ctx.obj["cfg"]
    records = _load_dataset(cfg)
    if not cfg.masj_kinds:
        raise ConfigError("masj.kinds", "no judge kinds configured")
    if cfg.judge is None:
        raise ConfigError("judge", "judge endpoint is required")

    all_assessments = []
    for kind in cfg.masj_kinds:
        path = cfg.run_dir / masj.assessment_file_name(kind)
        if ctx.obj["resume"] and path.exists():
            click.echo(f"judge[{kind.value}]: {path.name} exists, skipping")
            all_assessments.extend(masj.read_assessments(cfg.run_dir, kind))
            continue
        assessments = masj.judge_records(records, kind, cfg.judge)
        masj.write_assessments(cfg.run_dir, assessments, kind)
        all_assessments.extend(assessments)
        accepted = sum(1 for a in assessments if a.accepted)
        click.echo(f"judge[{kind.value}]: {accepted}/{len(assessments)} accepted -> {path.name}")

    scores = masj.assessments_to_scores(all_assessments)
    _write_scores(cfg.run_dir / MASJ_SCORES_FILE, scores)
    click.echo(f"judge: {len(scores)} accepted scores -> {MASJ_SCORES_FILE}")


@main.command()
@click.pass_context
@_guarded
def curate(ctx: click.Context) -> None:
    """Assign tiers, split, balance, fetch teacher reasoning, emit the manifest."""
    cfg: RunConfig = ctx.obj["cfg"]
    records = _load_dataset(cfg)
    records_by_id = {r.id: r for r in records}

    manifest_path = cfg.run_dir / curation.SFT_REGULAR_FILE
    if ctx.obj["resume"] and manifest_path.exists():
        click.echo(f"curate: {manifest_path.name} exists, skipping")
        return

    if cfg.curate_method.startswith("masj"):
        scores_path = cfg.run_dir / MASJ_SCORES_FILE
    else:
        if cfg.student is None:
            raise ConfigError("student", "curate needs the student model's scores")
        scores_path = cfg.run_dir / scores_file_name(cfg.student.model, cfg.curate_mode)
    if not scores_path.exists():
        raise ConfigError("curate", f"scores file {scores_path.name} not found; run `score` first")
    scores = [s for s in _read_scores(scores_path) if s.method == cfg.curate_method]
    if not scores:
        raise ConfigError("curate.method", f"no {cfg.curate_method!r} scores in {scores_path.name}")

    tiers = curation.assign_tiers(scores, cfg.plan)
    dataset_order = [r.id for r in records if r.id in tiers]
    splits = curation.split_train_val_test(dataset_order, cfg.plan)
    if cfg.plan.balance:
        kept: dict[str, curation.Tier] = {}
        for i, chunk in enumerate(curation.Split):
            chunk_tiers = {rid: tiers[rid] for rid in tiers if splits[rid] == chunk}
            kept.update(curation.balance_tiers(chunk_tiers, cfg.seed + 1 + i))
        tiers = kept

    hard_train = [
        records_by_id[rid]
        for rid in dataset_order
        if rid in tiers and tiers[rid] == curation.Tier.HARD and splits[rid] == curation.Split.TRAIN
    ]
    if hard_train and not cfg.teachers:
        raise ConfigError("teacher", "curate needs at least one teacher endpoint")
    samples = curation.fetch_distillation(hard_train, list(cfg.teachers), cfg.seed)

    manifest = curation.emit_manifest(
        tiers,
        {rid: splits[rid] for rid in tiers},
        samples,
        records_by_id,
        drop_teacher_wrong=cfg.drop_teacher_wrong,
        provenance={"config_hash": cfg.digest(), "seed": cfg.seed, "config": cfg.as_meta()},
    )
    report = curation.token_report(
        manifest,
        records_by_id,
        cfg.epochs_regular,
        cfg.epochs_hard,
        reference_total=cfg.reference_tokens,
    )
    paths = curation.write_manifest_files(cfg.run_dir, manifest, records_by_id, report)
    click.echo(
        f"curate: {len(manifest.regular_sft)} regular rows, {len(manifest.hard_cot)} hard rows, "
        f"pipeline tokens {report.pipeline_total} -> {paths['sft_regular'].name}, {paths['cot_hard'].name}"
    )


@main.command(name="eval")
@click.pass_context
@_guarded
def eval_cmd(ctx: click.Context) -> None:
    """ROC AUC and accuracy per (mode, method), plus feature importances."""
    cfg: RunConfig = ctx.obj["cfg"]
    records = _load_dataset(cfg)
    gold_by_id = {r.id: r.gold_option for r in records}
    store = _store(cfg)
    if cfg.student is None:
        raise ConfigError("student", "eval needs the student model name")
    report_path = cfg.run_dir / EVAL_REPORT_FILE
    if ctx.obj["resume"] and report_path.exists():
        click.echo(f"eval: {report_path.name} exists, skipping")
        return

    masj_path = cfg.run_dir / MASJ_SCORES_FILE
    masj_scores = _read_scores(masj_path) if masj_path.exists() else []

    out_rows = []
    feature_csv_rows: list[tuple[str, float]] = []
    for mode in cfg.score_modes:
        endpoint = cfg.student_endpoint(mode)
        traces = store.traces(endpoint.model, mode, endpoint_config_hash(endpoint)) or store.traces(
            endpoint.model, mode
        )
        if not traces:
            raise ConfigError("eval", f"no traces for mode {mode.value}; run `score` first")
        acc = accuracy(traces, gold_by_id)
        incorrect_by_id = {
            t.record_id: t.parsed_answer != gold_by_id[t.record_id]
            for t in traces
            if t.is_valid and t.parsed_answer not in (None, 0)
        }

        scores_path = cfg.run_dir / scores_file_name(endpoint.model, mode)
        mode_scores = _read_scores(scores_path) if scores_path.exists() else []
        by_method: dict[str, list[ComplexityScore]] = {}
        for s in mode_scores + masj_scores:
            by_method.setdefault(s.method, []).append(s)
        for method in sorted(by_method):
            pairs = [
                LabeledScore(s.record_id, s.value, incorrect_by_id[s.record_id])
                for s in by_method[method]
                if s.record_id in incorrect_by_id
            ]
            auc = roc_auc(pairs)
            out_rows.append(
                [endpoint.model, mode.value, method, f"{auc:.6f}", f"{acc.value:.6f}",
                 acc.n_valid, acc.n_idk, acc.n_invalid]
            )

        if cfg.feature_importance and mode.is_cot:
            rows = feature_rows(traces, gold_by_id)
            importance = fit_feature_importance(rows, RegressionConfig(seed=cfg.seed))
            feature_csv_rows = sorted(
                importance.abs_weights.items(), key=lambda kv: kv[1], reverse=True
            )

    with report_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "mode", "method", "roc_auc", "accuracy", "n_valid", "n_idk", "n_invalid"])
        writer.writerows(out_rows)
    click.echo(f"eval: {len(out_rows)} method rows -> {report_path.name}")

    if feature_csv_rows:
        fi_path = cfg.run_dir / FEATURE_IMPORTANCE_FILE
        with fi_path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "abs_weight"])
            for name, weight in feature_csv_rows:
                writer.writerow([name, f"{weight:.6f}"])
        click.echo(f"eval: feature importances -> {fi_path.name}")


@main.command()
@click.pass_context
@_guarded
def report(ctx: click.Context) -> None:
    """Summarize a run directory's evaluation and token accounting."""
    cfg: RunConfig = ctx.obj["cfg"]
    lines = [f"run directory: {cfg.run_dir}"]
    eval_path = cfg.run_dir / EVAL_REPORT_FILE
    if eval_path.exists():
        lines.append("")
        lines.append("estimator quality (ROC AUC / accuracy):")
        with eval_path.open("r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                lines.append(
                    f"  {row['model']} {row['mode']:>16} {row['method']:<24} "
                    f"{float(row['roc_auc']):.2f}/{float(row['accuracy']):.2f} "
                    f"(n={row['n_valid']}, idk={row['n_idk']}, invalid={row['n_invalid']})"
                )
    token_path = cfg.run_dir / curation.TOKEN_REPORT_FILE
    if token_path.exists():
        lines.append("")
        lines.append("tokens processed:")
        with token_path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for arm, tokens in reader:
                lines.append(f"  {arm:<16} {tokens}")
    fi_path = cfg.run_dir / FEATURE_IMPORTANCE_FILE
    if fi_path.exists():
        lines.append("")
        lines.append("feature importances (|weight|):")
        with fi_path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for feature, weight in reader:
                lines.append(f"  {feature:<24} {weight}")
    text = "\n".join(lines) + "\n"
    (cfg.run_dir / "report.txt").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
