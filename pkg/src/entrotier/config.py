"""Run configuration: a single INI file with one section per concern.

Sections: [run], [student], [judge], one [teacher:<name>] per teacher,
[score], [masj], [curate]. Every value has a default except the dataset and
run directory; the effective configuration (defaults included) is recorded in
run_meta.json by the curate stage.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .curation import TIER_PRESETS, SplitPlan
from .gateway import EndpointConfig, IdkVariant
from .masj import MasjKind
from .metrics import MethodId, UnknownMethod, methods_for_mode
from .model import PromptMode


class ConfigError(Exception):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


# Single-token estimation passes still request up to 30 new tokens and take
# the first token's distribution; CoT passes need room for full reasoning.
DEFAULT_MAX_NEW_SINGLE = 30
DEFAULT_MAX_NEW_COT = 8192


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    run_dir: Path
    seed: int = 0
    student: EndpointConfig | None = None
    student_max_new_single: int = DEFAULT_MAX_NEW_SINGLE
    student_max_new_cot: int = DEFAULT_MAX_NEW_COT
    traces_dir: Path | None = None
    judge: EndpointConfig | None = None
    teachers: tuple[EndpointConfig, ...] = ()
    score_modes: tuple[PromptMode, ...] = (PromptMode.SINGLE_TOKEN,)
    score_methods: tuple[str, ...] | None = None  # None = all applicable
    idk_variant: IdkVariant = IdkVariant.CERTAIN
    hybrid_alpha: float = 0.05
    masj_kinds: tuple[MasjKind, ...] = ()
    plan: SplitPlan = field(default_factory=SplitPlan)
    curate_method: str = "answer_entropy"
    curate_mode: PromptMode = PromptMode.SINGLE_TOKEN
    drop_teacher_wrong: bool = False
    epochs_regular: int = 5
    epochs_hard: int = 5
    feature_importance: bool = False
    reference_tokens: float | None = None

    def student_endpoint(self, mode: PromptMode) -> EndpointConfig:
        if self.student is None:
            raise ConfigError("student.base_url", "no student endpoint configured")
        max_new = self.student_max_new_cot if mode.is_cot else self.student_max_new_single
        return replace(self.student, max_new_tokens=max_new)

    def methods_for(self, mode: PromptMode) -> list[MethodId]:
        available = methods_for_mode(mode)
        names = available if self.score_methods is None else [
            m for m in self.score_methods if m in available
        ]
        out = []
        for name in names:
            if name == "hybrid_mix":
                out.append(MethodId(name, self.hybrid_alpha))
            else:
                out.append(MethodId(name))
        return out

    def digest(self) -> str:
        payload = json.dumps(self.as_meta(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]

    def as_meta(self) -> dict[str, object]:
        return {
            "dataset": str(self.dataset),
            "seed": self.seed,
            "student": _endpoint_meta(self.student),
            "student_max_new_single": self.student_max_new_single,
            "student_max_new_cot": self.student_max_new_cot,
            "judge": _endpoint_meta(self.judge),
            "teachers": [_endpoint_meta(t) for t in self.teachers],
            "score_modes": [m.value for m in self.score_modes],
            "score_methods": list(self.score_methods) if self.score_methods else "all",
            "idk_variant": self.idk_variant.value,
            "hybrid_alpha": self.hybrid_alpha,
            "masj_kinds": [k.value for k in self.masj_kinds],
            "tier_fractions": self.plan.tier_fractions,
            "ratios": self.plan.ratios,
            "balance": self.plan.balance,
            "curate_method": self.curate_method,
            "curate_mode": self.curate_mode.value,
            "drop_teacher_wrong": self.drop_teacher_wrong,
            "epochs_regular": self.epochs_regular,
            "epochs_hard": self.epochs_hard,
            "reference_tokens": self.reference_tokens,
        }


def _endpoint_meta(endpoint: EndpointConfig | None) -> dict[str, object] | None:
    if endpoint is None:
        return None
    return {
        "base_url": endpoint.base_url,
        "model": endpoint.model,
        "top_logprobs": endpoint.top_logprobs,
        "temperature": endpoint.temperature,
    }


def _endpoint_from_section(
    parser: configparser.ConfigParser, section: str
) -> EndpointConfig:
    get = parser[section].get
    try:
        return EndpointConfig(
            base_url=get("base_url", ""),
            model=get("model", ""),
            api_key_env=get("api_key_env", ""),
            top_logprobs=parser.getint(section, "top_logprobs", fallback=20),
            max_new_tokens=parser.getint(section, "max_new_tokens", fallback=DEFAULT_MAX_NEW_SINGLE),
            temperature=parser.getfloat(section, "temperature", fallback=0.0),
            timeout=parser.getfloat(section, "timeout", fallback=30.0),
            max_retries=parser.getint(section, "max_retries", fallback=5),
            max_in_flight=parser.getint(section, "max_in_flight", fallback=4),
            retry_backoff=parser.getfloat(section, "retry_backoff", fallback=0.5),
        )
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from exc


def _csv_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _triple(raw: str, field_name: str) -> tuple[float, float, float]:
    values = [float(v) for v in _csv_list(raw)]
    if len(values) != 3:
        raise ConfigError(field_name, f"expected three comma-separated values, got {raw!r}")
    return values[0], values[1], values[2]


def load_config(
    path: str | Path,
    run_dir: str | Path | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Parse and validate a run configuration; CLI overrides win over file
    values. The dataset must exist at load time."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")

    if "run" not in parser:
        raise ConfigError("run", "missing [run] section")
    run = parser["run"]
    dataset_raw = run.get("dataset", "")
    if not dataset_raw:
        raise ConfigError("run.dataset", "dataset path is required")
    dataset = (path.parent / dataset_raw).resolve() if not Path(dataset_raw).is_absolute() else Path(dataset_raw)
    if not dataset.exists():
        raise ConfigError("run.dataset", f"dataset file {dataset} does not exist")

    run_dir_raw = run.get("run_dir", "")
    if run_dir is None and not run_dir_raw:
        raise ConfigError("run.run_dir", "run directory is required")
    resolved_run_dir = Path(run_dir) if run_dir is not None else (
        (path.parent / run_dir_raw) if not Path(run_dir_raw).is_absolute() else Path(run_dir_raw)
    )
    effective_seed = seed if seed is not None else run.getint("seed", fallback=0)

    student = _endpoint_from_section(parser, "student") if "student" in parser else None
    if student is not None and not student.base_url:
        student = None
    judge = _endpoint_from_section(parser, "judge") if "judge" in parser else None
    teachers = tuple(
        _endpoint_from_section(parser, section)
        for section in parser.sections()
        if section == "teacher" or section.startswith("teacher:")
    )

    traces_dir = None
    if "student" in parser and parser["student"].get("traces_dir", ""):
        raw = parser["student"]["traces_dir"]
        traces_dir = (path.parent / raw) if not Path(raw).is_absolute() else Path(raw)
        if not traces_dir.exists():
            raise ConfigError("student.traces_dir", f"{traces_dir} does not exist")

    score = parser["score"] if "score" in parser else {}
    try:
        modes = tuple(
            PromptMode(m) for m in _csv_list(score.get("modes", "single_token"))
        )
    except ValueError as exc:
        raise ConfigError("score.modes", str(exc)) from exc
    methods_raw = score.get("methods", "") if score else ""
    methods: tuple[str, ...] | None = None
    if methods_raw:
        methods = tuple(_csv_list(methods_raw))
        for name in methods:
            if name == "hybrid_mix":
                continue  # alpha attaches later, from score.hybrid_alpha
            try:
                MethodId(name)
            except UnknownMethod as exc:
                raise ConfigError("score.methods", str(exc)) from exc
    try:
        variant = IdkVariant(score.get("idk_variant", "certain") if score else "certain")
    except ValueError as exc:
        raise ConfigError("score.idk_variant", str(exc)) from exc
    hybrid_alpha = float(score.get("hybrid_alpha", "0.05")) if score else 0.05
    if not 0.0 <= hybrid_alpha <= 1.0:
        raise ConfigError("score.hybrid_alpha", f"alpha must be in [0,1], got {hybrid_alpha}")

    masj_kinds: tuple[MasjKind, ...] = ()
    if "masj" in parser:
        try:
            masj_kinds = tuple(MasjKind(k) for k in _csv_list(parser["masj"].get("kinds", "")))
        except ValueError as exc:
            raise ConfigError("masj.kinds", str(exc)) from exc

    curate = parser["curate"] if "curate" in parser else {}
    preset = curate.get("tier_preset", "thirds") if curate else "thirds"
    if curate and curate.get("tier_fractions", ""):
        fractions = _triple(curate["tier_fractions"], "curate.tier_fractions")
    elif preset in TIER_PRESETS:
        fractions = TIER_PRESETS[preset]
    else:
        raise ConfigError("curate.tier_preset", f"unknown preset {preset!r}")
    ratios = (
        _triple(curate["ratios"], "curate.ratios")
        if curate and curate.get("ratios", "")
        else (0.70, 0.10, 0.20)
    )
    try:
        plan = SplitPlan(
            tier_fractions=fractions,
            ratios=ratios,
            seed=effective_seed,
            balance=parser.getboolean("curate", "balance", fallback=True),
        )
    except ValueError as exc:
        raise ConfigError("curate", str(exc)) from exc

    curate_method = curate.get("method", "answer_entropy") if curate else "answer_entropy"
    try:
        MethodId.parse(curate_method)
    except UnknownMethod as exc:
        raise ConfigError("curate.method", str(exc)) from exc
    try:
        curate_mode = PromptMode(curate.get("mode", "single_token") if curate else "single_token")
    except ValueError as exc:
        raise ConfigError("curate.mode", str(exc)) from exc

    reference_raw = curate.get("reference_tokens", "") if curate else ""

    return RunConfig(
        dataset=dataset,
        run_dir=resolved_run_dir,
        seed=effective_seed,
        student=student,
        student_max_new_single=parser.getint(
            "student", "max_new_tokens_single", fallback=DEFAULT_MAX_NEW_SINGLE
        ) if "student" in parser else DEFAULT_MAX_NEW_SINGLE,
        student_max_new_cot=parser.getint(
            "student", "max_new_tokens_cot", fallback=DEFAULT_MAX_NEW_COT
        ) if "student" in parser else DEFAULT_MAX_NEW_COT,
        traces_dir=traces_dir,
        judge=judge,
        teachers=teachers,
        score_modes=modes,
        score_methods=methods,
        idk_variant=variant,
        hybrid_alpha=hybrid_alpha,
        masj_kinds=masj_kinds,
        plan=plan,
        curate_method=curate_method,
        curate_mode=curate_mode,
        drop_teacher_wrong=parser.getboolean("curate", "drop_teacher_wrong", fallback=False),
        epochs_regular=parser.getint("curate", "epochs_regular", fallback=5),
        epochs_hard=parser.getint("curate", "epochs_hard", fallback=5),
        feature_importance=parser.getboolean("eval", "feature_importance", fallback=False),
        reference_tokens=float(reference_raw) if reference_raw else None,
    )
