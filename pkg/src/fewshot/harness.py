"""Pass-rate evaluation and experiment runners.

The executor contract is a JSON request/response exchange:

    request  {"solution_code": str, "entry_point": str,
              "tests": [{"input_expr": str, "expected_expr": str}, ...],
              "timeout_ms": int}
    response {"passed": bool,
              "per_test": [{"passed": bool, "detail": str}, ...],
              "error": str | null}

:class:`SubprocessExecutor` speaks it to a child process (request on stdin,
response on stdout, nonzero exit = harness error); :class:`MockExecutor` is a
verdict lookup table so the whole suite runs without any sandbox.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import random
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .backend import ScoringBackend
from .dataset import BY_EXAMPLE, BY_PROMPT, CodingTask, IOExample, SplitSpec, split_examples, split_tasks
from .errors import ConfigError, DomainError, ExecutorError
from .metrics import mean_stderr, spearman, target_perplexity
from .mlp import MlpModel, TrainConfig, TrainingPair, train
from .mlp import collect_pairs as _collect_pairs
from .prompting import PromptTemplate, render_prompt
from .rankers import (
    HUMAN_ORDER,
    MODEL_BASED,
    MODEL_FREE,
    Ranking,
    rank_human_order,
    rank_model_based,
    rank_model_free,
    rank_random,
    select,
)

RANDOM = "random"
MODEL_BASED_DESC = "model_based_desc"
STANDARD_RANKERS = (MODEL_FREE, MODEL_BASED, MODEL_BASED_DESC, RANDOM, HUMAN_ORDER)

DEFAULT_MAX_NEW_TOKENS = 512
DEFAULT_TIMEOUT_MS = 5000


@dataclass(frozen=True)
class TestResult:
    example_id: int
    passed: bool
    detail: str


@dataclass(frozen=True)
class ExecutionVerdict:
    task_id: str
    passed: bool
    per_test: tuple[TestResult, ...]
    duration: float
    executor_id: str


def all_pass_response(n_tests: int) -> dict:
    return {
        "passed": True,
        "per_test": [{"passed": True, "detail": ""} for _ in range(n_tests)],
        "error": None,
    }


class MockExecutor:
    """Verdict lookup table keyed by solution code; unknown code fails all tests."""

    executor_id = "mock"

    def __init__(self, table: Mapping[str, dict] | None = None):
        self.table = dict(table or {})
        self.requests: list[dict] = []

    def run(self, request: dict) -> dict:
        self.requests.append(copy.deepcopy(request))
        response = self.table.get(request["solution_code"])
        if response is not None:
            return copy.deepcopy(response)
        return {
            "passed": False,
            "per_test": [
                {"passed": False, "detail": "unknown_solution"} for _ in request["tests"]
            ],
            "error": None,
        }


class SubprocessExecutor:
    """Runs each request in a fresh child process speaking the executor protocol."""

    def __init__(self, command: Sequence[str], *, overhead_s: float = 10.0):
        self.command = list(command)
        self.overhead_s = overhead_s
        self.executor_id = "subprocess:" + " ".join(self.command)

    def run(self, request: dict) -> dict:
        budget = len(request["tests"]) * request["timeout_ms"] / 1000.0 + self.overhead_s
        try:
            proc = subprocess.run(
                self.command,
                input=json.dumps(request),
                capture_output=True,
                text=True,
                timeout=budget,
            )
        except subprocess.TimeoutExpired as exc:
            raise ExecutorError(f"runner exceeded the overall budget of {budget:.1f}s") from exc
        except OSError as exc:
            raise ExecutorError(f"could not spawn runner {self.command}: {exc}") from exc
        if proc.returncode != 0:
            raise ExecutorError(
                f"runner exited with status {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        try:
            return json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            raise ExecutorError(f"runner emitted invalid JSON: {proc.stdout[:200]!r}") from exc


def extract_solution(completion: str) -> str:
    """Cut the completion at the end of its first top-level function.

    Keeps any leading imports/helpers, then once a top-level ``def`` has been
    seen, stops at the next non-blank top-level line.  Completions without a
    top-level function pass through unchanged.
    """
    lines = completion.splitlines()
    kept: list[str] = []
    seen_def = False
    for line in lines:
        top_level = bool(line) and not line[0].isspace()
        if seen_def and top_level and line.strip():
            break
        kept.append(line)
        if top_level and line.lstrip().startswith("def "):
            seen_def = True
    return "\n".join(kept)


def pass_at_1(
    task: CodingTask,
    examples: Sequence[IOExample],
    template: PromptTemplate,
    backend: ScoringBackend,
    executor,
    *,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> ExecutionVerdict:
    """Greedy single completion, executed against the held-out tests.

    The verdict is binary per task: pass only if every held-out test passes.
    Executor timeouts show up as failing tests with detail ``timeout``; an
    executor crash raises :class:`ExecutorError` instead of returning a
    verdict.
    """
    if not task.eval_tests:
        raise DomainError(f"task {task.task_id!r} has no eval tests")
    started = time.perf_counter()
    completion = backend.generate(render_prompt(template, task.nl_description, examples), max_new_tokens)
    solution = extract_solution(completion)
    request = {
        "solution_code": solution,
        "entry_point": task.entry_point,
        "tests": [
            {"input_expr": t.input_expr, "expected_expr": t.expected_expr}
            for t in task.eval_tests
        ],
        "timeout_ms": timeout_ms,
    }
    response = executor.run(request)
    duration = time.perf_counter() - started
    raw = response.get("per_test")
    if not isinstance(raw, list) or len(raw) != len(task.eval_tests):
        raise ExecutorError(
            f"executor returned {0 if not isinstance(raw, list) else len(raw)} per_test "
            f"entries for {len(task.eval_tests)} tests"
        )
    per_test = tuple(
        TestResult(example_id=t.id, passed=bool(r.get("passed")), detail=str(r.get("detail", "")))
        for t, r in zip(task.eval_tests, raw)
    )
    return ExecutionVerdict(
        task_id=task.task_id,
        passed=all(r.passed for r in per_test),
        per_test=per_test,
        duration=duration,
        executor_id=executor.executor_id,
    )


# ---------------------------------------------------------------------------
# Experiment reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeriesPoint:
    metric: str
    ranker: str
    n: int
    mean: float
    stderr: float
    count: int


@dataclass(frozen=True)
class TimingPoint:
    n: int
    mean_duration: float
    count: int


@dataclass(frozen=True)
class ExperimentReport:
    experiment_id: str
    series: tuple[SeriesPoint, ...]
    timing: tuple[TimingPoint, ...]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        object.__setattr__(self, "timing", tuple(self.timing))

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "series": [vars(p) | {} for p in self.series],
            "timing": [vars(p) | {} for p in self.timing],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        return cls(
            experiment_id=data["experiment_id"],
            series=tuple(SeriesPoint(**p) for p in data["series"]),
            timing=tuple(TimingPoint(**p) for p in data["timing"]),
            config=data.get("config", {}),
        )


def export_report(report: ExperimentReport, out_dir, formats: Sequence[str] = ("json", "csv")) -> list[Path]:
    """Write the report with a stable column order and stable bytes.

    The metric series and config snapshot land in ``<id>.json``/``<id>.csv``,
    which are byte-identical for identical reports (and hence across re-runs
    with the same seeds on a deterministic backend).  Wall-clock timing is an
    observation of the environment, not a seeded result, so it goes into
    separate ``<id>_timing.*`` files that carry no determinism guarantee.
    The CSV is plot-ready long format (metric, ranker, n, mean, stderr,
    count).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    data = report.to_dict()
    timing = data.pop("timing")
    if "json" in formats:
        path = out_dir / f"{report.experiment_id}.json"
        path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.append(path)
        if timing:
            timing_json = out_dir / f"{report.experiment_id}_timing.json"
            timing_json.write_text(
                json.dumps(timing, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
            written.append(timing_json)
    if "csv" in formats:
        path = out_dir / f"{report.experiment_id}.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "ranker", "n", "mean", "stderr", "count"])
            for p in report.series:
                writer.writerow([p.metric, p.ranker, p.n, p.mean, p.stderr, p.count])
        written.append(path)
        if timing:
            timing_path = out_dir / f"{report.experiment_id}_timing.csv"
            with timing_path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["n", "mean_duration", "count"])
                for t in report.timing:
                    writer.writerow([t.n, t.mean_duration, t.count])
            written.append(timing_path)
    return written


def import_report(path) -> ExperimentReport:
    """Rebuild a report from ``<id>.json``, merging the timing sidecar if present."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    data.setdefault("timing", [])
    timing_path = path.with_name(path.stem + "_timing.json")
    if timing_path.exists():
        data["timing"] = json.loads(timing_path.read_text(encoding="utf-8"))
    return ExperimentReport.from_dict(data)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def _draw_examples(task: CodingTask, n: int, seed: int, trial: int) -> list[IOExample]:
    digest = hashlib.sha256(f"{seed}|{task.task_id}|{trial}|{n}".encode("utf-8")).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    return rng.sample(list(task.pool), n)


def run_multi_example_study(
    tasks: Sequence[CodingTask],
    template: PromptTemplate,
    backend: ScoringBackend,
    max_n: int,
    trials: int,
    seed: int,
) -> ExperimentReport:
    """Effect of adding 0..max_n randomly chosen examples to each prompt.

    Reports the log-scale perplexity change against the no-example baseline
    (negative = improvement), with standard errors across prompts, plus wall
    time per scoring request at each prompt length.
    """
    if not tasks:
        raise DomainError("study needs at least one task")
    if trials < 1:
        raise DomainError("trials must be >= 1")
    min_pool = min(len(task.pool) for task in tasks)
    if max_n > min_pool:
        raise DomainError(f"max_n={max_n} exceeds the smallest pool size {min_pool}")

    baselines = {
        task.task_id: target_perplexity(task, [], template, backend).log_value
        for task in tasks
    }
    series: list[SeriesPoint] = []
    timing: list[TimingPoint] = []
    for n in range(0, max_n + 1):
        per_task: list[float] = []
        durations: list[float] = []
        for task in tasks:
            trial_deltas = []
            for trial in range(trials):
                examples = _draw_examples(task, n, seed, trial)
                started = time.perf_counter()
                score = target_perplexity(task, examples, template, backend)
                durations.append(time.perf_counter() - started)
                trial_deltas.append(score.log_value - baselines[task.task_id])
            per_task.append(math.fsum(trial_deltas) / len(trial_deltas))
        mean, stderr = mean_stderr(per_task)
        series.append(
            SeriesPoint(
                metric="delta_log_target_pp",
                ranker=RANDOM,
                n=n,
                mean=mean,
                stderr=stderr,
                count=len(per_task),
            )
        )
        timing.append(
            TimingPoint(n=n, mean_duration=math.fsum(durations) / len(durations), count=len(durations))
        )
    return ExperimentReport(
        experiment_id="multi_example_study",
        series=tuple(series),
        timing=tuple(timing),
        config={
            "seed": seed,
            "trials": trials,
            "max_n": max_n,
            "backend_id": backend.backend_id,
            "task_ids": [t.task_id for t in tasks],
            "sign_convention": "negative delta_log_target_pp = improvement",
        },
    )


RankerFn = Callable[[CodingTask], Ranking]


def build_rankers(
    names: Sequence[str],
    template: PromptTemplate,
    backend: ScoringBackend,
    model: MlpModel | None,
    seed: int,
) -> dict[str, RankerFn]:
    """Resolve standard ranker names to ranking callables.

    ``model_based`` uses the minimizing (ascending predicted perplexity)
    direction; ``model_based_desc`` is the same regressor sorted the other
    way, so comparison runs can answer the direction question empirically.
    """
    fns: dict[str, RankerFn] = {}
    for name in names:
        if name == MODEL_FREE:
            fns[name] = lambda task: rank_model_free(task, template, backend)
        elif name in (MODEL_BASED, MODEL_BASED_DESC):
            if model is None:
                raise ConfigError(f"the {name} ranker needs a trained model")
            descending = name == MODEL_BASED_DESC
            fns[name] = (
                lambda task, descending=descending: rank_model_based(
                    task, template, backend, model, descending=descending
                )
            )
        elif name == RANDOM:
            fns[name] = lambda task: rank_random(task, seed)
        elif name == HUMAN_ORDER:
            fns[name] = rank_human_order
        else:
            raise ConfigError(f"unknown ranker {name!r}; expected one of {STANDARD_RANKERS}")
    return fns


def run_main_comparison(
    test_tasks: Sequence[CodingTask],
    rankers: Sequence[str] | Mapping[str, RankerFn],
    template: PromptTemplate,
    backend: ScoringBackend,
    model: MlpModel | None = None,
    n_values: Sequence[int] = (0, 1, 2),
    executor=None,
    *,
    seed: int = 0,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> ExperimentReport:
    """Compare rankers on top-N selection quality.

    Records the mean log target perplexity per (ranker, N) and, when an
    executor is supplied, the pass rate (mean of per-task binary verdicts).
    ``rankers`` is either a list of standard ranker names or a mapping from
    name to a ranking callable, which lets callers inject reference rankers.
    Requesting ``model_based`` by name also reports its descending twin, so
    the sort-direction question stays answerable from the same report.
    """
    if not test_tasks:
        raise DomainError("comparison needs at least one task")
    min_pool = min(len(task.pool) for task in test_tasks)
    for n in n_values:
        if not 0 <= n <= min_pool:
            raise DomainError(f"n={n} exceeds the smallest pool size {min_pool}")
    if isinstance(rankers, Mapping):
        ranker_fns = dict(rankers)
    else:
        names = list(rankers)
        if MODEL_BASED in names and MODEL_BASED_DESC not in names:
            names.append(MODEL_BASED_DESC)
        ranker_fns = build_rankers(names, template, backend, model, seed)

    rankings = {
        name: {task.task_id: fn(task) for task in test_tasks}
        for name, fn in ranker_fns.items()
    }
    series: list[SeriesPoint] = []
    for name in ranker_fns:
        for n in sorted(n_values):
            log_pps: list[float] = []
            passes: list[float] = []
            for task in test_tasks:
                examples = select(task, rankings[name][task.task_id], n)
                log_pps.append(target_perplexity(task, examples, template, backend).log_value)
                if executor is not None:
                    verdict = pass_at_1(
                        task,
                        examples,
                        template,
                        backend,
                        executor,
                        max_new_tokens=max_new_tokens,
                        timeout_ms=timeout_ms,
                    )
                    passes.append(1.0 if verdict.passed else 0.0)
            mean, stderr = mean_stderr(log_pps)
            series.append(
                SeriesPoint(
                    metric="log_target_pp", ranker=name, n=n, mean=mean, stderr=stderr, count=len(log_pps)
                )
            )
            if executor is not None:
                mean, stderr = mean_stderr(passes)
                series.append(
                    SeriesPoint(
                        metric="pass_at_1", ranker=name, n=n, mean=mean, stderr=stderr, count=len(passes)
                    )
                )
    return ExperimentReport(
        experiment_id="main_comparison",
        series=tuple(series),
        timing=(),
        config={
            "seed": seed,
            "n_values": sorted(n_values),
            "rankers": list(ranker_fns),
            "backend_id": backend.backend_id,
            "task_ids": [t.task_id for t in test_tasks],
            "executor_id": None if executor is None else executor.executor_id,
        },
    )


# ---------------------------------------------------------------------------
# Distribution-shift study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpearmanStats:
    """Predicted-vs-actual rank agreement on one test portion.

    ``pooled`` ranks every (task, example) item in the portion jointly, the
    way the predicted/actual rank scatter is read; the per-task fields
    aggregate one coefficient per task with at least two held-out examples.
    """

    mode: str
    pooled: float
    n_items: int
    per_task_mean: float
    per_task_stderr: float
    n_tasks: int


def _pair_for(task: CodingTask, example: IOExample, template, backend) -> TrainingPair:
    prompt = render_prompt(template, task.nl_description, [example])
    embedding = backend.embed(prompt)
    score = target_perplexity(task, [example], template, backend)
    return TrainingPair(
        task_id=task.task_id,
        example_id=example.id,
        embedding=embedding,
        target=score.log_value,
        raw_target=score.value,
    )


def _score_items(
    model: MlpModel,
    items: Sequence[tuple[CodingTask, IOExample]],
    template: PromptTemplate,
    backend: ScoringBackend,
) -> tuple[dict, dict]:
    actual = {}
    predicted = {}
    for key, (task, example) in enumerate(items):
        actual[key] = target_perplexity(task, [example], template, backend).log_value
        prompt = render_prompt(template, task.nl_description, [example])
        predicted[key] = model.predict(backend.embed(prompt))
    return actual, predicted


def _ranks_spearman(actual: dict, predicted: dict) -> float:
    actual_order = sorted(actual, key=lambda k: (actual[k], k))
    predicted_order = sorted(predicted, key=lambda k: (predicted[k], k))
    return spearman(predicted_order, actual_order)


def _portion_stats(
    mode: str,
    model: MlpModel,
    eval_sets: Sequence[tuple[CodingTask, Sequence[IOExample]]],
    template: PromptTemplate,
    backend: ScoringBackend,
) -> SpearmanStats:
    items = [(task, ex) for task, examples in eval_sets for ex in examples]
    if len(items) < 2:
        raise DomainError(f"{mode} test portion has fewer than 2 examples")
    actual, predicted = _score_items(model, items, template, backend)
    pooled = _ranks_spearman(actual, predicted)
    per_task = []
    for task, examples in eval_sets:
        if len(examples) < 2:
            continue
        sub = [(task, ex) for ex in examples]
        sub_actual, sub_predicted = _score_items(model, sub, template, backend)
        per_task.append(_ranks_spearman(sub_actual, sub_predicted))
    if per_task:
        per_task_mean, per_task_stderr = mean_stderr(per_task)
    else:
        per_task_mean, per_task_stderr = math.nan, math.nan
    return SpearmanStats(
        mode=mode,
        pooled=pooled,
        n_items=len(items),
        per_task_mean=per_task_mean,
        per_task_stderr=per_task_stderr,
        n_tasks=len(per_task),
    )


def run_distribution_shift_study(
    tasks: Sequence[CodingTask],
    template: PromptTemplate,
    backend: ScoringBackend,
    *,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    train_config: TrainConfig | None = None,
) -> tuple[SpearmanStats, SpearmanStats]:
    """Train under both split regimes and compare ranking quality.

    Out-of-distribution: whole prompts are split, so test prompts are unseen.
    In-distribution: each prompt's example pool is split, so the model ranks
    unseen examples of prompts it has trained on.  Returns predicted-vs-actual
    rank agreement for (ood, id).
    """
    train_config = train_config or TrainConfig()

    # out-of-distribution: split across prompts
    prompt_spec = SplitSpec(mode=BY_PROMPT, ratios=ratios, seed=seed)
    train_tasks, val_tasks, test_tasks = split_tasks(tasks, prompt_spec)
    if not train_tasks or not test_tasks:
        raise DomainError(
            f"cannot form a disjoint prompt split from {len(tasks)} task(s) "
            f"with ratios {ratios}"
        )
    ood_model = train(
        _collect_pairs(train_tasks, template, backend),
        train_config,
        _collect_pairs(val_tasks, template, backend) if val_tasks else None,
    )
    ood_stats = _portion_stats(
        BY_PROMPT,
        ood_model,
        [(task, task.pool) for task in test_tasks],
        template,
        backend,
    )

    # in-distribution: split across each prompt's examples
    example_spec = SplitSpec(mode=BY_EXAMPLE, ratios=ratios, seed=seed)
    id_train: list[TrainingPair] = []
    id_val: list[TrainingPair] = []
    id_eval: list[tuple[CodingTask, list[IOExample]]] = []
    for task in tasks:
        part_train, part_val, part_test = split_examples(task, example_spec)
        id_train.extend(_pair_for(task, ex, template, backend) for ex in part_train)
        id_val.extend(_pair_for(task, ex, template, backend) for ex in part_val)
        if part_test:
            id_eval.append((task, part_test))
    id_model = train(id_train, train_config, id_val or None)
    id_stats = _portion_stats(BY_EXAMPLE, id_model, id_eval, template, backend)
    return ood_stats, id_stats
