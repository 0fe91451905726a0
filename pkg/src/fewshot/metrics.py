"""Perplexity metrics, study aggregates, and rank correlation.

All perplexity arithmetic happens in log space (values span many orders of
magnitude and raw probability products underflow); the raw value is obtained
by exponentiating only at the end.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .backend import LogProbSequence, ScoringBackend, parallel_map
from .dataset import CodingTask, IOExample
from .errors import DomainError
from .prompting import PromptTemplate, render_prompt

TARGET = "target"
SOURCE = "source"


@dataclass(frozen=True)
class PerplexityScore:
    """Length-normalized inverse probability of a token sequence."""

    value: float
    log_value: float
    token_count: int
    kind: str


def perplexity(scores: LogProbSequence, kind: str = TARGET) -> PerplexityScore:
    """Perplexity of the continuation: exp of the negated mean token logprob."""
    n = scores.continuation_len
    if n == 0:
        raise DomainError("perplexity of an empty continuation is undefined")
    log_value = -(sum(scores.continuation_logprobs()) / n)
    return PerplexityScore(
        value=math.exp(log_value), log_value=log_value, token_count=n, kind=kind
    )


def target_perplexity(
    task: CodingTask,
    examples: Sequence[IOExample],
    template: PromptTemplate,
    backend: ScoringBackend,
) -> PerplexityScore:
    """How surprised the model is by the ground-truth code given the prompt.

    Lower is better; the empty example list gives the description-only
    baseline.
    """
    prompt = render_prompt(template, task.nl_description, examples)
    return perplexity(backend.score(prompt, task.ground_truth), kind=TARGET)


def source_perplexity(
    task: CodingTask,
    example: IOExample,
    template: PromptTemplate,
    backend: ScoringBackend,
) -> PerplexityScore:
    """How surprised the model is by the one-example prompt itself.

    The rendered prompt is scored as a continuation of the empty context, so
    no ground-truth code is needed.  High values mark examples the model
    would not produce on its own.
    """
    prompt = render_prompt(template, task.nl_description, [example])
    return perplexity(backend.score("", prompt), kind=SOURCE)


def delta_target_perplexity(
    task: CodingTask,
    examples: Sequence[IOExample],
    template: PromptTemplate,
    backend: ScoringBackend,
) -> float:
    """Log-scale change in target perplexity vs. the no-example baseline.

    Negative means the examples made the ground truth more likely.
    """
    if not examples:
        return 0.0
    with_examples = target_perplexity(task, examples, template, backend)
    baseline = target_perplexity(task, [], template, backend)
    return with_examples.log_value - baseline.log_value


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and standard error (sample std / sqrt(n); 0 when n < 2)."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise DomainError("mean of an empty sequence is undefined")
    mean = math.fsum(vals) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def lower_median(values: Sequence[float]) -> float:
    """Median using the lower of the two central values for even counts."""
    ordered = sorted(values)
    if not ordered:
        raise DomainError("median of an empty sequence is undefined")
    return ordered[(len(ordered) - 1) // 2]


@dataclass(frozen=True)
class StudyRow:
    """Aggregate effect of single examples for one backend label.

    Per task the best/average/median are taken over the task's pool; the
    reported numbers are means across tasks with their standard errors.
    """

    label: str
    n_tasks: int
    no_example: float
    no_example_stderr: float
    best_example: float
    best_example_stderr: float
    average_example: float
    average_example_stderr: float
    median_example: float
    median_example_stderr: float

    COLUMNS = (
        "label",
        "n_tasks",
        "no_example",
        "no_example_stderr",
        "best_example",
        "best_example_stderr",
        "average_example",
        "average_example_stderr",
        "median_example",
        "median_example_stderr",
    )

    def as_record(self) -> dict:
        return {name: getattr(self, name) for name in self.COLUMNS}


def single_example_study(
    tasks: Sequence[CodingTask],
    template: PromptTemplate,
    backend: ScoringBackend,
    *,
    max_workers: int = 1,
) -> list[StudyRow]:
    """Compare the no-example baseline against every single-example prompt."""
    if not tasks:
        raise DomainError("study needs at least one task")

    def evaluate(task: CodingTask) -> tuple[float, float, float, float]:
        base = target_perplexity(task, [], template, backend).value
        per_example = [
            target_perplexity(task, [ex], template, backend).value for ex in task.pool
        ]
        return (
            base,
            min(per_example),
            math.fsum(per_example) / len(per_example),
            lower_median(per_example),
        )

    rows = parallel_map(evaluate, tasks, max_workers)
    base_m, base_se = mean_stderr([r[0] for r in rows])
    best_m, best_se = mean_stderr([r[1] for r in rows])
    avg_m, avg_se = mean_stderr([r[2] for r in rows])
    med_m, med_se = mean_stderr([r[3] for r in rows])
    return [
        StudyRow(
            label=backend.backend_id,
            n_tasks=len(tasks),
            no_example=base_m,
            no_example_stderr=base_se,
            best_example=best_m,
            best_example_stderr=best_se,
            average_example=avg_m,
            average_example_stderr=avg_se,
            median_example=med_m,
            median_example_stderr=med_se,
        )
    ]


def spearman(rank_a: Sequence, rank_b: Sequence) -> float:
    """Spearman rank correlation of two permutations of the same index set."""
    a = list(rank_a)
    b = list(rank_b)
    if len(a) != len(b):
        raise DomainError(f"rank length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise DomainError("rank correlation needs at least 2 items")
    if len(set(a)) != len(a) or len(set(b)) != len(b) or set(a) != set(b):
        raise DomainError("inputs must be permutations of the same index set")
    position_b = {item: i for i, item in enumerate(b)}
    n = len(a)
    d_squared = sum((i - position_b[item]) ** 2 for i, item in enumerate(a))
    return 1.0 - 6.0 * d_squared / (n * (n * n - 1))


@dataclass(frozen=True)
class GroupStat:
    group: float
    count: int
    mean: float
    stderr: float


def passat1_perplexity_contrast(
    results: Iterable[tuple[float, float]],
) -> list[GroupStat]:
    """Mean perplexity statistic grouped by binary pass/fail outcome.

    Returns one row per group that is present; an absent group is simply
    omitted, not an error.
    """
    groups: dict[float, list[float]] = {0.0: [], 1.0: []}
    for passed, value in results:
        passed = float(passed)
        if passed not in (0.0, 1.0):
            raise DomainError(f"pass value must be 0 or 1, got {passed!r}")
        groups[passed].append(float(value))
    out = []
    for key in (0.0, 1.0):
        if groups[key]:
            mean, stderr = mean_stderr(groups[key])
            out.append(GroupStat(group=key, count=len(groups[key]), mean=mean, stderr=stderr))
    return out


# ---------------------------------------------------------------------------
# Plot-ready exports
# ---------------------------------------------------------------------------


def write_study_rows(rows: Sequence[StudyRow], out_dir, *, stem: str = "single_example_study") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=StudyRow.COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_record())
    jsonl_path = out_dir / f"{stem}.jsonl"
    with jsonl_path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.as_record(), sort_keys=True) + "\n")
    return [csv_path, jsonl_path]


def write_score_pairs(pairs: Sequence[dict], path) -> Path:
    """CSV of per-example paired scores (source vs. target) for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["task_id", "example_id", "source_log_pp", "target_log_pp", "delta_log_pp"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for record in pairs:
            writer.writerow({key: record[key] for key in columns})
    return path


def write_embedding_rows(rows: Sequence[dict], path) -> Path:
    """CSV of (embedding, label) rows for external dimensionality reduction.

    The label column ``delta_log_pp`` is the log-scale perplexity change the
    example causes relative to the no-example baseline.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if rows:
        dim = len(rows[0]["values"])
    else:
        dim = 0
    columns = ["task_id", "example_id", "delta_log_pp"] + [f"e{i}" for i in range(dim)]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for record in rows:
            writer.writerow(
                [record["task_id"], record["example_id"], record["delta_log_pp"]]
                + list(record["values"])
            )
    return path
