"""Benchmark task ingestion, validation, and deterministic splitting.

Task files are UTF-8 line-delimited JSON, one task object per line:

    {"task_id": "...", "nl_description": "...", "entry_point": "...",
     "ground_truth": "...",
     "pool": [{"input_expr": "...", "expected_expr": "..."}, ...],
     "eval_tests": [{"input_expr": "...", "expected_expr": "..."}, ...]}

``pool`` holds the candidate demonstration examples a ranker chooses from;
``eval_tests`` holds the held-out tests used for pass-rate evaluation.  The
two lists must be disjoint when compared by (input_expr, expected_expr).
Example ids are positional indices assigned at load time, so they are stable
across runs of the same file.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import DomainError, TaskParseError, TaskValidationError

BY_PROMPT = "by_prompt"
BY_EXAMPLE = "by_example"
SPLIT_MODES = (BY_PROMPT, BY_EXAMPLE)


@dataclass(frozen=True)
class IOExample:
    """One input/output demonstration: a call expression and its expected value."""

    input_expr: str
    expected_expr: str
    id: int

    def key(self) -> tuple[str, str]:
        """Identity used for pool/eval disjointness checks."""
        return (self.input_expr, self.expected_expr)


@dataclass(frozen=True)
class CodingTask:
    """One benchmark problem with its candidate example pool and held-out tests."""

    task_id: str
    nl_description: str
    entry_point: str
    ground_truth: str
    pool: tuple[IOExample, ...]
    eval_tests: tuple[IOExample, ...]

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(self.pool))
        object.__setattr__(self, "eval_tests", tuple(self.eval_tests))
        if not self.task_id:
            raise TaskValidationError("task_id must be non-empty")
        tid = self.task_id
        if not self.nl_description:
            raise TaskValidationError(f"task {tid!r}: nl_description must be non-empty")
        if not self.ground_truth:
            raise TaskValidationError(f"task {tid!r}: ground_truth must be non-empty")
        if len(self.pool) < 1:
            raise TaskValidationError(f"task {tid!r}: pool must hold at least one example")
        if len(self.eval_tests) < 1:
            raise TaskValidationError(f"task {tid!r}: eval_tests must hold at least one test")
        for name, seq in (("pool", self.pool), ("eval_tests", self.eval_tests)):
            # positional ids keep every downstream permutation well-defined
            got = [ex.id for ex in seq]
            if got != list(range(len(seq))):
                raise TaskValidationError(
                    f"task {tid!r}: {name} ids must be positional indices, got {got}"
                )
        overlap = {ex.key() for ex in self.pool} & {ex.key() for ex in self.eval_tests}
        if overlap:
            raise TaskValidationError(
                f"task {tid!r}: pool and eval_tests overlap on {sorted(overlap)[0]!r}"
            )

    def pool_by_id(self) -> dict[int, IOExample]:
        return {ex.id: ex for ex in self.pool}


@dataclass(frozen=True)
class SplitSpec:
    """How to cut an input set into (train, validation, test) parts.

    The cut is a seeded shuffle followed by contiguous slicing; the
    validation and test sizes are ``round(n * ratio)`` and the train part
    absorbs the remainder, so sizes are exact and deterministic.
    """

    mode: str
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.mode not in SPLIT_MODES:
            raise DomainError(f"unknown split mode {self.mode!r}; expected one of {SPLIT_MODES}")
        if len(self.ratios) != 3:
            raise DomainError("ratios must hold exactly three fractions")
        if any(r < 0 for r in self.ratios):
            raise DomainError("ratios must be non-negative")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DomainError(f"ratios must sum to 1, got {sum(self.ratios)!r}")


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = min(round(n * ratios[1]), n)
    n_test = min(round(n * ratios[2]), n - n_val)
    return n - n_val - n_test, n_val, n_test


def _split(items: Sequence, spec: SplitSpec) -> tuple[list, list, list]:
    order = list(items)
    random.Random(spec.seed).shuffle(order)
    n_train, n_val, _ = _split_sizes(len(order), spec.ratios)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def split_tasks(
    tasks: Sequence[CodingTask], spec: SplitSpec
) -> tuple[list[CodingTask], list[CodingTask], list[CodingTask]]:
    """Partition whole tasks into (train, val, test); prompts never cross parts."""
    if spec.mode != BY_PROMPT:
        raise DomainError(f"split_tasks requires mode={BY_PROMPT!r}, got {spec.mode!r}")
    if not tasks:
        raise DomainError("cannot split an empty task sequence")
    return _split(tasks, spec)


def split_examples(
    task: CodingTask, spec: SplitSpec
) -> tuple[list[IOExample], list[IOExample], list[IOExample]]:
    """Partition one task's pool into (train, val, test) example subsets."""
    if spec.mode != BY_EXAMPLE:
        raise DomainError(f"split_examples requires mode={BY_EXAMPLE!r}, got {spec.mode!r}")
    if not task.pool:
        raise DomainError(f"task {task.task_id!r} has an empty pool")
    return _split(task.pool, spec)


def _examples_from_record(
    items, *, lineno: int, field: str
) -> tuple[IOExample, ...]:
    if not isinstance(items, list):
        raise TaskParseError(f"line {lineno}: field {field!r} must be an array")
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise TaskParseError(f"line {lineno}: field {field!r}[{i}] must be an object")
        for key in ("input_expr", "expected_expr"):
            value = item.get(key)
            if not isinstance(value, str) or not value:
                raise TaskParseError(
                    f"line {lineno}: field {field!r}[{i}].{key} must be a non-empty string"
                )
        out.append(IOExample(item["input_expr"], item["expected_expr"], id=i))
    return tuple(out)


def _task_from_record(record: dict, lineno: int) -> CodingTask:
    if not isinstance(record, dict):
        raise TaskParseError(f"line {lineno}: record must be a JSON object")
    for key in ("task_id", "nl_description", "entry_point", "ground_truth"):
        value = record.get(key)
        if not isinstance(value, str) or not value:
            raise TaskParseError(f"line {lineno}: field {key!r} must be a non-empty string")
    return CodingTask(
        task_id=record["task_id"],
        nl_description=record["nl_description"],
        entry_point=record["entry_point"],
        ground_truth=record["ground_truth"],
        pool=_examples_from_record(record.get("pool"), lineno=lineno, field="pool"),
        eval_tests=_examples_from_record(
            record.get("eval_tests"), lineno=lineno, field="eval_tests"
        ),
    )


def load_tasks(path) -> list[CodingTask]:
    """Load and validate a line-delimited task file, preserving file order."""
    tasks = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TaskParseError(f"line {lineno}: invalid JSON: {exc}") from exc
            tasks.append(_task_from_record(record, lineno))
    return tasks


def task_to_record(task: CodingTask) -> dict:
    return {
        "task_id": task.task_id,
        "nl_description": task.nl_description,
        "entry_point": task.entry_point,
        "ground_truth": task.ground_truth,
        "pool": [
            {"input_expr": ex.input_expr, "expected_expr": ex.expected_expr} for ex in task.pool
        ],
        "eval_tests": [
            {"input_expr": ex.input_expr, "expected_expr": ex.expected_expr}
            for ex in task.eval_tests
        ],
    }


def write_tasks(tasks: Sequence[CodingTask], path) -> None:
    """Serialize tasks so that ``load_tasks(write_tasks(T)) == T``."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_record(task), sort_keys=True) + "\n")
