"""Ranking functions that order a task's example pool from best to worst.

Every ranker returns a :class:`Ranking` whose ``order`` is a permutation of
the pool's example ids, sorted by the ranker's scores with ties broken by
ascending id so results are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backend import ScoringBackend
from .dataset import CodingTask, IOExample
from .errors import DomainError
from .metrics import source_perplexity
from .mlp import MlpModel
from .prompting import BudgetSpec, PromptTemplate, fit_to_budget, render_prompt

MODEL_FREE = "model_free"
MODEL_BASED = "model_based"
MODEL_BASED_DESC = "model_based_desc"
HUMAN_ORDER = "human_order"


@dataclass(frozen=True)
class Ranking:
    """A permutation of one task's pool ids, best example first."""

    task_id: str
    order: tuple[int, ...]
    scores: Mapping[int, float]
    ranker_id: str

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "scores", dict(self.scores))


def order_by_scores(scores: Mapping[int, float], *, descending: bool) -> tuple[int, ...]:
    """Ids sorted by score in the given direction; ties break by ascending id."""
    if descending:
        return tuple(sorted(scores, key=lambda i: (-scores[i], i)))
    return tuple(sorted(scores, key=lambda i: (scores[i], i)))


def validate_ranking(task: CodingTask, ranking: Ranking) -> None:
    """Check that the ranking is a scored permutation of the task's pool ids."""
    pool_ids = [ex.id for ex in task.pool]
    if ranking.task_id != task.task_id:
        raise DomainError(
            f"ranking belongs to task {ranking.task_id!r}, not {task.task_id!r}"
        )
    if sorted(ranking.order) != sorted(pool_ids):
        raise DomainError(
            f"task {task.task_id!r}: order {list(ranking.order)} is not a "
            f"permutation of pool ids {pool_ids}"
        )
    if set(ranking.scores) != set(pool_ids):
        raise DomainError(f"task {task.task_id!r}: scores do not cover the pool ids")


def rank_model_free(
    task: CodingTask, template: PromptTemplate, backend: ScoringBackend
) -> Ranking:
    """Order the pool by descending source perplexity.

    Examples the model finds most surprising come first; needs no training
    and no ground-truth code.
    """
    scores = {
        ex.id: source_perplexity(task, ex, template, backend).value for ex in task.pool
    }
    return Ranking(
        task_id=task.task_id,
        order=order_by_scores(scores, descending=True),
        scores=scores,
        ranker_id=MODEL_FREE,
    )


def rank_model_based(
    task: CodingTask,
    template: PromptTemplate,
    backend: ScoringBackend,
    model: MlpModel,
    *,
    descending: bool = False,
) -> Ranking:
    """Order the pool by the regressor's predicted log target perplexity.

    The default is ascending (lowest predicted ground-truth perplexity
    first), matching the minimization objective; ``descending=True`` flips
    the direction for comparison runs.
    """
    scores = {}
    for ex in task.pool:
        prompt = render_prompt(template, task.nl_description, [ex])
        scores[ex.id] = model.predict(backend.embed(prompt))
    return Ranking(
        task_id=task.task_id,
        order=order_by_scores(scores, descending=descending),
        scores=scores,
        ranker_id=MODEL_BASED_DESC if descending else MODEL_BASED,
    )


def random_ranker_id(seed: int) -> str:
    return f"random({seed})"


def rank_random(task: CodingTask, seed: int) -> Ranking:
    """Seeded uniform shuffle of the pool; deterministic per (task_id, seed)."""
    digest = hashlib.sha256(f"{task.task_id}|{seed}".encode("utf-8")).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    scores = {ex.id: rng.random() for ex in task.pool}
    return Ranking(
        task_id=task.task_id,
        order=order_by_scores(scores, descending=True),
        scores=scores,
        ranker_id=random_ranker_id(seed),
    )


def rank_human_order(task: CodingTask) -> Ranking:
    """The pool's stored order, i.e. the human-authored example sequence."""
    scores = {ex.id: float(position) for position, ex in enumerate(task.pool)}
    return Ranking(
        task_id=task.task_id,
        order=order_by_scores(scores, descending=False),
        scores=scores,
        ranker_id=HUMAN_ORDER,
    )


def select(
    task: CodingTask,
    ranking: Ranking,
    n: int | BudgetSpec,
    *,
    template: PromptTemplate | None = None,
    backend: ScoringBackend | None = None,
) -> list[IOExample]:
    """Top-n prefix of the ranked pool, or the budget-fitted prefix.

    Each example was scored independently, so the k-th selection never
    depends on which examples follow it and ``select(r, k)`` is always a
    prefix of ``select(r, k+1)``.
    """
    validate_ranking(task, ranking)
    by_id = task.pool_by_id()
    ranked = [by_id[i] for i in ranking.order]
    if isinstance(n, BudgetSpec):
        if template is None or backend is None:
            raise DomainError("budget selection needs a template and a backend")
        return fit_to_budget(ranked, task.nl_description, template, n, backend.count_tokens)
    if not 0 <= n <= len(ranked):
        raise DomainError(f"n={n} out of range for pool of size {len(ranked)}")
    return ranked[:n]


def write_rankings(rankings: Sequence[Ranking], path) -> Path:
    """Line-delimited JSON export: {task_id, ranker_id, order, scores}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ranking in rankings:
            fh.write(
                json.dumps(
                    {
                        "task_id": ranking.task_id,
                        "ranker_id": ranking.ranker_id,
                        "order": list(ranking.order),
                        "scores": {str(k): v for k, v in sorted(ranking.scores.items())},
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def load_rankings(path) -> list[Ranking]:
    rankings = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            rankings.append(
                Ranking(
                    task_id=record["task_id"],
                    order=tuple(record["order"]),
                    scores={int(k): float(v) for k, v in record["scores"].items()},
                    ranker_id=record["ranker_id"],
                )
            )
    return rankings
