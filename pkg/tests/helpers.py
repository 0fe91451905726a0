"""Shared fixtures: task builders and wired mock-backend worlds."""

from __future__ import annotations

import math

import numpy as np

from fewshot.backend import MockBackend, hash_embedding
from fewshot.dataset import CodingTask, IOExample
from fewshot.prompting import DEFAULT_TEMPLATE, render_example, render_prompt


def make_examples(pairs) -> tuple[IOExample, ...]:
    return tuple(IOExample(inp, exp, id=i) for i, (inp, exp) in enumerate(pairs))


def make_task(
    task_id: str = "t0",
    n_pool: int = 3,
    n_eval: int = 2,
    nl: str | None = None,
    ground_truth: str | None = None,
    entry_point: str = "inc",
) -> CodingTask:
    pool = make_examples([(f"{entry_point}({i})", f"{i + 1}") for i in range(n_pool)])
    eval_tests = tuple(
        IOExample(f"{entry_point}({100 + i})", f"{101 + i}", id=i) for i in range(n_eval)
    )
    return CodingTask(
        task_id=task_id,
        nl_description=nl or f"increment the input ({task_id})",
        entry_point=entry_point,
        ground_truth=ground_truth or f"def {entry_point}(x):\n    return x + 1  # {task_id}",
        pool=pool,
        eval_tests=eval_tests,
    )


def make_tasks(n_tasks: int, n_pool: int = 3, n_eval: int = 2) -> list[CodingTask]:
    return [make_task(f"t{i}", n_pool=n_pool, n_eval=n_eval) for i in range(n_tasks)]


def wire_source_scores(backend: MockBackend, task, scores: dict[int, float], template=DEFAULT_TEMPLATE):
    """Make source_perplexity(task, ex) come out as scores[ex.id] (single token)."""
    for ex in task.pool:
        prompt = render_prompt(template, task.nl_description, [ex])
        backend.score_table[("", prompt)] = (-math.log(scores[ex.id]),)


def wire_target_logprobs(backend: MockBackend, task, examples, logprobs, template=DEFAULT_TEMPLATE):
    """Prescribe the ground-truth token logprobs for one exact prompt."""
    prompt = render_prompt(template, task.nl_description, list(examples))
    backend.score_table[(prompt, task.ground_truth)] = tuple(logprobs)


def additive_world(
    tasks,
    effects: dict[str, dict[int, float]],
    *,
    base: float = 6.0,
    gt_tokens: int = 4,
    template=DEFAULT_TEMPLATE,
    **mock_kwargs,
) -> MockBackend:
    """Mock world where each included example independently lowers the target
    log-perplexity: ln PP(task | examples E) = base - sum(effects[task][e.id]).

    Effects must stay below ``base`` in total so logprobs remain <= 0.
    """
    by_gt = {task.ground_truth: task for task in tasks}
    rendered = {
        task.task_id: {ex.id: render_example(template, ex) for ex in task.pool}
        for task in tasks
    }

    def score_fn(context: str, continuation: str):
        task = by_gt.get(continuation)
        if task is None:
            return None
        total = sum(
            eff
            for ex_id, eff in effects[task.task_id].items()
            if rendered[task.task_id][ex_id] in context
        )
        ln_pp = base - total
        assert ln_pp >= 0, "wired effects exceeded the base log-perplexity"
        return [-ln_pp] * gt_tokens

    return MockBackend(score_fn=score_fn, **mock_kwargs)


def softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def regression_world(
    tasks,
    *,
    dim: int = 32,
    seed: int = 0,
    gt_tokens: int = 3,
    template=DEFAULT_TEMPLATE,
    **mock_kwargs,
) -> MockBackend:
    """Noiseless world: ln PP_target of any prompt is a fixed smooth function
    of that prompt's (hash-derived) embedding, identical to what embed() returns."""
    by_gt = {task.ground_truth: task for task in tasks}
    rng = np.random.default_rng(seed + 12345)
    weight = rng.standard_normal(dim) / math.sqrt(dim)

    def score_fn(context: str, continuation: str):
        if continuation not in by_gt:
            return None
        h = hash_embedding(seed, dim, context)
        ln_pp = softplus(float(weight @ h))
        return [-ln_pp] * gt_tokens

    return MockBackend(seed=seed, embed_dim=dim, score_fn=score_fn, **mock_kwargs)
