"""Prompt rendering and token-budget-constrained example selection.

A :class:`PromptTemplate` turns a natural-language description plus a list of
demonstration examples into the exact prompt text sent to the model.  With an
empty example list the rendering is exactly ``preamble + description +
suffix``, which doubles as the no-example baseline prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .dataset import IOExample
from .errors import DomainError

EXAMPLES_ONLY = "examples_only"
WHOLE_PROMPT = "whole_prompt"
COUNT_SCOPES = (EXAMPLES_ONLY, WHOLE_PROMPT)

TokenCounter = Callable[[str], int]


@dataclass(frozen=True)
class PromptTemplate:
    """Text skeleton for assembling prompts.

    ``example_format`` is a ``str.format`` pattern with ``{input_expr}`` and
    ``{expected_expr}`` slots; it carries its own leading glue so that the
    zero-example rendering has no dangling separators.
    """

    preamble: str = ""
    example_format: str = "\n>>> {input_expr} == {expected_expr}"
    example_separator: str = ""
    suffix: str = "\n"


DEFAULT_TEMPLATE = PromptTemplate()

_TEMPLATE_FIELDS = ("preamble", "example_format", "example_separator", "suffix")


def load_template(path) -> PromptTemplate:
    """Load a template from a JSON object file; missing fields keep defaults."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise DomainError(f"template file {path} must hold a JSON object")
    unknown = set(data) - set(_TEMPLATE_FIELDS)
    if unknown:
        raise DomainError(f"template file {path} has unknown fields {sorted(unknown)}")
    return PromptTemplate(**data)


def render_example(template: PromptTemplate, example: IOExample) -> str:
    return template.example_format.format(
        input_expr=example.input_expr, expected_expr=example.expected_expr
    )


def render_example_block(template: PromptTemplate, examples: Sequence[IOExample]) -> str:
    """The text the examples contribute to a prompt (used by budget counting)."""
    return template.example_separator.join(render_example(template, ex) for ex in examples)


def render_prompt(template: PromptTemplate, nl: str, examples: Sequence[IOExample]) -> str:
    """Render the full prompt; examples appear in the given order."""
    if not nl:
        raise DomainError("nl description must be non-empty")
    return template.preamble + nl + render_example_block(template, examples) + template.suffix


@dataclass(frozen=True)
class BudgetSpec:
    """Token cap on a prompt.  ``max_tokens=None`` means unbounded.

    ``count_scope`` picks what the cap applies to: just the example block
    (``examples_only``) or the fully rendered prompt (``whole_prompt``).
    """

    max_tokens: int | None
    count_scope: str = EXAMPLES_ONLY

    def __post_init__(self):
        if self.max_tokens is not None and self.max_tokens < 0:
            raise DomainError("max_tokens must be >= 0 when bounded")
        if self.count_scope not in COUNT_SCOPES:
            raise DomainError(
                f"unknown count_scope {self.count_scope!r}; expected one of {COUNT_SCOPES}"
            )


def fit_to_budget(
    ranked: Sequence[IOExample],
    nl: str,
    template: PromptTemplate,
    budget: BudgetSpec,
    counter: TokenCounter,
) -> list[IOExample]:
    """Longest prefix of ``ranked`` whose rendered token count fits the budget.

    ``ranked`` must already be in rank order; selection stops at the first
    example that overflows, preserving top-N semantics.  In ``whole_prompt``
    scope the zero-example prefix is returned even if the bare baseline prompt
    already exceeds the budget: this function selects examples, it cannot
    shrink the base prompt.
    """
    if budget.max_tokens is None:
        return list(ranked)

    def cost(prefix: Sequence[IOExample]) -> int:
        if budget.count_scope == EXAMPLES_ONLY:
            return counter(render_example_block(template, prefix))
        return counter(render_prompt(template, nl, prefix))

    selected: list[IOExample] = []
    for example in ranked:
        if cost([*selected, example]) > budget.max_tokens:
            break
        selected.append(example)
    return selected
