"""Few-shot example selection toolkit for code-generation prompts.

Ranks a task's candidate input/output examples so the most useful ones fit
into the prompt under a token budget, and measures the effect via
ground-truth perplexity and pass-rate evaluation.
"""

from .backend import (
    BackendConfig,
    CachedBackend,
    EmbeddingVector,
    HttpBackend,
    LogProbSequence,
    MockBackend,
    open_backend,
)
from .dataset import CodingTask, IOExample, SplitSpec, load_tasks, split_examples, split_tasks, write_tasks
from .harness import (
    ExecutionVerdict,
    ExperimentReport,
    MockExecutor,
    SubprocessExecutor,
    pass_at_1,
    run_distribution_shift_study,
    run_main_comparison,
    run_multi_example_study,
)
from .metrics import (
    PerplexityScore,
    delta_target_perplexity,
    perplexity,
    single_example_study,
    source_perplexity,
    spearman,
    target_perplexity,
)
from .mlp import MlpModel, TrainConfig, TrainingPair, collect_pairs, forward, gradient_check, train
from .prompting import BudgetSpec, DEFAULT_TEMPLATE, PromptTemplate, fit_to_budget, render_prompt
from .rankers import Ranking, rank_human_order, rank_model_based, rank_model_free, rank_random, select

__version__ = "0.1.0"
