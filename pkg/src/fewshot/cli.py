"""Command-line orchestration for the few-shot selection pipelines.

Every command writes its outputs plus a ``manifest.json`` (command, resolved
configuration hash, seeds, input/output paths, timestamps) into ``--out-dir``.
All randomness flows from ``--seed``, so re-running a command with the same
manifest against the mock backend reproduces the outputs byte for byte (the
manifest itself carries timestamps and is not part of that guarantee).

Configuration precedence: flags > environment variables > config file >
defaults.  Environment: ``BACKEND_BASE_URL``, ``BACKEND_API_KEY``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import harness, metrics, mlp, rankers
from .backend import BackendConfig, CachedBackend, HttpBackend, MockBackend, ScoringBackend
from .dataset import (
    BY_EXAMPLE,
    BY_PROMPT,
    CodingTask,
    SplitSpec,
    load_tasks,
    split_examples,
    split_tasks,
    task_to_record,
    write_tasks,
)
from .errors import BackendError, CapabilityError, ConfigError, FewshotError
from .prompting import (
    BudgetSpec,
    DEFAULT_TEMPLATE,
    EXAMPLES_ONLY,
    PromptTemplate,
    load_template,
    render_prompt,
)

ENV_BASE_URL = "BACKEND_BASE_URL"
ENV_API_KEY = "BACKEND_API_KEY"


# ---------------------------------------------------------------------------
# Option resolution
# ---------------------------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _resolve(flag_value, env_name: str | None, config: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if env_name and os.environ.get(env_name):
        return os.environ[env_name]
    if key in config:
        return config[key]
    return default


def _build_backend(args, config: dict) -> ScoringBackend:
    kind = _resolve(args.backend, None, config, "backend", "mock")
    base_url = _resolve(args.base_url, ENV_BASE_URL, config, "base_url", "http://localhost:8000/v1")
    model_name = _resolve(args.model_name, None, config, "model_name", "")
    api_key = _resolve(None, ENV_API_KEY, config, "api_key", None)
    parallel = args.parallel if args.parallel is not None else int(config.get("parallel", 1))
    if kind == "mock":
        mock_kwargs = dict(seed=args.seed, max_in_flight=max(parallel, 1))
        tables_path = getattr(args, "mock_tables", None)
        if tables_path:
            tables = json.loads(Path(tables_path).read_text(encoding="utf-8"))
            for key in ("seed", "embed_dim", "fail_marker", "latency_per_token"):
                if key in tables:
                    mock_kwargs[key] = tables[key]
            backend: ScoringBackend = MockBackend(**mock_kwargs)
            for entry in tables.get("score_table", []):
                backend.score_table[(entry["context"], entry["continuation"])] = tuple(
                    entry["logprobs"]
                )
            backend.completion_table.update(tables.get("completion_table", {}))
        else:
            backend = MockBackend(**mock_kwargs)
    elif kind == "http":
        backend = HttpBackend(
            BackendConfig(
                base_url=base_url,
                model_name=model_name,
                api_key=api_key,
                max_in_flight=max(parallel, 1),
            )
        )
    else:
        raise ConfigError(f"unknown backend {kind!r}; expected 'mock' or 'http'")
    if args.cache:
        backend = CachedBackend(backend, args.cache)
    return backend


def _load_template_arg(args) -> PromptTemplate:
    template = load_template(args.template) if args.template else DEFAULT_TEMPLATE
    overrides = {}
    for field in ("preamble", "example_format", "example_separator", "suffix"):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if overrides:
        template = PromptTemplate(**{**vars(template), **overrides})
    return template


def _token_counter(backend: ScoringBackend):
    """Backend tokenizer, falling back to whitespace counting with a warning."""

    def count(text: str) -> int:
        try:
            return backend.count_tokens(text)
        except CapabilityError:
            print(
                "warning: backend exposes no tokenize endpoint; "
                "falling back to whitespace token counting",
                file=sys.stderr,
            )
            return len(text.split())

    return count


def _write_manifest(args, out_dir: Path, inputs: list[str], outputs: list[Path], started: float):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    config_hash = hashlib.sha256(
        json.dumps(resolved, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_hash": config_hash,
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p.relative_to(out_dir)) for p in outputs],
        "started_at": started,
        "finished_at": time.time(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(records, path: Path) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _write_csv(records, columns, path: Path) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for record in records:
            writer.writerow({c: record.get(c) for c in columns})
    return path


class _BatchErrors:
    """Per-item failure records for batch scoring commands.

    Failures never abort the batch; they are written to ``errors.jsonl`` and
    the command exits nonzero unless ``--keep-going`` was passed.
    """

    def __init__(self, keep_going: bool):
        self.keep_going = keep_going
        self.records: list[dict] = []

    def run(self, label: dict, fn):
        try:
            return fn()
        except BackendError as exc:
            self.records.append({**label, "error": str(exc)})
            return None

    def finish(self, out_dir: Path, outputs: list[Path]) -> int:
        if self.records:
            path = _write_jsonl(self.records, out_dir / "errors.jsonl")
            outputs.append(path)
            return 0 if self.keep_going else 1
        return 0


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    tasks = load_tasks(args.tasks)
    path = out_dir / "tasks.jsonl"
    write_tasks(tasks, path)
    print(f"ingested {len(tasks)} tasks -> {path}")
    _write_manifest(args, out_dir, [args.tasks], [path], started)
    return 0


def cmd_split(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    tasks = load_tasks(args.tasks)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    spec = SplitSpec(mode=args.mode, ratios=ratios, seed=args.seed)
    outputs = []
    if args.mode == BY_PROMPT:
        parts = split_tasks(tasks, spec)
    else:
        # by-example: each part keeps every task whose share is non-empty,
        # with pool ids re-indexed positionally
        part_tasks: tuple[list, list, list] = ([], [], [])
        for task in tasks:
            for part, examples in zip(part_tasks, split_examples(task, spec)):
                if examples:
                    record = task_to_record(task)
                    record["pool"] = [
                        {"input_expr": ex.input_expr, "expected_expr": ex.expected_expr}
                        for ex in examples
                    ]
                    part.append(record)
        parts = part_tasks
    for name, part in zip(("train", "val", "test"), parts):
        path = out_dir / f"{name}.jsonl"
        if args.mode == BY_PROMPT:
            write_tasks(part, path)
        else:
            _write_jsonl(part, path)
        outputs.append(path)
        print(f"{name}: {len(part)} records -> {path}")
    _write_manifest(args, out_dir, [args.tasks], outputs, started)
    return 0


def _score_rows(args, kind: str) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = load_tasks(args.tasks)
    errors = _BatchErrors(args.keep_going)
    rows = []
    pair_rows = []
    for task in tasks:
        if kind == "target":
            base = errors.run(
                {"task_id": task.task_id, "example_id": None},
                lambda: metrics.target_perplexity(task, [], template, backend),
            )
            if base is not None:
                rows.append(
                    {
                        "task_id": task.task_id,
                        "example_id": -1,
                        "log_pp": base.log_value,
                        "pp": base.value,
                        "token_count": base.token_count,
                    }
                )
        for example in task.pool:
            label = {"task_id": task.task_id, "example_id": example.id}
            if kind == "source":
                score = errors.run(
                    label, lambda: metrics.source_perplexity(task, example, template, backend)
                )
            else:
                score = errors.run(
                    label, lambda: metrics.target_perplexity(task, [example], template, backend)
                )
            if score is None:
                continue
            rows.append(
                {
                    "task_id": task.task_id,
                    "example_id": example.id,
                    "log_pp": score.log_value,
                    "pp": score.value,
                    "token_count": score.token_count,
                }
            )
            if kind == "target" and args.pair_source:
                source = errors.run(
                    label, lambda: metrics.source_perplexity(task, example, template, backend)
                )
                if source is not None:
                    baseline = next(
                        (
                            r["log_pp"]
                            for r in rows
                            if r["task_id"] == task.task_id and r["example_id"] == -1
                        ),
                        None,
                    )
                    pair_rows.append(
                        {
                            "task_id": task.task_id,
                            "example_id": example.id,
                            "source_log_pp": source.log_value,
                            "target_log_pp": score.log_value,
                            "delta_log_pp": None
                            if baseline is None
                            else score.log_value - baseline,
                        }
                    )
    columns = ["task_id", "example_id", "log_pp", "pp", "token_count"]
    outputs = [
        _write_jsonl(rows, out_dir / f"{kind}_scores.jsonl"),
        _write_csv(rows, columns, out_dir / f"{kind}_scores.csv"),
    ]
    if kind == "target" and args.pair_source:
        outputs.append(metrics.write_score_pairs(pair_rows, out_dir / "score_pairs.csv"))
    status = errors.finish(out_dir, outputs)
    print(f"wrote {len(rows)} rows ({len(errors.records)} errors) -> {out_dir}")
    _write_manifest(args, out_dir, [args.tasks], outputs, started)
    return status


def cmd_score_source(args) -> int:
    return _score_rows(args, "source")


def cmd_score_target(args) -> int:
    return _score_rows(args, "target")


def cmd_embed(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = load_tasks(args.tasks)
    errors = _BatchErrors(args.keep_going)
    rows = []
    for task in tasks:
        base = errors.run(
            {"task_id": task.task_id, "example_id": None},
            lambda: metrics.target_perplexity(task, [], template, backend),
        )
        if base is None:
            continue
        for example in task.pool:
            label = {"task_id": task.task_id, "example_id": example.id}

            def build():
                prompt = render_prompt(template, task.nl_description, [example])
                vec = backend.embed(prompt)
                score = metrics.target_perplexity(task, [example], template, backend)
                return {
                    "task_id": task.task_id,
                    "example_id": example.id,
                    "delta_log_pp": score.log_value - base.log_value,
                    "values": list(vec.values),
                }

            row = errors.run(label, build)
            if row is not None:
                rows.append(row)
    outputs = [metrics.write_embedding_rows(rows, out_dir / "embeddings.csv")]
    status = errors.finish(out_dir, outputs)
    print(f"wrote {len(rows)} embedding rows -> {outputs[0]}")
    _write_manifest(args, out_dir, [args.tasks], outputs, started)
    return status


def cmd_collect(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = load_tasks(args.tasks)
    workers = args.parallel or 1
    pairs = mlp.collect_pairs(tasks, template, backend, max_workers=workers)
    path = mlp.write_pairs(pairs, out_dir / "pairs.jsonl")
    print(f"collected {len(pairs)} training pairs -> {path}")
    _write_manifest(args, out_dir, [args.tasks], [path], started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    pairs = mlp.load_pairs(args.pairs)
    val_pairs = mlp.load_pairs(args.val_pairs) if args.val_pairs else None
    config = mlp.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    model = mlp.train(pairs, config, val_pairs)
    path = model.save(out_dir / "model.json")
    final_mse = model.metadata["train_mse"][-1]
    print(f"trained on {len(pairs)} pairs, final train MSE {final_mse:.6f} -> {path}")
    inputs = [args.pairs] + ([args.val_pairs] if args.val_pairs else [])
    _write_manifest(args, out_dir, inputs, [path], started)
    return 0


def cmd_rank(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = load_tasks(args.tasks)
    model = mlp.MlpModel.load(args.model_file) if args.model_file else None
    name = args.ranker
    if args.descending and name == "model_based":
        name = harness.MODEL_BASED_DESC
    ranker_fns = harness.build_rankers([name], template, backend, model, args.seed)
    fn = ranker_fns[name]
    rankings = [fn(task) for task in tasks]
    path = rankers.write_rankings(rankings, out_dir / "rankings.jsonl")
    print(f"ranked {len(rankings)} tasks with {args.ranker} -> {path}")
    _write_manifest(args, out_dir, [args.tasks], [path], started)
    return 0


def cmd_select(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = {t.task_id: t for t in load_tasks(args.tasks)}
    rows = []
    for ranking in rankers.load_rankings(args.rankings):
        task = tasks.get(ranking.task_id)
        if task is None:
            raise ConfigError(f"rankings reference unknown task {ranking.task_id!r}")
        if args.budget_tokens is not None:
            from .prompting import fit_to_budget

            rankers.validate_ranking(task, ranking)
            by_id = task.pool_by_id()
            ranked = [by_id[i] for i in ranking.order]
            budget = BudgetSpec(max_tokens=args.budget_tokens, count_scope=args.count_scope)
            chosen = fit_to_budget(
                ranked, task.nl_description, template, budget, _token_counter(backend)
            )
        elif args.n is None:
            raise ConfigError("select needs either --n or --budget-tokens")
        else:
            chosen = rankers.select(task, ranking, args.n)
        rows.append(
            {
                "task_id": task.task_id,
                "ranker_id": ranking.ranker_id,
                "example_ids": [ex.id for ex in chosen],
                "prompt": render_prompt(template, task.nl_description, chosen),
            }
        )
    path = _write_jsonl(rows, out_dir / "selections.jsonl")
    print(f"selected examples for {len(rows)} tasks -> {path}")
    _write_manifest(args, out_dir, [args.tasks, args.rankings], [path], started)
    return 0


def _build_executor(args):
    if args.executor == "mock":
        table = {}
        if args.mock_verdicts:
            table = json.loads(Path(args.mock_verdicts).read_text(encoding="utf-8"))
        return harness.MockExecutor(table)
    if args.executor == "subprocess":
        command = args.executor_cmd or f"{sys.executable} -m sandbox_runner"
        return harness.SubprocessExecutor(command.split())
    raise ConfigError(f"unknown executor {args.executor!r}")


def cmd_eval(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = {t.task_id: t for t in load_tasks(args.tasks)}
    executor = _build_executor(args)
    verdict_rows = []
    passes = []
    for ranking in rankers.load_rankings(args.rankings):
        task = tasks.get(ranking.task_id)
        if task is None:
            raise ConfigError(f"rankings reference unknown task {ranking.task_id!r}")
        examples = rankers.select(task, ranking, args.n)
        verdict = harness.pass_at_1(
            task,
            examples,
            template,
            backend,
            executor,
            max_new_tokens=args.max_new_tokens,
            timeout_ms=args.timeout_ms,
        )
        passes.append(1.0 if verdict.passed else 0.0)
        verdict_rows.append(
            {
                "task_id": verdict.task_id,
                "passed": verdict.passed,
                "per_test": [
                    {"example_id": r.example_id, "passed": r.passed, "detail": r.detail}
                    for r in verdict.per_test
                ],
                "duration": verdict.duration,
                "executor_id": verdict.executor_id,
            }
        )
    summary = {
        "n_tasks": len(passes),
        "pass_at_1": sum(passes) / len(passes) if passes else None,
    }
    outputs = [
        _write_jsonl(verdict_rows, out_dir / "verdicts.jsonl"),
        (out_dir / "summary.json"),
    ]
    outputs[1].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"pass@1 = {summary['pass_at_1']} over {summary['n_tasks']} tasks -> {out_dir}")
    _write_manifest(args, out_dir, [args.tasks, args.rankings], outputs, started)
    return 0


def cmd_study(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    config = _load_config_file(args.config)
    backend = _build_backend(args, config)
    template = _load_template_arg(args)
    tasks = load_tasks(args.tasks)
    outputs: list[Path] = []
    if args.study == "multi":
        report = harness.run_multi_example_study(
            tasks, template, backend, args.max_n, args.trials, args.seed
        )
        outputs += harness.export_report(report, out_dir)
    elif args.study == "single":
        rows = metrics.single_example_study(
            tasks, template, backend, max_workers=args.parallel or 1
        )
        outputs += metrics.write_study_rows(rows, out_dir)
    elif args.study == "compare":
        model = mlp.MlpModel.load(args.model_file) if args.model_file else None
        names = [name.strip() for name in args.rankers.split(",") if name.strip()]
        n_values = [int(x) for x in args.n_values.split(",")]
        executor = _build_executor(args) if args.executor else None
        report = harness.run_main_comparison(
            tasks,
            names,
            template,
            backend,
            model,
            n_values,
            executor,
            seed=args.seed,
            max_new_tokens=args.max_new_tokens,
            timeout_ms=args.timeout_ms,
        )
        outputs += harness.export_report(report, out_dir)
    elif args.study == "shift":
        ratios = tuple(float(r) for r in args.ratios.split(","))
        train_config = mlp.TrainConfig(
            learning_rate=args.lr, epochs=args.epochs, seed=args.seed
        )
        ood, ind = harness.run_distribution_shift_study(
            tasks, template, backend, ratios=ratios, seed=args.seed, train_config=train_config
        )
        path = out_dir / "shift_stats.json"
        path.write_text(
            json.dumps(
                {"out_of_distribution": vars(ood) | {}, "in_distribution": vars(ind) | {}},
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        outputs.append(path)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown study {args.study!r}")
    for path in outputs:
        print(f"wrote {path}")
    _write_manifest(args, out_dir, [args.tasks], outputs, started)
    return 0


def cmd_report(args) -> int:
    started = time.time()
    out_dir = _out_dir(args)
    report = harness.import_report(args.report)
    outputs = harness.export_report(report, out_dir, formats=("csv",))
    for path in outputs:
        print(f"wrote {path}")
    _write_manifest(args, out_dir, [args.report], outputs, started)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, *, needs_backend: bool = True):
    parser.add_argument("--out-dir", default="out", help="directory for outputs and the manifest")
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    parser.add_argument("--config", default=None, help="JSON config file (lowest precedence)")
    if needs_backend:
        parser.add_argument("--backend", choices=("mock", "http"), default=None)
        parser.add_argument("--base-url", dest="base_url", default=None)
        parser.add_argument("--model-name", dest="model_name", default=None)
        parser.add_argument("--cache", default=None, help="response cache file (JSONL)")
        parser.add_argument(
            "--parallel", type=int, default=None, help="max in-flight backend requests"
        )
        parser.add_argument(
            "--mock-tables", dest="mock_tables", default=None,
            help="JSON file wiring the mock backend's score/completion tables",
        )
        parser.add_argument("--template", default=None, help="prompt template JSON file")
        parser.add_argument("--preamble", default=None)
        parser.add_argument("--example-format", dest="example_format", default=None)
        parser.add_argument("--example-separator", dest="example_separator", default=None)
        parser.add_argument("--suffix", default=None)


def _add_executor_flags(parser: argparse.ArgumentParser, *, required: bool):
    parser.add_argument(
        "--executor",
        choices=("mock", "subprocess"),
        default="mock" if required else None,
        help="code executor: mock verdict table or subprocess sandbox runner",
    )
    parser.add_argument(
        "--executor-cmd", dest="executor_cmd", default=None,
        help="command line for the subprocess executor",
    )
    parser.add_argument(
        "--mock-verdicts", dest="mock_verdicts", default=None,
        help="JSON file mapping solution code to a canned executor response",
    )
    parser.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=512)
    parser.add_argument("--timeout-ms", dest="timeout_ms", type=int, default=5000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshot",
        description="Rank and select few-shot examples for code-generation prompts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a task file and write a normalized copy")
    p.add_argument("--tasks", required=True)
    _add_common(p, needs_backend=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="split tasks (by prompt) or pools (by example)")
    p.add_argument("--tasks", required=True)
    p.add_argument("--mode", choices=(BY_PROMPT, BY_EXAMPLE), default=BY_PROMPT)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    _add_common(p, needs_backend=False)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("score-source", help="score every pool example's source perplexity")
    p.add_argument("--tasks", required=True)
    p.add_argument("--keep-going", dest="keep_going", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_score_source)

    p = sub.add_parser(
        "score-target", help="score single-example target perplexities plus the baseline"
    )
    p.add_argument("--tasks", required=True)
    p.add_argument("--pair-source", dest="pair_source", action="store_true",
                   help="also score source perplexity and export paired rows")
    p.add_argument("--keep-going", dest="keep_going", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_score_target)

    p = sub.add_parser("embed", help="export per-example embeddings with delta labels")
    p.add_argument("--tasks", required=True)
    p.add_argument("--keep-going", dest="keep_going", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("collect", help="collect (embedding -> log perplexity) training pairs")
    p.add_argument("--tasks", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the ranking regressor on collected pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--val-pairs", dest="val_pairs", default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    _add_common(p, needs_backend=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="rank every task's pool with one ranker")
    p.add_argument("--tasks", required=True)
    p.add_argument(
        "--ranker", choices=harness.STANDARD_RANKERS, required=True
    )
    p.add_argument("--model-file", dest="model_file", default=None)
    p.add_argument(
        "--descending", action="store_true",
        help="sort the model_based ranker by descending predicted perplexity",
    )
    _add_common(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("select", help="take top-n or budget-fitted examples per ranking")
    p.add_argument("--tasks", required=True)
    p.add_argument("--rankings", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--budget-tokens", dest="budget_tokens", type=int, default=None)
    p.add_argument("--count-scope", dest="count_scope", default=EXAMPLES_ONLY)
    _add_common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="pass@1 evaluation of top-n selections")
    p.add_argument("--tasks", required=True)
    p.add_argument("--rankings", required=True)
    p.add_argument("--n", type=int, required=True)
    _add_executor_flags(p, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("study", help="run one of the built-in studies")
    p.add_argument("study", choices=("multi", "single", "compare", "shift"))
    p.add_argument("--tasks", required=True)
    p.add_argument("--max-n", dest="max_n", type=int, default=3)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--rankers", default="model_free,random,human_order")
    p.add_argument("--n-values", dest="n_values", default="0,1,2")
    p.add_argument("--model-file", dest="model_file", default=None)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1000)
    _add_executor_flags(p, required=False)
    _add_common(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", help="re-export a report JSON as CSV")
    p.add_argument("--report", required=True)
    _add_common(p, needs_backend=False)
    p.set_defaults(func=cmd_report)

    return parser


def all_option_strings() -> set[str]:
    """Every flag the CLI accepts, across all subcommands (for doc checks)."""
    parser = build_parser()
    options: set[str] = set()

    def walk(p: argparse.ArgumentParser):
        for action in p._actions:
            options.update(action.option_strings)
            if isinstance(action, argparse._SubParsersAction):
                for child in action.choices.values():
                    walk(child)

    walk(parser)
    return options


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FewshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
