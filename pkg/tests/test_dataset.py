import json
import random

import pytest

from fewshot.dataset import (
    BY_EXAMPLE,
    BY_PROMPT,
    CodingTask,
    IOExample,
    SplitSpec,
    load_tasks,
    split_examples,
    split_tasks,
    write_tasks,
)
from fewshot.errors import DomainError, TaskParseError, TaskValidationError

from helpers import make_task, make_tasks


def valid_record(task_id="demo/0", n_pool=1, n_eval=1):
    return {
        "task_id": task_id,
        "nl_description": "return the input incremented",
        "entry_point": "inc",
        "ground_truth": "def inc(x):\n    return x + 1",
        "pool": [{"input_expr": f"inc({i})", "expected_expr": str(i + 1)} for i in range(n_pool)],
        "eval_tests": [
            {"input_expr": f"inc({100 + i})", "expected_expr": str(101 + i)} for i in range(n_eval)
        ],
    }


def write_records(tmp_path, records, name="tasks.jsonl"):
    path = tmp_path / name
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


class TestLoadTasks:
    def test_empty_file(self, tmp_path):
        path = write_records(tmp_path, [])
        assert load_tasks(path) == []

    def test_single_valid_record(self, tmp_path):
        path = write_records(tmp_path, [valid_record()])
        tasks = load_tasks(path)
        assert len(tasks) == 1
        assert len(tasks[0].pool) == 1
        assert len(tasks[0].eval_tests) == 1
        assert tasks[0].pool[0].id == 0

    def test_order_preserved(self, tmp_path):
        records = [valid_record(f"demo/{i}") for i in range(5)]
        path = write_records(tmp_path, records)
        assert [t.task_id for t in load_tasks(path)] == [r["task_id"] for r in records]

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tasks(tmp_path / "nope.jsonl")

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "tasks.jsonl"
        path.write_text(json.dumps(valid_record()) + "\n{broken\n", encoding="utf-8")
        with pytest.raises(TaskParseError, match="line 2"):
            load_tasks(path)

    def test_missing_field_names_line_and_field(self, tmp_path):
        record = valid_record()
        del record["entry_point"]
        path = write_records(tmp_path, [valid_record("ok/0"), record])
        with pytest.raises(TaskParseError, match="line 2.*entry_point"):
            load_tasks(path)

    def test_empty_example_text_is_parse_error(self, tmp_path):
        record = valid_record()
        record["pool"][0]["input_expr"] = ""
        path = write_records(tmp_path, [record])
        with pytest.raises(TaskParseError, match="input_expr"):
            load_tasks(path)

    def test_pool_eval_overlap_names_task(self, tmp_path):
        record = valid_record("demo/7")
        record["eval_tests"].append(dict(record["pool"][0]))
        path = write_records(tmp_path, [record])
        with pytest.raises(TaskValidationError, match="demo/7"):
            load_tasks(path)

    def test_round_trip(self, tmp_path):
        tasks = make_tasks(7, n_pool=4)
        path = tmp_path / "round.jsonl"
        write_tasks(tasks, path)
        assert load_tasks(path) == tasks


class TestTaskValidation:
    def test_empty_pool_rejected(self):
        with pytest.raises(TaskValidationError, match="pool"):
            CodingTask(
                task_id="x",
                nl_description="d",
                entry_point="f",
                ground_truth="def f(): pass",
                pool=(),
                eval_tests=(IOExample("f(1)", "2", id=0),),
            )

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(TaskValidationError, match="ground_truth"):
            CodingTask(
                task_id="x",
                nl_description="d",
                entry_point="f",
                ground_truth="",
                pool=(IOExample("f(1)", "2", id=0),),
                eval_tests=(IOExample("f(2)", "3", id=0),),
            )

    def test_non_positional_ids_rejected(self):
        with pytest.raises(TaskValidationError, match="positional"):
            CodingTask(
                task_id="x",
                nl_description="d",
                entry_point="f",
                ground_truth="def f(): pass",
                pool=(IOExample("f(1)", "2", id=5),),
                eval_tests=(IOExample("f(2)", "3", id=0),),
            )


class TestSplitSpec:
    def test_bad_ratio_sum(self):
        with pytest.raises(DomainError, match="sum to 1"):
            SplitSpec(mode=BY_PROMPT, ratios=(0.5, 0.2, 0.2))

    def test_negative_ratio(self):
        with pytest.raises(DomainError, match="non-negative"):
            SplitSpec(mode=BY_PROMPT, ratios=(1.2, -0.1, -0.1))

    def test_unknown_mode(self):
        with pytest.raises(DomainError, match="mode"):
            SplitSpec(mode="by_vibes")


class TestSplitTasks:
    def test_exact_division(self):
        tasks = make_tasks(10)
        spec = SplitSpec(mode=BY_PROMPT, ratios=(0.6, 0.2, 0.2), seed=0)
        train, val, test = split_tasks(tasks, spec)
        assert (len(train), len(val), len(test)) == (6, 2, 2)

    def test_remainder_goes_to_train(self):
        tasks = make_tasks(5)
        spec = SplitSpec(mode=BY_PROMPT, ratios=(0.6, 0.2, 0.2), seed=3)
        train, val, test = split_tasks(tasks, spec)
        assert (len(train), len(val), len(test)) == (3, 1, 1)

    def test_single_task_all_train(self):
        tasks = make_tasks(1)
        spec = SplitSpec(mode=BY_PROMPT, ratios=(0.6, 0.2, 0.2), seed=0)
        train, val, test = split_tasks(tasks, spec)
        assert (len(train), len(val), len(test)) == (1, 0, 0)

    def test_deterministic(self):
        tasks = make_tasks(5)
        spec = SplitSpec(mode=BY_PROMPT, ratios=(0.6, 0.2, 0.2), seed=11)
        assert split_tasks(tasks, spec) == split_tasks(tasks, spec)

    def test_empty_input_rejected(self):
        spec = SplitSpec(mode=BY_PROMPT)
        with pytest.raises(DomainError):
            split_tasks([], spec)

    def test_mode_mismatch_rejected(self):
        with pytest.raises(DomainError, match="mode"):
            split_tasks(make_tasks(3), SplitSpec(mode=BY_EXAMPLE))


class TestSplitExamples:
    def test_exact_division(self):
        task = make_task(n_pool=10)
        spec = SplitSpec(mode=BY_EXAMPLE, ratios=(0.6, 0.2, 0.2), seed=0)
        train, val, test = split_examples(task, spec)
        assert (len(train), len(val), len(test)) == (6, 2, 2)

    def test_tiny_pool_all_train(self):
        task = make_task(n_pool=2)
        spec = SplitSpec(mode=BY_EXAMPLE, ratios=(0.6, 0.2, 0.2), seed=0)
        train, val, test = split_examples(task, spec)
        assert (len(train), len(val), len(test)) == (2, 0, 0)

    def test_deterministic(self):
        task = make_task(n_pool=9)
        spec = SplitSpec(mode=BY_EXAMPLE, ratios=(0.6, 0.2, 0.2), seed=5)
        assert split_examples(task, spec) == split_examples(task, spec)

    def test_mode_mismatch_rejected(self):
        with pytest.raises(DomainError, match="mode"):
            split_examples(make_task(), SplitSpec(mode=BY_PROMPT))


class TestPartitionProperties:
    def test_partition_is_exhaustive_and_disjoint(self):
        rng = random.Random(202)
        for _ in range(30):
            n = rng.randint(1, 100)
            ratios_raw = [rng.random() for _ in range(3)]
            total = sum(ratios_raw)
            ratios = tuple(r / total for r in ratios_raw)
            tasks = make_tasks(n)
            spec = SplitSpec(mode=BY_PROMPT, ratios=ratios, seed=rng.randrange(2**32))
            train, val, test = split_tasks(tasks, spec)
            ids = [t.task_id for part in (train, val, test) for t in part]
            assert sorted(ids) == sorted(t.task_id for t in tasks)
            assert len(set(ids)) == len(ids)

    def test_seed_sensitivity(self):
        tasks = make_tasks(8)
        partitions = set()
        for seed in range(20):
            spec = SplitSpec(mode=BY_PROMPT, ratios=(0.6, 0.2, 0.2), seed=seed)
            train, val, test = split_tasks(tasks, spec)
            partitions.add(tuple(t.task_id for t in train + val + test))
        assert len(partitions) >= 2
