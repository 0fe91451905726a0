"""End-to-end pass-rate evaluation through the real sandbox runner.

These tests exercise the executor protocol against the actual
``sandbox_runner`` child process and are skipped when that package is not
installed; the rest of the suite runs without it.
"""

import importlib.util
import sys

import pytest

from fewshot.backend import MockBackend
from fewshot.dataset import CodingTask, IOExample
from fewshot.harness import SubprocessExecutor, pass_at_1
from fewshot.prompting import DEFAULT_TEMPLATE, render_prompt

RUNNER_AVAILABLE = importlib.util.find_spec("sandbox_runner") is not None
RUNNER_CMD = [sys.executable, "-m", "sandbox_runner"]

GROUND_TRUTH = "def double(x):\n    return 2 * x"
BROKEN = "def double(x):\n    return 2 + x"


def double_task():
    return CodingTask(
        task_id="integration/double",
        nl_description="return the input multiplied by two",
        entry_point="double",
        ground_truth=GROUND_TRUTH,
        pool=(IOExample("double(2)", "4", id=0),),
        eval_tests=(
            IOExample("double(3)", "6", id=0),
            IOExample("double(-4)", "-8", id=1),
            IOExample("double(0)", "0", id=2),
        ),
    )


@pytest.mark.skipif(not RUNNER_AVAILABLE, reason="sandbox_runner is not installed")
class TestRealExecutor:
    def wire(self, completion):
        task = double_task()
        backend = MockBackend()
        prompt = render_prompt(DEFAULT_TEMPLATE, task.nl_description, [])
        backend.completion_table[prompt] = completion
        return task, backend

    def test_ground_truth_solution_passes(self):
        task, backend = self.wire(GROUND_TRUTH)
        verdict = pass_at_1(
            task, [], DEFAULT_TEMPLATE, backend, SubprocessExecutor(RUNNER_CMD)
        )
        assert verdict.passed is True
        assert all(r.passed for r in verdict.per_test)

    def test_broken_solution_fails_with_assertion_detail(self):
        task, backend = self.wire(BROKEN)
        verdict = pass_at_1(
            task, [], DEFAULT_TEMPLATE, backend, SubprocessExecutor(RUNNER_CMD)
        )
        assert verdict.passed is False
        assert {r.detail for r in verdict.per_test if not r.passed} == {"assertion_failed"}

    def test_looping_solution_times_out(self):
        task, backend = self.wire("def double(x):\n    while True:\n        pass")
        verdict = pass_at_1(
            task, [], DEFAULT_TEMPLATE, backend,
            SubprocessExecutor(RUNNER_CMD), timeout_ms=200,
        )
        assert verdict.passed is False
        assert all(r.detail == "timeout" for r in verdict.per_test)
