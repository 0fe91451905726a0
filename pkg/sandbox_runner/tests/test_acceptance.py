"""Acceptance suite for the sandbox runner (run with ``pytest -v -s``).

Ten hand-authored mini-tasks: the reference solutions must pass every
held-out test (pass rate 1.0), deliberately broken variants must fail
(pass rate 0.0), and an infinite loop must come back as a timeout within
twice the configured per-test timeout.
"""

import json
import subprocess
import sys
import time


def report(name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] {name}{suffix}")
    assert ok, f"{name}{suffix}"


def run_request(solution, entry_point, tests, timeout_ms=2000):
    request = {
        "solution_code": solution,
        "entry_point": entry_point,
        "tests": [{"input_expr": i, "expected_expr": e} for i, e in tests],
        "timeout_ms": timeout_ms,
    }
    proc = subprocess.run(
        [sys.executable, "-m", "sandbox_runner"],
        input=json.dumps(request),
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    return json.loads(proc.stdout)


MINI_TASKS = [
    {
        "entry_point": "inc",
        "solution": "def inc(x):\n    return x + 1",
        "broken": "def inc(x):\n    return x - 1",
        "tests": [("inc(1)", "2"), ("inc(-5)", "-4"), ("inc(0)", "1")],
    },
    {
        "entry_point": "add",
        "solution": "def add(a, b):\n    return a + b",
        "broken": "def add(a, b):\n    return a * b",
        "tests": [("add(2, 3)", "5"), ("add(-1, 1)", "0")],
    },
    {
        "entry_point": "reverse_text",
        "solution": "def reverse_text(s):\n    return s[::-1]",
        "broken": "def reverse_text(s):\n    return s",
        "tests": [("reverse_text('abc')", "'cba'"), ("reverse_text('ab')", "'ba'")],
    },
    {
        "entry_point": "factorial",
        "solution": (
            "def factorial(n):\n"
            "    return 1 if n <= 1 else n * factorial(n - 1)"
        ),
        "broken": (
            "def factorial(n):\n"
            "    return 1 if n <= 1 else n + factorial(n - 1)"
        ),
        "tests": [("factorial(5)", "120"), ("factorial(0)", "1")],
    },
    {
        "entry_point": "is_even",
        "solution": "def is_even(n):\n    return n % 2 == 0",
        "broken": "def is_even(n):\n    return n % 2 == 1",
        "tests": [("is_even(4)", "True"), ("is_even(7)", "False")],
    },
    {
        "entry_point": "mean",
        "solution": "def mean(xs):\n    return sum(xs) / len(xs)",
        "broken": "def mean(xs):\n    return sum(xs) / (len(xs) + 1)",
        "tests": [("mean([1, 2, 3])", "2.0"), ("mean([1.0, 2.0])", "1.5")],
    },
    {
        "entry_point": "dedupe_sorted",
        "solution": "def dedupe_sorted(xs):\n    return sorted(set(xs))",
        "broken": "def dedupe_sorted(xs):\n    return sorted(xs)",
        "tests": [
            ("dedupe_sorted([3, 1, 3, 2])", "[1, 2, 3]"),
            ("dedupe_sorted([5, 5])", "[5]"),
        ],
    },
    {
        "entry_point": "largest",
        "solution": "def largest(xs):\n    return max(xs)",
        "broken": "def largest(xs):\n    return min(xs)",
        "tests": [("largest([4, 9, 2])", "9"), ("largest([-3, -1])", "-1")],
    },
    {
        "entry_point": "count_vowels",
        "solution": (
            "def count_vowels(s):\n"
            "    return sum(1 for ch in s if ch in 'aeiou')"
        ),
        "broken": (
            "def count_vowels(s):\n"
            "    return sum(1 for ch in s if ch in 'aeiu')"
        ),
        "tests": [("count_vowels('biohazard')", "4"), ("count_vowels('xyz')", "0")],
    },
    {
        "entry_point": "index_map",
        "solution": (
            "def index_map(items):\n"
            "    return {item: i for i, item in enumerate(items)}"
        ),
        "broken": (
            "def index_map(items):\n"
            "    return {item: i + 1 for i, item in enumerate(items)}"
        ),
        "tests": [
            ("index_map(['a', 'b'])", "{'a': 0, 'b': 1}"),
            ("index_map([])", "{}"),
        ],
    },
]


class TestSandboxCorrectness:
    def test_ground_truth_solutions_all_pass(self):
        verdicts = [
            run_request(task["solution"], task["entry_point"], task["tests"])["passed"]
            for task in MINI_TASKS
        ]
        pass_rate = sum(verdicts) / len(verdicts)
        report(
            "sandbox ground-truth pass rate",
            pass_rate == 1.0,
            f"{sum(verdicts)}/{len(verdicts)} mini-tasks",
        )

    def test_broken_variants_all_fail(self):
        verdicts = [
            run_request(task["broken"], task["entry_point"], task["tests"])["passed"]
            for task in MINI_TASKS
        ]
        pass_rate = sum(verdicts) / len(verdicts)
        report(
            "sandbox broken-variant pass rate",
            pass_rate == 0.0,
            f"{sum(verdicts)}/{len(verdicts)} broken variants passed",
        )

    def test_infinite_loop_times_out_within_twice_the_timeout(self):
        solution = "def spin(x):\n    while True:\n        x += 1"
        timeout_ms = 1000
        started = time.perf_counter()
        response = run_request(solution, "spin", [("spin(0)", "0")], timeout_ms=timeout_ms)
        elapsed = time.perf_counter() - started
        ok = (
            response["passed"] is False
            and response["per_test"][0]["detail"] == "timeout"
            and elapsed < 2 * timeout_ms / 1000.0
        )
        report(
            "sandbox timeout bound",
            ok,
            f"timeout verdict in {elapsed:.2f} s (limit {2 * timeout_ms / 1000.0:.1f} s)",
        )
