"""Execute one candidate solution against input/output tests.

Protocol (one request per process invocation):

    stdin   {"solution_code": str, "entry_point": str,
             "tests": [{"input_expr": str, "expected_expr": str}, ...],
             "timeout_ms": int, "float_tolerance": float (optional)}
    stdout  {"passed": bool,
             "per_test": [{"passed": bool, "detail": str}, ...],
             "error": str | null}

A malformed request exits nonzero with a diagnostic on stderr; every valid
request yields exactly one response document and exit status 0, even when the
solution crashes, loops, or fails its tests.

The solution is compiled into a fresh namespace; each test evaluates its call
expression and expected expression there and compares the values structurally
(floats within an absolute tolerance, 1e-6 by default).  Every test runs
under its own wall-clock timeout.  Isolation is best-effort only (fresh
process per request, captured stdout, recursion/output caps, a blocked socket
constructor) and is NOT a security boundary: untrusted model output needs
external containment.
"""

from __future__ import annotations

import io
import json
import signal
import sys

DEFAULT_FLOAT_TOLERANCE = 1e-6
MAX_CAPTURED_OUTPUT = 1 << 20
RECURSION_LIMIT = 10_000

DETAIL_COMPILE_ERROR = "compile_error"
DETAIL_ASSERTION_FAILED = "assertion_failed"
DETAIL_TIMEOUT = "timeout"


class ProtocolError(Exception):
    """The request document does not match the executor protocol."""


class _Timeout(Exception):
    pass


class _OutputLimitExceeded(Exception):
    pass


class _CappedBuffer(io.StringIO):
    """Swallows user prints; refuses to buffer more than MAX_CAPTURED_OUTPUT."""

    def write(self, text):
        if self.tell() + len(text) > MAX_CAPTURED_OUTPUT:
            raise _OutputLimitExceeded("solution produced too much output")
        return super().write(text)


def values_equal(actual, expected, tolerance: float) -> bool:
    """Structural equality, with numbers compared within an absolute tolerance.

    Mirrors assertion (``==``) semantics otherwise: bools count as numbers,
    a list never equals a tuple, containers compare element-wise.
    """
    if isinstance(actual, (int, float)) and isinstance(expected, (int, float)):
        if actual == expected:
            return True
        try:
            return abs(actual - expected) <= tolerance
        except TypeError:
            return False
    if type(actual) is not type(expected):
        return False
    if isinstance(actual, (list, tuple)):
        return len(actual) == len(expected) and all(
            values_equal(a, e, tolerance) for a, e in zip(actual, expected)
        )
    if isinstance(actual, dict):
        return actual.keys() == expected.keys() and all(
            values_equal(value, expected[key], tolerance) for key, value in actual.items()
        )
    return actual == expected


def _alarm(signum, frame):
    raise _Timeout()


def _with_timeout(fn, timeout_s: float):
    signal.setitimer(signal.ITIMER_REAL, timeout_s)
    try:
        return fn()
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)


def _validate(request) -> dict:
    if not isinstance(request, dict):
        raise ProtocolError("request must be a JSON object")
    for key in ("solution_code", "entry_point"):
        if not isinstance(request.get(key), str) or not request[key]:
            raise ProtocolError(f"field {key!r} must be a non-empty string")
    tests = request.get("tests")
    if not isinstance(tests, list) or not tests:
        raise ProtocolError("field 'tests' must be a non-empty array")
    for i, test in enumerate(tests):
        if not isinstance(test, dict):
            raise ProtocolError(f"tests[{i}] must be an object")
        for key in ("input_expr", "expected_expr"):
            if not isinstance(test.get(key), str) or not test[key]:
                raise ProtocolError(f"tests[{i}].{key} must be a non-empty string")
    timeout_ms = request.get("timeout_ms")
    if not isinstance(timeout_ms, int) or isinstance(timeout_ms, bool) or timeout_ms <= 0:
        raise ProtocolError("field 'timeout_ms' must be a positive integer")
    tolerance = request.get("float_tolerance", DEFAULT_FLOAT_TOLERANCE)
    if not isinstance(tolerance, (int, float)) or tolerance < 0:
        raise ProtocolError("field 'float_tolerance' must be a non-negative number")
    return {
        "solution_code": request["solution_code"],
        "entry_point": request["entry_point"],
        "tests": tests,
        "timeout_s": timeout_ms / 1000.0,
        "tolerance": float(tolerance),
    }


def _harden():
    sys.setrecursionlimit(RECURSION_LIMIT)
    try:
        import socket

        def _denied(*args, **kwargs):
            raise PermissionError("network access is denied inside the sandbox runner")

        socket.socket = _denied  # type: ignore[assignment]
        socket.create_connection = _denied  # type: ignore[assignment]
    except ImportError:  # pragma: no cover
        pass


def execute(request: dict) -> dict:
    """Run one validated request and build the response document.

    Must run on the main thread of a POSIX process: per-test timeouts use
    SIGALRM, which interrupts pure-Python infinite loops between bytecodes.
    """
    signal.signal(signal.SIGALRM, _alarm)
    fields = _validate(request)
    tests = fields["tests"]
    timeout_s = fields["timeout_s"]
    tolerance = fields["tolerance"]
    namespace: dict = {"__name__": "__candidate__"}
    error = None

    capture = _CappedBuffer()
    original_stdout = sys.stdout
    sys.stdout = capture  # user prints must not corrupt the protocol stream
    try:
        try:
            _with_timeout(lambda: exec(fields["solution_code"], namespace), timeout_s)
        except _Timeout:
            per_test = [{"passed": False, "detail": DETAIL_TIMEOUT} for _ in tests]
            error = "timeout while compiling the solution"
            return {"passed": False, "per_test": per_test, "error": error}
        except BaseException as exc:  # noqa: BLE001 - any failure is a compile error
            per_test = [{"passed": False, "detail": DETAIL_COMPILE_ERROR} for _ in tests]
            error = f"{DETAIL_COMPILE_ERROR}: {type(exc).__name__}: {exc}"
            return {"passed": False, "per_test": per_test, "error": error}

        per_test = []
        for test in tests:
            def evaluate(test=test):
                actual = eval(test["input_expr"], namespace)  # noqa: S307
                expected = eval(test["expected_expr"], namespace)  # noqa: S307
                return actual, expected

            try:
                actual, expected = _with_timeout(evaluate, timeout_s)
            except _Timeout:
                per_test.append({"passed": False, "detail": DETAIL_TIMEOUT})
                continue
            except BaseException as exc:  # noqa: BLE001 - report by exception name
                per_test.append({"passed": False, "detail": type(exc).__name__})
                continue
            if values_equal(actual, expected, tolerance):
                per_test.append({"passed": True, "detail": ""})
            else:
                per_test.append({"passed": False, "detail": DETAIL_ASSERTION_FAILED})
        return {
            "passed": all(entry["passed"] for entry in per_test),
            "per_test": per_test,
            "error": error,
        }
    finally:
        sys.stdout = original_stdout


def main() -> int:
    signal.signal(signal.SIGALRM, _alarm)
    _harden()
    raw = sys.stdin.read()
    try:
        request = json.loads(raw)
    except json.JSONDecodeError as exc:
        print(f"malformed request: invalid JSON: {exc}", file=sys.stderr)
        return 2
    try:
        response = execute(request)
    except ProtocolError as exc:
        print(f"malformed request: {exc}", file=sys.stderr)
        return 2
    json.dump(response, sys.stdout)
    sys.stdout.write("\n")
    return 0
