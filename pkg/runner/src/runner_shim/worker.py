"""Worker side of the shim: actually runs the program and its tests.

Runs in its own process (and session) under the supervisor. File
descriptors 1 and 2 are rebound to capture files before any job code
executes, so nothing the program does can reach the protocol stream. The
verdict is written to a result file the supervisor reads after the worker
exits; candidate-visible state never touches it.

Tests execute as top-level statements sharing the program's namespace.
Each ``assert`` statement is one test unit (ids ``assert-1``, ``assert-2``,
...); other statements are setup (ids ``stmt-<n>`` if they fail). The
first failing statement ends the run: an AssertionError is a test failure,
anything else a runtime error.
"""

from __future__ import annotations

import ast
import json
import os
import sys
import time
import traceback
from pathlib import Path


def _execute(program: str, tests: str) -> dict:
    started = time.monotonic()

    def done(status: str, tb: str = "", per_test: list | None = None) -> dict:
        return {
            "status": status,
            "traceback": tb,
            "per_test": per_test or [],
            "wall_time_s": time.monotonic() - started,
        }

    try:
        program_code = compile(program, "<program>", "exec")
    except SyntaxError:
        return done("syntax_error", traceback.format_exc())

    namespace: dict = {"__name__": "__main__"}
    try:
        exec(program_code, namespace)
    except BaseException:
        return done("runtime_error", traceback.format_exc())

    try:
        tree = ast.parse(tests, "<tests>", "exec")
    except SyntaxError:
        return done("syntax_error", traceback.format_exc())

    per_test: list[list[str]] = []
    assert_no = 0
    for position, stmt in enumerate(tree.body, start=1):
        is_assert = isinstance(stmt, ast.Assert)
        if is_assert:
            assert_no += 1
        test_id = f"assert-{assert_no}" if is_assert else f"stmt-{position}"
        try:
            exec(compile(ast.Module(body=[stmt], type_ignores=[]), "<tests>", "exec"), namespace)
        except AssertionError:
            per_test.append([test_id, "fail"])
            return done("test_failure", traceback.format_exc(), per_test)
        except BaseException:
            per_test.append([test_id, "error"])
            return done("runtime_error", traceback.format_exc(), per_test)
        if is_assert:
            per_test.append([test_id, "pass"])
    return done("pass", per_test=per_test)


def _deny_network() -> None:
    """Best-effort denial: interpreter-level socket creation fails.

    Not a security boundary (native extensions bypass it); it keeps honest
    jobs honest where the platform offers nothing stronger.
    """
    import socket

    def refused(*args, **kwargs):
        raise OSError("network access is disabled inside the sandbox")

    socket.socket = refused  # type: ignore[misc]
    socket.create_connection = refused  # type: ignore[misc]


def worker_main() -> int:
    envelope = json.loads(sys.stdin.read())
    out_fd = os.open(envelope["stdout_path"], os.O_WRONLY | os.O_CREAT | os.O_TRUNC)
    err_fd = os.open(envelope["stderr_path"], os.O_WRONLY | os.O_CREAT | os.O_TRUNC)
    sys.stdout.flush()
    sys.stderr.flush()
    os.dup2(out_fd, 1)
    os.dup2(err_fd, 2)
    os.close(out_fd)
    os.close(err_fd)

    if envelope.get("deny_network", True):
        _deny_network()
    result = _execute(envelope["program"], envelope["tests"])

    sys.stdout.flush()
    sys.stderr.flush()
    Path(envelope["result_path"]).write_text(json.dumps(result), encoding="utf-8")
    return 0
