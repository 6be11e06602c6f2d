from __future__ import annotations

import pytest

from codeloop.config import resolve_config
from codeloop.engine import Engine
from codeloop.executor import ExecStatus, ExecutionResult, MockExecutor, passing_result
from codeloop.llm import BackendRegistry, MockBackend, TranscriptEntry
from codeloop.problems import Problem


def make_problem(pid: str = "NumPy-1", library: str = "NumPy") -> Problem:
    return Problem(
        id=pid,
        library=library,
        description=f"Compute the doubled array for {pid}.",
        code_context="import numpy as np\na = np.arange(3)\n[insert]\nprint('done')",
        test_suite="assert (result == a * 2).all()",
    )


def failing_result(message: str = "NameError: name 'result' is not defined") -> ExecutionResult:
    return ExecutionResult(
        status=ExecStatus.RUNTIME_ERROR,
        traceback=f"Traceback (most recent call last):\n  ...\n{message}",
        per_test=(("assert-1", "error"),),
    )


def scripted_engine(
    replies: list[str],
    executor: MockExecutor,
    *,
    config_overrides: dict | None = None,
    with_cot: bool = True,
) -> Engine:
    """Engine whose mock backend replays ``replies`` for every problem.

    When guidance generation is enabled each attempt consumes two replies
    (guidance, code); the caller supplies the flat ordered list.
    """
    config = resolve_config(
        file={
            "executor": "mock",
            "retrieval_k": 0,
            "auto_cot_1": with_cot,
            "auto_cot_2": with_cot,
            **(config_overrides or {}),
        },
        env={},
    )
    registry = BackendRegistry()
    registry.register_factory(
        "mock",
        lambda run_key: MockBackend([TranscriptEntry(reply=r) for r in replies]),
    )
    return Engine(config, registry, executor)


@pytest.fixture
def toy_problem() -> Problem:
    return make_problem()


ACCEPTANCE_MODULE = "test_acceptance"


def pytest_runtest_logreport(report):
    """Print one pass/fail line per acceptance criterion."""
    if report.when != "call":
        return
    module = report.nodeid.split("::", 1)[0]
    if ACCEPTANCE_MODULE not in module:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\n[acceptance] {name}: {outcome}", flush=True)
