"""Candidate validation: syntax checking, program assembly, execution.

The syntax check compiles without running anything. Program assembly splices
the candidate over the problem's ``[insert]`` marker line, leaving every
other byte of the context untouched. Execution goes through a runner-shim
subprocess speaking one JSON job on stdin and one JSON result on stdout, so
the engine itself never imports or runs candidate code; a scripted mock
executor stands in wherever a real toolchain is unwanted.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import subprocess
import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from codeloop.problems import CANDIDATE_SOURCE_MARKER, INSERT_MARKER, Problem
from codeloop.prompts import CandidateCode

logger = logging.getLogger(__name__)

STDOUT_CAP = 32 * 1024
TRACEBACK_CAP = 64 * 1024
DEFAULT_TIMEOUT_S = 120.0


class ExecStatus(str, Enum):
    PASS = "pass"
    TEST_FAILURE = "test_failure"
    RUNTIME_ERROR = "runtime_error"
    SYNTAX_ERROR = "syntax_error"
    TIMEOUT = "timeout"
    ENV_ERROR = "env_error"


class FeedbackSource(str, Enum):
    SYNTAX_CHECKER = "syntax_checker"
    CODE_EXECUTOR = "code_executor"


@dataclass(frozen=True)
class SyntaxReport:
    ok: bool
    message: str = ""
    line: int | None = None
    column: int | None = None


@dataclass(frozen=True)
class ExecutionResult:
    status: ExecStatus
    stdout: str = ""
    stderr: str = ""
    traceback: str = ""
    per_test: tuple[tuple[str, str], ...] = ()
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "traceback": self.traceback,
            "per_test": [list(t) for t in self.per_test],
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExecutionResult":
        return cls(
            status=ExecStatus(raw["status"]),
            stdout=raw.get("stdout", ""),
            stderr=raw.get("stderr", ""),
            traceback=raw.get("traceback", ""),
            per_test=tuple((str(a), str(b)) for a, b in raw.get("per_test", [])),
            wall_time=float(raw.get("wall_time", 0.0)),
        )


@dataclass(frozen=True)
class Feedback:
    source: FeedbackSource
    body: str

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("feedback body must be non-empty")


class EnvironmentFailure(Exception):
    """Infrastructure fault, never attributed to the candidate."""


@dataclass(frozen=True)
class ExecLimits:
    timeout_s: float = DEFAULT_TIMEOUT_S
    memory_mb: int | None = None


def check_syntax(code: CandidateCode) -> SyntaxReport:
    """Compile-only validation; never executes the candidate."""
    try:
        compile(code.source, "<candidate>", "exec")
    except SyntaxError as exc:
        return SyntaxReport(
            ok=False,
            message=f"{exc.msg} (line {exc.lineno})",
            line=exc.lineno,
            column=exc.offset,
        )
    return SyntaxReport(ok=True)


def build_program(problem: Problem, code: CandidateCode) -> str:
    """Replace the marker line with the candidate, byte-identical elsewhere."""
    lines = problem.code_context.split("\n")
    marker_at = [i for i, line in enumerate(lines) if line.strip() == INSERT_MARKER]
    if len(marker_at) != 1:
        raise ValueError(
            f"problem {problem.id}: expected exactly one {INSERT_MARKER} marker line, "
            f"found {len(marker_at)}"
        )
    i = marker_at[0]
    return "\n".join(lines[:i] + [code.source] + lines[i + 1 :])


def _cap_middle(text: str, cap: int) -> str:
    """Keep head and tail when truncating oversized output."""
    raw = text.encode("utf-8")
    if len(raw) <= cap:
        return text
    half = cap // 2
    head = raw[:half].decode("utf-8", errors="ignore")
    tail = raw[-half:].decode("utf-8", errors="ignore")
    return f"{head}\n... [{len(raw) - cap} bytes truncated] ...\n{tail}"


def make_feedback(result: ExecutionResult) -> Feedback:
    """Executor feedback: the traceback, prefixed with the failing test."""
    failing = next((tid for tid, verdict in result.per_test if verdict != "pass"), None)
    parts = []
    if failing:
        parts.append(f"failed test: {failing}")
    if result.traceback:
        parts.append(result.traceback)
    elif result.status is ExecStatus.TIMEOUT:
        parts.append(f"execution timed out after {result.wall_time:.1f}s")
    if result.stderr and not result.traceback:
        parts.append(result.stderr)
    body = "\n".join(parts) or f"execution failed with status {result.status.value}"
    return Feedback(source=FeedbackSource.CODE_EXECUTOR, body=body)


class ShimExecutor:
    """Runs candidates through the runner-shim subprocess protocol.

    One shim process per attempt: the job goes to stdin as a single JSON
    document, the result comes back as a single JSON document on stdout.
    A shim that exits nonzero, emits garbage, or outlives the backstop
    deadline is an environment failure, not a candidate failure.
    """

    def __init__(
        self,
        shim_cmd: list[str] | None = None,
        env_manifest_id: str = "local",
        limits: ExecLimits = ExecLimits(),
    ) -> None:
        self.shim_cmd = shim_cmd or [sys.executable, "-m", "runner_shim"]
        self.env_manifest_id = env_manifest_id
        self.limits = limits

    def execute(
        self, problem: Problem, code: CandidateCode, limits: ExecLimits | None = None
    ) -> ExecutionResult:
        limits = limits or self.limits
        syntax = check_syntax(code)
        if not syntax.ok:  # defence in depth; the loop checks first
            return ExecutionResult(status=ExecStatus.SYNTAX_ERROR, traceback=syntax.message)
        program = build_program(problem, code)
        tests = problem.test_suite.replace(CANDIDATE_SOURCE_MARKER, repr(code.source))
        job = {
            "program": program,
            "tests": tests,
            "timeout_s": limits.timeout_s,
            "env_manifest_id": self.env_manifest_id,
        }
        raw = self._run_shim(job, limits)
        try:
            payload = json.loads(raw)
            result = ExecutionResult(
                status=ExecStatus(payload["status"]),
                stdout=_cap_middle(payload.get("stdout", ""), STDOUT_CAP),
                stderr=_cap_middle(payload.get("stderr", ""), STDOUT_CAP),
                traceback=_cap_middle(payload.get("traceback", ""), TRACEBACK_CAP),
                per_test=tuple(
                    (str(t), str(v)) for t, v in payload.get("per_test", [])
                ),
                wall_time=float(payload.get("wall_time_s", 0.0)),
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise EnvironmentFailure(f"shim returned unparseable result: {exc}") from exc
        if result.status is ExecStatus.ENV_ERROR:
            raise EnvironmentFailure(result.traceback or "shim reported an environment error")
        return result

    def _run_shim(self, job: dict, limits: ExecLimits) -> str:
        backstop = limits.timeout_s * 1.5 + 10.0
        preexec = None
        if limits.memory_mb is not None and os.name == "posix":
            cap = limits.memory_mb * 1024 * 1024

            def preexec() -> None:  # rlimits inherit into the shim's children
                import resource

                resource.setrlimit(resource.RLIMIT_AS, (cap, cap))

        try:
            proc = subprocess.Popen(
                self.shim_cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                start_new_session=True,
                preexec_fn=preexec,
            )
        except OSError as exc:
            raise EnvironmentFailure(f"cannot launch runner shim {self.shim_cmd}: {exc}") from exc
        try:
            out, err = proc.communicate(json.dumps(job), timeout=backstop)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                proc.kill()
            proc.wait()
            raise EnvironmentFailure(
                f"runner shim exceeded the backstop deadline of {backstop:.0f}s"
            ) from None
        if proc.returncode != 0:
            raise EnvironmentFailure(
                f"runner shim exited with {proc.returncode}: {err.strip()[:500]}"
            )
        return out


@dataclass
class MockExecutor:
    """Deterministic scripted executor keyed by candidate source.

    ``script`` maps an exact candidate source (or a substring when
    ``substring_match``) to its result. Unmatched candidates get
    ``default``, letting tests drive chosen stop-attempt distributions
    without any toolchain.
    """

    script: dict[str, ExecutionResult] = field(default_factory=dict)
    default: ExecutionResult = field(
        default_factory=lambda: ExecutionResult(
            status=ExecStatus.TEST_FAILURE,
            traceback="AssertionError: scripted default failure",
            per_test=(("assert-1", "fail"),),
        )
    )
    substring_match: bool = False
    calls: list[str] = field(default_factory=list)

    def execute(
        self, problem: Problem, code: CandidateCode, limits: ExecLimits | None = None
    ) -> ExecutionResult:
        self.calls.append(code.source)
        if self.substring_match:
            for needle in self.script:
                if needle in code.source:
                    return self.script[needle]
            return self.default
        return self.script.get(code.source, self.default)

    @classmethod
    def from_config(cls, raw: dict) -> "MockExecutor":
        """Wire format: {"entries": [{"match": str, "result": {...}}, ...],
        "default_result": {...}, "substring_match": bool}."""
        script = {
            item["match"]: ExecutionResult.from_dict(item["result"])
            for item in raw.get("entries", [])
        }
        kwargs: dict = {
            "script": script,
            "substring_match": bool(raw.get("substring_match", False)),
        }
        if "default_result" in raw:
            kwargs["default"] = ExecutionResult.from_dict(raw["default_result"])
        return cls(**kwargs)


def passing_result(wall_time: float = 0.01, tests: int = 1) -> ExecutionResult:
    """Convenience for scripted executors: an all-pass result."""
    return ExecutionResult(
        status=ExecStatus.PASS,
        per_test=tuple((f"assert-{i + 1}", "pass") for i in range(tests)),
        wall_time=wall_time,
    )
