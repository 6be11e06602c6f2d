import json
import sys

import pytest

from codeloop.executor import (
    EnvironmentFailure,
    ExecLimits,
    ExecStatus,
    ExecutionResult,
    Feedback,
    FeedbackSource,
    MockExecutor,
    ShimExecutor,
    build_program,
    check_syntax,
    make_feedback,
    passing_result,
)
from codeloop.prompts import CandidateCode
from tests.conftest import make_problem


def cand(src: str) -> CandidateCode:
    return CandidateCode(source=src, attempt_index=1)


class TestCheckSyntax:
    def test_valid_expression(self):
        assert check_syntax(cand("result = x[0]")).ok

    def test_syntax_error_with_line(self):
        report = check_syntax(cand("def f(:"))
        assert not report.ok
        assert report.line == 1
        assert report.message

    def test_undefined_name_is_fine(self):
        # name resolution is runtime, not syntax
        assert check_syntax(cand("result = undefined_thing + 1")).ok

    def test_never_executes(self, tmp_path):
        sentinel = tmp_path / "executed.flag"
        code = f"open({str(sentinel)!r}, 'w').write('ran')"
        assert check_syntax(cand(code)).ok
        assert not sentinel.exists()


class TestBuildProgram:
    def test_marker_line_replaced(self):
        problem = make_problem()
        built = build_program(problem, cand("x=1"))
        assert built == "import numpy as np\na = np.arange(3)\nx=1\nprint('done')"

    def test_multiline_candidate_kept_verbatim(self):
        problem = make_problem()
        source = "tmp = a * 2\nresult = tmp"
        built = build_program(problem, cand(source))
        assert source in built

    def test_surroundings_byte_identical(self):
        problem = make_problem()
        built = build_program(problem, cand("x=1"))
        head, _, tail = problem.code_context.partition("[insert]")
        assert built.startswith(head.rsplit("\n", 1)[0])
        assert built.endswith(tail.split("\n", 1)[1])

    def test_missing_marker_rejected(self):
        from codeloop.problems import Problem

        problem = Problem("x", "NumPy", "d", "print(1)", "assert True")
        with pytest.raises(ValueError):
            build_program(problem, cand("x=1"))

    def test_double_marker_rejected(self):
        from codeloop.problems import Problem

        problem = Problem("x", "NumPy", "d", "[insert]\n[insert]", "assert True")
        with pytest.raises(ValueError):
            build_program(problem, cand("x=1"))


class TestFeedback:
    def test_body_must_be_non_empty(self):
        with pytest.raises(ValueError):
            Feedback(source=FeedbackSource.CODE_EXECUTOR, body="")

    def test_make_feedback_names_failing_test(self):
        result = ExecutionResult(
            status=ExecStatus.TEST_FAILURE,
            traceback="AssertionError: 3 != 4",
            per_test=(("assert-1", "pass"), ("assert-2", "fail")),
        )
        fb = make_feedback(result)
        assert fb.source is FeedbackSource.CODE_EXECUTOR
        assert "assert-2" in fb.body
        assert "AssertionError" in fb.body

    def test_timeout_feedback_mentions_timeout(self):
        fb = make_feedback(ExecutionResult(status=ExecStatus.TIMEOUT, wall_time=2.0))
        assert "timed out" in fb.body


class TestMockExecutor:
    def test_scripted_pass(self, toy_problem):
        executor = MockExecutor(script={"result = a * 2": passing_result()})
        got = executor.execute(toy_problem, cand("result = a * 2"))
        assert got.status is ExecStatus.PASS

    def test_default_failure_for_unmatched(self, toy_problem):
        executor = MockExecutor()
        got = executor.execute(toy_problem, cand("whatever"))
        assert got.status is ExecStatus.TEST_FAILURE

    def test_replay_identical(self, toy_problem):
        executor = MockExecutor(script={"a": passing_result()})
        first = executor.execute(toy_problem, cand("a"))
        second = executor.execute(toy_problem, cand("a"))
        assert first == second

    def test_from_config_wire_format(self, toy_problem):
        executor = MockExecutor.from_config(
            {
                "entries": [
                    {"match": "good", "result": {"status": "pass", "per_test": [["t1", "pass"]]}}
                ],
                "default_result": {"status": "runtime_error", "traceback": "NameError: x"},
                "substring_match": True,
            }
        )
        assert executor.execute(toy_problem, cand("good code")).status is ExecStatus.PASS
        bad = executor.execute(toy_problem, cand("bad"))
        assert bad.status is ExecStatus.RUNTIME_ERROR


FAKE_SHIM = """
import sys, json
job = json.loads(sys.stdin.read())
print(json.dumps({
    "status": "pass",
    "stdout": "candidate-print",
    "stderr": "",
    "traceback": "",
    "per_test": [["assert-1", "pass"]],
    "wall_time_s": 0.01,
}))
"""


class TestShimExecutorProtocol:
    def test_job_response_roundtrip(self, toy_problem):
        executor = ShimExecutor(shim_cmd=[sys.executable, "-c", FAKE_SHIM])
        result = executor.execute(toy_problem, cand("result = a * 2"))
        assert result.status is ExecStatus.PASS
        assert result.stdout == "candidate-print"
        assert result.per_test == (("assert-1", "pass"),)

    def test_job_carries_program_and_tests(self, toy_problem, tmp_path):
        capture = tmp_path / "job.json"
        shim = (
            "import sys, json, pathlib\n"
            "job = sys.stdin.read()\n"
            f"pathlib.Path({str(capture)!r}).write_text(job)\n"
            'print(json.dumps({"status": "pass", "stdout": "", "stderr": "",'
            ' "traceback": "", "per_test": [], "wall_time_s": 0.0}))\n'
        )
        executor = ShimExecutor(
            shim_cmd=[sys.executable, "-c", shim],
            env_manifest_id="numpy-pinned",
            limits=ExecLimits(timeout_s=7.0),
        )
        executor.execute(toy_problem, cand("result = a * 2"))
        job = json.loads(capture.read_text())
        assert sorted(job) == ["env_manifest_id", "program", "tests", "timeout_s"]
        assert "result = a * 2" in job["program"]
        assert job["tests"] == toy_problem.test_suite
        assert job["timeout_s"] == 7.0
        assert job["env_manifest_id"] == "numpy-pinned"

    def test_candidate_source_marker_substituted(self, tmp_path):
        from codeloop.problems import CANDIDATE_SOURCE_MARKER, Problem

        capture = tmp_path / "job.json"
        shim = (
            "import sys, json, pathlib\n"
            f"pathlib.Path({str(capture)!r}).write_text(sys.stdin.read())\n"
            'print(json.dumps({"status": "pass", "stdout": "", "stderr": "",'
            ' "traceback": "", "per_test": [], "wall_time_s": 0.0}))\n'
        )
        problem = Problem(
            "x", "NumPy", "d", "[insert]", f"check({CANDIDATE_SOURCE_MARKER})"
        )
        ShimExecutor(shim_cmd=[sys.executable, "-c", shim]).execute(
            problem, cand("result = 1")
        )
        job = json.loads(capture.read_text())
        assert job["tests"] == "check('result = 1')"

    def test_nonzero_exit_is_environment_failure(self, toy_problem):
        executor = ShimExecutor(shim_cmd=[sys.executable, "-c", "import sys; sys.exit(3)"])
        with pytest.raises(EnvironmentFailure):
            executor.execute(toy_problem, cand("x=1"))

    def test_garbage_output_is_environment_failure(self, toy_problem):
        executor = ShimExecutor(shim_cmd=[sys.executable, "-c", "print('not json')"])
        with pytest.raises(EnvironmentFailure):
            executor.execute(toy_problem, cand("x=1"))

    def test_missing_shim_binary_is_environment_failure(self, toy_problem):
        executor = ShimExecutor(shim_cmd=["/nonexistent/shim-binary"])
        with pytest.raises(EnvironmentFailure):
            executor.execute(toy_problem, cand("x=1"))

    def test_syntax_error_defended_without_shim_call(self, toy_problem):
        executor = ShimExecutor(shim_cmd=["/nonexistent/shim-binary"])
        result = executor.execute(toy_problem, cand("def f(:"))
        assert result.status is ExecStatus.SYNTAX_ERROR

    def test_env_error_status_raises(self, toy_problem):
        shim = (
            'import json; print(json.dumps({"status": "env_error", "stdout": "",'
            ' "stderr": "", "traceback": "no module", "per_test": [], "wall_time_s": 0}))'
        )
        executor = ShimExecutor(shim_cmd=[sys.executable, "-c", shim])
        with pytest.raises(EnvironmentFailure):
            executor.execute(toy_problem, cand("x=1"))


def test_output_caps_keep_head_and_tail(toy_problem):
    big = "H" * 20000 + "M" * 20000 + "T" * 20000
    shim_reply = json.dumps(
        {
            "status": "pass",
            "stdout": big,
            "stderr": "",
            "traceback": "",
            "per_test": [],
            "wall_time_s": 0.0,
        }
    )
    executor = ShimExecutor(
        shim_cmd=[sys.executable, "-c", f"import sys; sys.stdin.read(); print({shim_reply!r})"]
    )
    result = executor.execute(toy_problem, cand("x=1"))
    assert len(result.stdout.encode()) < 40000
    assert result.stdout.startswith("H")
    assert result.stdout.endswith("T")
    assert "truncated" in result.stdout
