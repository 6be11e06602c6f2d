"""One-shot sandboxed runner: a JSON job in on stdin, a JSON result out.

The shim supervises a worker subprocess in its own session: the worker
executes the program, then runs the test script statement by statement in
the program's namespace, stopping at the first failure. The worker's
stdout and stderr are redirected at the file-descriptor level before any
job code runs, so whatever the program prints lands in the captured
``stdout``/``stderr`` result fields and the shim's own stdout carries
exactly one JSON document. On timeout the whole worker process group is
killed and the partial output captured so far is returned.

Request: ``{"program": str, "tests": str, "timeout_s": number,
"env_manifest_id": str}``. Response: ``{"status": str, "stdout": str,
"stderr": str, "traceback": str, "per_test": [[id, verdict]...],
"wall_time_s": number}`` with status one of pass, test_failure,
runtime_error, syntax_error, timeout. Internal shim faults exit nonzero
with a diagnostic on stderr instead of producing a result.

The shim always runs jobs in its own interpreter environment; the host is
responsible for launching it inside whichever pinned-library environment
the job's ``env_manifest_id`` names.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import tempfile
import time
from pathlib import Path

OUTPUT_CAP_BYTES = 1 << 20  # per captured stream; the host applies its own caps

_REQUIRED_FIELDS = {
    "program": str,
    "tests": str,
    "timeout_s": (int, float),
    "env_manifest_id": str,
}


class ShimError(Exception):
    """Internal shim fault; the host maps this to an environment error."""


def _validate(job: dict) -> None:
    for name, kind in _REQUIRED_FIELDS.items():
        if name not in job:
            raise ShimError(f"job is missing required field {name!r}")
        if not isinstance(job[name], kind):
            raise ShimError(f"job field {name!r} has the wrong type")
    if not job["program"].strip() or not job["tests"].strip():
        raise ShimError("program and tests must be non-empty")
    if job["timeout_s"] <= 0:
        raise ShimError("timeout_s must be positive")


def _read_capped(path: Path) -> str:
    try:
        raw = path.read_bytes()
    except OSError:
        return ""
    if len(raw) > OUTPUT_CAP_BYTES:
        raw = raw[:OUTPUT_CAP_BYTES]
    return raw.decode("utf-8", errors="replace")


def run_job(job: dict) -> dict:
    """Execute one job in a supervised worker; returns the result document."""
    _validate(job)
    timeout_s = float(job["timeout_s"])
    with tempfile.TemporaryDirectory(prefix="runner-shim-") as tmp:
        tmp_path = Path(tmp)
        envelope = {
            "program": job["program"],
            "tests": job["tests"],
            "stdout_path": str(tmp_path / "stdout.txt"),
            "stderr_path": str(tmp_path / "stderr.txt"),
            "result_path": str(tmp_path / "result.json"),
        }
        started = time.monotonic()
        try:
            worker = subprocess.Popen(
                [sys.executable, "-m", "runner_shim", "--worker"],
                stdin=subprocess.PIPE,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.PIPE,
                text=True,
                start_new_session=True,
            )
        except OSError as exc:
            raise ShimError(f"cannot spawn worker: {exc}") from exc

        timed_out = False
        worker_err = ""
        try:
            _, worker_err = worker.communicate(json.dumps(envelope), timeout=timeout_s)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(worker.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                worker.kill()
            worker.wait()
        wall = time.monotonic() - started

        stdout_text = _read_capped(tmp_path / "stdout.txt")
        stderr_text = _read_capped(tmp_path / "stderr.txt")

        if timed_out:
            return {
                "status": "timeout",
                "stdout": stdout_text,
                "stderr": stderr_text,
                "traceback": f"wall clock exceeded the {timeout_s:g}s limit",
                "per_test": [],
                "wall_time_s": wall,
            }

        result_path = tmp_path / "result.json"
        if not result_path.exists():
            raise ShimError(
                f"worker exited with {worker.returncode} and no result: "
                f"{worker_err.strip()[:500]}"
            )
        try:
            result = json.loads(result_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ShimError(f"worker result unreadable: {exc}") from exc
        result["stdout"] = stdout_text
        result["stderr"] = stderr_text
        result.setdefault("wall_time_s", wall)
        return result


def main(argv: list[str] | None = None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    if "--worker" in argv:
        from runner_shim.worker import worker_main

        return worker_main()
    try:
        job = json.loads(sys.stdin.read())
    except json.JSONDecodeError as exc:
        print(f"runner-shim: invalid job document: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_job(job)
    except ShimError as exc:
        print(f"runner-shim: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(json.dumps(result))
    sys.stdout.write("\n")
    return 0
