"""Benchmark problem model and dataset loading.

A problem is a completion task: a prose description, a code context holding
exactly one ``[insert]`` marker line where the candidate goes, and an
executable assertion script that runs in the completed program's namespace.

Two on-disk layouts are read: the native fixture format (a JSON file with a
``problems`` list, or a directory of one-problem JSON files) and an adapter
for the published thousand-problem data-science benchmark's JSONL layout.
Records that cannot be validated are excluded and reported, never fatal.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

INSERT_MARKER = "[insert]"

LIBRARIES = ("SciPy", "PyTorch", "Sklearn", "Matplotlib", "Pandas", "NumPy", "TensorFlow")

# Lowercase aliases accepted in filters and CLI flags.
_LIBRARY_ALIASES = {
    "scipy": "SciPy",
    "pytorch": "PyTorch",
    "torch": "PyTorch",
    "sklearn": "Sklearn",
    "scikit-learn": "Sklearn",
    "matplotlib": "Matplotlib",
    "pandas": "Pandas",
    "numpy": "NumPy",
    "tensorflow": "TensorFlow",
}

# Marker inside a test suite replaced by a Python literal of the candidate
# source at program-build time; bridges evaluator-style harnesses that need
# the solution text rather than the completed namespace.
CANDIDATE_SOURCE_MARKER = "__CANDIDATE_SOURCE__"


class MalformedProblemError(ValueError):
    pass


def canonical_library(name: str) -> str:
    if name in LIBRARIES:
        return name
    try:
        return _LIBRARY_ALIASES[name.lower()]
    except KeyError:
        raise MalformedProblemError(f"unknown library tag {name!r}") from None


def count_insert_markers(code_context: str) -> int:
    return sum(1 for line in code_context.split("\n") if line.strip() == INSERT_MARKER)


@dataclass(frozen=True)
class Problem:
    id: str
    library: str
    description: str
    code_context: str
    test_suite: str
    problem_type: str = "completion"

    def validate(self) -> None:
        if self.problem_type not in ("completion", "insertion"):
            raise MalformedProblemError(f"{self.id}: bad problem_type {self.problem_type!r}")
        canonical_library(self.library)
        n = count_insert_markers(self.code_context)
        if n != 1:
            raise MalformedProblemError(
                f"{self.id}: expected exactly one {INSERT_MARKER} marker line, found {n}"
            )
        if not self.test_suite.strip():
            raise MalformedProblemError(f"{self.id}: empty test suite")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "library": self.library,
            "description": self.description,
            "code_context": self.code_context,
            "test_suite": self.test_suite,
            "problem_type": self.problem_type,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Problem":
        try:
            return cls(
                id=str(raw["id"]),
                library=canonical_library(str(raw["library"])),
                description=str(raw["description"]),
                code_context=str(raw["code_context"]),
                test_suite=str(raw["test_suite"]),
                problem_type=str(raw.get("problem_type", "completion")),
            )
        except KeyError as exc:
            raise MalformedProblemError(f"problem record missing field {exc}") from None


@dataclass
class ValidationReport:
    excluded: list[tuple[str, str]] = field(default_factory=list)  # (source, reason)

    def exclude(self, source: str, reason: str) -> None:
        self.excluded.append((source, reason))
        logger.warning("excluding problem %s: %s", source, reason)


def _adapt_benchmark_record(raw: dict, line_no: int) -> Problem:
    """Map one record of the published benchmark JSONL layout."""
    meta = raw.get("metadata", {})
    library = canonical_library(str(meta.get("library", raw.get("library", ""))))
    pid = meta.get("problem_id", raw.get("problem_id", line_no))
    tests = raw.get("test_suite") or raw.get("code_context", "")
    return Problem(
        id=f"{library}-{pid}",
        library=library,
        description=str(raw.get("prompt", raw.get("description", ""))),
        code_context=str(raw.get("code_context_insert", raw.get("prompt_code", raw.get("code_context", "")))),
        test_suite=str(tests),
        problem_type=str(meta.get("problem_type", "completion")).lower(),
    )


def load_problems(
    path: str | Path,
    libraries: list[str] | None = None,
    problem_type: str = "completion",
    report: ValidationReport | None = None,
) -> list[Problem]:
    """Load, validate, filter, and id-sort problems from ``path``.

    Malformed records are excluded into ``report``; an empty final set is an
    error (a benchmark over nothing is a configuration mistake).
    """
    path = Path(path)
    report = report if report is not None else ValidationReport()
    wanted = {canonical_library(l) for l in libraries} if libraries else None

    candidates: list[tuple[str, dict]] = []
    if path.is_dir():
        for file in sorted(path.glob("*.json")):
            try:
                raw = json.loads(file.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                report.exclude(str(file), f"invalid JSON: {exc}")
                continue
            records = raw["problems"] if isinstance(raw, dict) and "problems" in raw else [raw]
            candidates.extend((f"{file}", r) for r in records)
    elif path.suffix == ".jsonl":
        with open(path, "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    candidates.append((f"{path}:{i}", json.loads(line)))
                except json.JSONDecodeError as exc:
                    report.exclude(f"{path}:{i}", f"invalid JSON: {exc}")
    else:
        raw = json.loads(path.read_text(encoding="utf-8"))
        records = raw["problems"] if isinstance(raw, dict) and "problems" in raw else raw
        if not isinstance(records, list):
            records = [records]
        candidates.extend((f"{path}[{i}]", r) for i, r in enumerate(records))

    problems: list[Problem] = []
    for i, (source, raw) in enumerate(candidates):
        try:
            if "id" in raw and "test_suite" in raw:
                problem = Problem.from_dict(raw)
            else:
                problem = _adapt_benchmark_record(raw, i)
            problem.validate()
        except MalformedProblemError as exc:
            report.exclude(source, str(exc))
            continue
        if wanted is not None and problem.library not in wanted:
            continue
        if problem_type and problem.problem_type != problem_type:
            continue
        problems.append(problem)

    problems.sort(key=lambda p: p.id)
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise MalformedProblemError(f"duplicate problem ids: {dupes}")
    if not problems:
        raise MalformedProblemError(f"no valid problems loaded from {path}")
    return problems
