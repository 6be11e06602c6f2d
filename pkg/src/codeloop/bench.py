"""Benchmark harness: run the solver fleet, aggregate, export reports.

pass@n here is strict accuracy within an attempt budget: the fraction of
problems whose candidate passed every test within n total generation
attempts. Infrastructure-failed problems stay in the denominator as
non-passes (conservative) and are reported separately.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from codeloop.engine import Engine, RunRecord
from codeloop.llm import TokenUsage
from codeloop.problems import LIBRARIES, Problem

logger = logging.getLogger(__name__)

REPORT_COLUMNS = list(LIBRARIES) + ["Overall"]


@dataclass
class BenchReport:
    n_max: int
    per_library: dict[str, dict] = field(default_factory=dict)  # lib -> {count, pass_at_n}
    overall: dict[int, float] = field(default_factory=dict)  # n -> fraction
    cumulative_stop: dict[int, int] = field(default_factory=dict)
    tokens: dict[int, dict[str, int]] = field(default_factory=dict)
    infra_failures: int = 0
    total_problems: int = 0

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "per_library": self.per_library,
            "overall": {str(n): v for n, v in self.overall.items()},
            "cumulative_stop": {str(a): c for a, c in self.cumulative_stop.items()},
            "tokens": {str(n): dict(v) for n, v in self.tokens.items()},
            "infra_failures": self.infra_failures,
            "total_problems": self.total_problems,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchReport":
        return cls(
            n_max=int(raw["n_max"]),
            per_library={
                lib: {
                    "count": int(entry["count"]),
                    "pass_at_n": {int(n): float(v) for n, v in entry["pass_at_n"].items()},
                }
                for lib, entry in raw["per_library"].items()
            },
            overall={int(n): float(v) for n, v in raw["overall"].items()},
            cumulative_stop={int(a): int(c) for a, c in raw["cumulative_stop"].items()},
            tokens={
                int(n): {k: int(v) for k, v in entry.items()}
                for n, entry in raw["tokens"].items()
            },
            infra_failures=int(raw["infra_failures"]),
            total_problems=int(raw["total_problems"]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BenchReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def run_benchmark(
    problems: Sequence[Problem],
    engine: Engine,
    workers: int = 4,
) -> list[RunRecord]:
    """One record per problem. A problem's infrastructure failure never
    aborts the run; records come back sorted by problem id regardless of
    worker scheduling."""
    if not problems:
        raise ValueError("no problems to run")
    if workers <= 1:
        records = [engine.solve(p) for p in problems]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(engine.solve, problems))
    records.sort(key=lambda r: r.problem_id)
    return records


def pass_at_n(records: Sequence[RunRecord], n: int) -> float:
    """Fraction of problems passing all tests within n attempts."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if not records:
        raise ValueError("no records")
    hits = sum(1 for r in records if r.final_status == "pass" and r.stop_attempt <= n)
    return hits / len(records)


def cumulative_stop_counts(records: Sequence[RunRecord]) -> dict[int, int]:
    """Problems stopped (pass or fail) by each attempt; ends at the total."""
    if not records:
        raise ValueError("no records")
    n_maxes = {r.config_snapshot.get("n_max") for r in records}
    if len(n_maxes) != 1:
        raise ValueError(f"records mix attempt budgets: {sorted(n_maxes)}")
    (n_max,) = n_maxes
    counts: dict[int, int] = {}
    for a in range(1, int(n_max) + 1):
        counts[a] = sum(1 for r in records if min(r.stop_attempt, int(n_max)) <= a)
    return counts


def token_report(records_by_budget: Mapping[int, Sequence[RunRecord]]) -> dict[int, dict[str, int]]:
    """Summed prompt/completion tokens per attempt budget."""
    table: dict[int, dict[str, int]] = {}
    for n, records in sorted(records_by_budget.items()):
        total = TokenUsage()
        for r in records:
            for a in r.attempts:
                total = total + a.usage
            if not r.attempts and r.final_status != "infra_fail":
                raise ValueError(f"record {r.problem_id} has no usage ledger entries")
        table[n] = {
            "prompt_tokens": total.prompt_tokens,
            "completion_tokens": total.completion_tokens,
        }
    return table


def weighted_overall(per_library: Mapping[str, float], counts: Mapping[str, int]) -> float:
    """Problem-count-weighted mean of per-library values."""
    total = sum(counts[lib] for lib in per_library)
    if total == 0:
        raise ValueError("no problems behind the per-library values")
    return sum(per_library[lib] * counts[lib] for lib in per_library) / total


def build_report(records: Sequence[RunRecord]) -> BenchReport:
    if not records:
        raise ValueError("cannot build a report from zero records")
    n_max = int(records[0].config_snapshot.get("n_max", 0))
    by_lib: dict[str, list[RunRecord]] = {}
    for r in records:
        lib = r.problem.get("library", "unknown")
        by_lib.setdefault(lib, []).append(r)

    per_library = {
        lib: {
            "count": len(lib_records),
            "pass_at_n": {n: pass_at_n(lib_records, n) for n in range(1, n_max + 1)},
        }
        for lib, lib_records in sorted(by_lib.items())
    }
    counts = {lib: entry["count"] for lib, entry in per_library.items()}
    overall = {
        n: weighted_overall(
            {lib: entry["pass_at_n"][n] for lib, entry in per_library.items()}, counts
        )
        for n in range(1, n_max + 1)
    }
    return BenchReport(
        n_max=n_max,
        per_library=per_library,
        overall=overall,
        cumulative_stop=cumulative_stop_counts(records),
        tokens=token_report({n_max: records}),
        infra_failures=sum(1 for r in records if r.final_status == "infra_fail"),
        total_problems=len(records),
    )


def export_report(report: BenchReport, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json, pass_at_n.csv, cumulative.csv, tokens.csv, report.txt."""
    if report.total_problems == 0:
        raise ValueError("refusing to export an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    paths["json"] = out / "report.json"
    paths["json"].write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    paths["pass_at_n"] = out / "pass_at_n.csv"
    with open(paths["pass_at_n"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n"] + REPORT_COLUMNS)
        for n in range(1, report.n_max + 1):
            row: list[str] = [str(n)]
            for lib in REPORT_COLUMNS[:-1]:
                entry = report.per_library.get(lib)
                row.append(f"{entry['pass_at_n'][n] * 100:.4f}" if entry else "")
            row.append(f"{report.overall[n] * 100:.4f}")
            writer.writerow(row)

    paths["cumulative"] = out / "cumulative.csv"
    with open(paths["cumulative"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attempt", "problems_stopped"])
        for attempt, count in sorted(report.cumulative_stop.items()):
            writer.writerow([attempt, count])

    paths["tokens"] = out / "tokens.csv"
    with open(paths["tokens"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attempt_budget", "prompt_tokens", "completion_tokens"])
        for n, entry in sorted(report.tokens.items()):
            writer.writerow([n, entry["prompt_tokens"], entry["completion_tokens"]])

    paths["text"] = out / "report.txt"
    paths["text"].write_text(_text_table(report), encoding="utf-8")
    return paths


def _text_table(report: BenchReport) -> str:
    """Human-readable pass@n table: libraries as columns, Overall last."""
    present = [lib for lib in REPORT_COLUMNS[:-1] if lib in report.per_library]
    header = ["n"] + present + ["Overall"]
    rows: list[list[str]] = []
    for n in range(report.n_max, 0, -1):
        row = [str(n)]
        for lib in present:
            row.append(f"{report.per_library[lib]['pass_at_n'][n] * 100:.1f}")
        row.append(f"{report.overall[n] * 100:.1f}")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for row in rows:
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
    lines.append("")
    lines.append(
        f"problems: {report.total_problems}  infra_failures: {report.infra_failures}"
    )
    return "\n".join(lines) + "\n"


def write_records(records: Iterable[RunRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json())
            fh.write("\n")
            n += 1
    return n


def read_records(path: str | Path) -> list[RunRecord]:
    from codeloop.engine import record_from_dict

    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out
