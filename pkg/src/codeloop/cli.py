"""Single entry-point CLI: kb build / kb index / kb query, solve, bench, report.

Exit codes: 0 success, 1 user error (bad flags, bad input files),
2 infrastructure error (backend or sandbox failures). ``bench`` exits 0
only when no problem suffered an infrastructure failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from codeloop import __version__

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER = 1
EXIT_INFRA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so dispatch owns exit codes."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="codeloop", description=__doc__)
    parser.add_argument("--version", action="version", version=f"codeloop {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    kb = sub.add_parser("kb", help="knowledge base operations", parents=[], add_help=True)
    kb_sub = kb.add_subparsers(dest="kb_command", metavar="kb-command")

    kb_build = kb_sub.add_parser("build", help="compose budgeted documents from a dump")
    kb_build.add_argument("--posts", required=True, help="posts XML dump file")
    kb_build.add_argument("--comments", required=True, help="comments XML dump file")
    kb_build.add_argument("--out", required=True, help="output NDJSON documents file")
    kb_build.add_argument("--budget", type=int, default=None, help="token budget per document")
    kb_build.add_argument("--min-comments", type=int, default=None, help="minimum comments per document")

    kb_index = kb_sub.add_parser("index", help="embed documents into a vector index")
    kb_index.add_argument("--docs", required=True, help="NDJSON documents file")
    kb_index.add_argument("--out", required=True, help="output index file")
    kb_index.add_argument("--dim", type=int, default=None, help="embedding dimension")
    kb_index.add_argument("--backend", choices=("hnsw", "exact"), default="hnsw")
    kb_index.add_argument("--seed", type=int, default=None, help="index build seed")

    kb_query = kb_sub.add_parser("query", help="top-k similarity search")
    kb_query.add_argument("--index", required=True, help="index file")
    kb_query.add_argument("--text", required=True, help="query text")
    kb_query.add_argument("-k", type=int, default=3, help="number of results")

    solve = sub.add_parser("solve", help="solve one problem with the refine loop")
    solve.add_argument("--problem", required=True, help="problem id (with --dataset) or problem JSON file")
    solve.add_argument("--dataset", default=None, help="dataset path for id lookup")
    solve.add_argument("--config", default=None, help="JSON config file")
    solve.add_argument("--n", type=int, default=None, help="maximum attempts")
    solve.add_argument("--no-cot1", action="store_true", help="disable initial guidance generation")
    solve.add_argument("--no-cot2", action="store_true", help="disable correction guidance generation")
    solve.add_argument("--executor", choices=("real", "mock"), default=None)
    solve.add_argument("--timeout", type=float, default=None, help="per-attempt execution timeout (s)")
    solve.add_argument("--out", default=None, help="write the run record here instead of stdout")

    bench = sub.add_parser("bench", help="run the benchmark harness")
    bench.add_argument("--dataset", required=True, help="problems file or directory")
    bench.add_argument("--libraries", default=None, help="comma-separated library filter")
    bench.add_argument("--n", type=int, default=None, help="maximum attempts")
    bench.add_argument("--workers", type=int, default=None, help="parallel solver count")
    bench.add_argument("--config", default=None, help="JSON config file")
    bench.add_argument("--executor", choices=("real", "mock"), default=None)
    bench.add_argument("--timeout", type=float, default=None, help="per-attempt execution timeout (s)")
    bench.add_argument("--out", required=True, help="report output directory")

    report = sub.add_parser("report", help="rebuild report files from stored run records")
    report.add_argument("--records", required=True, help="run-record NDJSON file")
    report.add_argument("--out", required=True, help="report output directory")
    return parser


def _engine_from_config(cfg, flag_overrides: dict):
    from codeloop.config import resolve_config
    from codeloop.engine import Engine, build_executor
    from codeloop.llm import BackendRegistry

    config = resolve_config(file=cfg, flags=flag_overrides)
    registry = BackendRegistry.from_config(
        config.backend_specs(), transcripts_path=config.transcripts_path
    )
    executor = build_executor(config)
    retriever = None
    if config.index_path and config.docs_path:
        from codeloop.kb.index import DocRetriever, KnowledgeIndex
        from codeloop.kb.ingest import read_documents

        retriever = DocRetriever(
            KnowledgeIndex.load(config.index_path), read_documents(config.docs_path)
        )
    return config, Engine(config, registry, executor, retriever=retriever)


def _cmd_kb_build(args) -> int:
    from codeloop.kb.ingest import (
        DEFAULT_BUDGET,
        DEFAULT_MIN_COMMENTS,
        build_documents,
        parse_dump,
        write_documents,
    )

    reader = parse_dump(args.posts, args.comments)
    docs = build_documents(
        reader.iter_posts(),
        budget=args.budget if args.budget is not None else DEFAULT_BUDGET,
        min_comments=args.min_comments if args.min_comments is not None else DEFAULT_MIN_COMMENTS,
    )
    count = write_documents(docs, args.out)
    diag = reader.diagnostics
    print(f"wrote {count} documents to {args.out} (dropped records: {diag.dropped})")
    return EXIT_OK


def _cmd_kb_index(args) -> int:
    from codeloop.kb.index import KnowledgeIndex
    from codeloop.kb.ingest import read_documents

    index = KnowledgeIndex(
        dim=args.dim if args.dim is not None else 1536,
        backend=args.backend,
        seed=args.seed if args.seed is not None else 0,
    )
    n = 0
    for doc in read_documents(args.docs):
        index.add_text(doc.doc_id, doc.text)
        n += 1
    index.persist(args.out)
    print(f"indexed {n} documents into {args.out}")
    return EXIT_OK


def _cmd_kb_query(args) -> int:
    from codeloop.kb.index import KnowledgeIndex

    index = KnowledgeIndex.load(args.index)
    for doc_id, score in index.query(args.text, args.k):
        print(f"{score:.6f}\t{doc_id}")
    return EXIT_OK


def _solve_flag_overrides(args) -> dict:
    overrides: dict = {}
    if args.n is not None:
        overrides["n_max"] = args.n
    if args.executor is not None:
        overrides["executor"] = args.executor
    if getattr(args, "timeout", None) is not None:
        overrides["timeout_s"] = args.timeout
    if getattr(args, "no_cot1", False):
        overrides["auto_cot_1"] = False
    if getattr(args, "no_cot2", False):
        overrides["auto_cot_2"] = False
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "dataset", None):
        overrides["dataset_path"] = args.dataset
    return overrides


def _cmd_solve(args) -> int:
    from codeloop.problems import Problem, load_problems

    config, engine = _engine_from_config(args.config, _solve_flag_overrides(args))
    problem_path = Path(args.problem)
    if problem_path.exists():
        problem = Problem.from_dict(json.loads(problem_path.read_text(encoding="utf-8")))
        problem.validate()
    else:
        dataset = args.dataset or config.dataset_path
        if not dataset:
            raise UsageError("--problem is not a file and no --dataset was given")
        matches = [p for p in load_problems(dataset) if p.id == args.problem]
        if not matches:
            raise UsageError(f"problem id {args.problem!r} not found in {dataset}")
        problem = matches[0]

    record = engine.solve(problem)
    payload = record.to_json()
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    if record.final_status == "infra_fail":
        return EXIT_INFRA
    return EXIT_OK


def _cmd_bench(args) -> int:
    from codeloop.bench import build_report, export_report, run_benchmark, write_records
    from codeloop.problems import load_problems

    config, engine = _engine_from_config(args.config, _solve_flag_overrides(args))
    libraries = args.libraries.split(",") if args.libraries else None
    problems = load_problems(args.dataset, libraries=libraries)
    records = run_benchmark(problems, engine, workers=config.workers)
    report = build_report(records)
    out = Path(args.out)
    export_report(report, out)
    write_records(records, out / "records.ndjson")
    print(
        f"ran {report.total_problems} problems; "
        f"pass@{report.n_max}={report.overall[report.n_max] * 100:.1f}%; "
        f"infra failures: {report.infra_failures}"
    )
    return EXIT_OK if report.infra_failures == 0 else EXIT_INFRA


def _cmd_report(args) -> int:
    from codeloop.bench import build_report, export_report, read_records

    records = read_records(args.records)
    if not records:
        raise UsageError(f"no records in {args.records}")
    report = build_report(records)
    export_report(report, args.out)
    print(f"report for {report.total_problems} problems written to {args.out}")
    return EXIT_OK


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    try:
        if args.command == "kb":
            if args.kb_command == "build":
                return _cmd_kb_build(args)
            if args.kb_command == "index":
                return _cmd_kb_index(args)
            if args.kb_command == "query":
                return _cmd_kb_query(args)
            print("error: missing kb subcommand", file=sys.stderr)
            return EXIT_USER
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.print_help()
        return EXIT_USER
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # backend/sandbox faults
        from codeloop.config import ConfigError
        from codeloop.problems import MalformedProblemError

        if isinstance(exc, (ConfigError, MalformedProblemError, ValueError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USER
        logger.exception("infrastructure error")
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
