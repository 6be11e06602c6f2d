"""The generate / check / execute / correct loop, with full run tracing.

Attempt 1 retrieves reference documents, optionally asks the guidance model
for reasoning suggestions, renders the initial code prompt, and generates a
candidate. Every later attempt feeds the previous candidate and its
feedback (syntax message or execution traceback) through the correction
path. The loop stops at the first pass or when the attempt budget runs out.
Every attempt records its prompts, raw model replies, candidate, validation
outcome, and token usage, so any run built on scripted backends can be
replayed bit-for-bit.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from codeloop.config import EngineConfig
from codeloop.executor import (
    EnvironmentFailure,
    ExecLimits,
    ExecStatus,
    ExecutionResult,
    Feedback,
    FeedbackSource,
    MockExecutor,
    SyntaxReport,
    check_syntax,
    make_feedback,
)
from codeloop.kb.ingest import KBDocument
from codeloop.llm import (
    BackendError,
    BackendRegistry,
    CompletionClient,
    MockBackend,
    RetryPolicy,
    TokenUsage,
    TranscriptEntry,
    UsageLedger,
)
from codeloop.problems import Problem
from codeloop.prompts import (
    CandidateCode,
    CodeExtractionError,
    PromptLibrary,
    RenderedPrompt,
    extract_code,
)

NO_CODE_SENTINEL = "# no code produced"


class UnreplayableError(Exception):
    """The record does not carry the cached responses replay needs."""


class ReplayDivergenceError(Exception):
    def __init__(self, attempt_index: int, detail: str = "") -> None:
        super().__init__(
            f"replay diverged at attempt {attempt_index}" + (f": {detail}" if detail else "")
        )
        self.attempt_index = attempt_index


@dataclass(frozen=True)
class AttemptRecord:
    attempt_index: int
    code_prompt: RenderedPrompt
    code_response: str
    candidate: CandidateCode
    syntax: SyntaxReport
    cot_prompt: RenderedPrompt | None = None
    cot_response: str | None = None
    execution: ExecutionResult | None = None
    feedback_out: Feedback | None = None
    cot_usage: TokenUsage | None = None
    code_usage: TokenUsage = TokenUsage()

    @property
    def usage(self) -> TokenUsage:
        total = self.code_usage
        if self.cot_usage is not None:
            total = total + self.cot_usage
        return total

    def to_dict(self) -> dict:
        return {
            "attempt_index": self.attempt_index,
            "cot_prompt": _prompt_dict(self.cot_prompt),
            "cot_response": self.cot_response,
            "code_prompt": _prompt_dict(self.code_prompt),
            "code_response": self.code_response,
            "candidate": {
                "source": self.candidate.source,
                "attempt_index": self.candidate.attempt_index,
                "origin": self.candidate.origin,
            },
            "syntax": {
                "ok": self.syntax.ok,
                "message": self.syntax.message,
                "line": self.syntax.line,
                "column": self.syntax.column,
            },
            "execution": self.execution.to_dict() if self.execution else None,
            "feedback_out": (
                {"source": self.feedback_out.source.value, "body": self.feedback_out.body}
                if self.feedback_out
                else None
            ),
            "usage": {
                "cot": (
                    {
                        "prompt_tokens": self.cot_usage.prompt_tokens,
                        "completion_tokens": self.cot_usage.completion_tokens,
                    }
                    if self.cot_usage
                    else None
                ),
                "code": {
                    "prompt_tokens": self.code_usage.prompt_tokens,
                    "completion_tokens": self.code_usage.completion_tokens,
                },
                "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens,
            },
        }


def _prompt_dict(prompt: RenderedPrompt | None) -> dict | None:
    if prompt is None:
        return None
    return {
        "kind": prompt.kind.value,
        "text": prompt.text,
        "bindings": prompt.bindings,
        "token_count": prompt.token_count,
    }


def _prompt_from_dict(raw: dict | None) -> RenderedPrompt | None:
    if raw is None:
        return None
    from codeloop.prompts import PromptKind

    return RenderedPrompt(
        kind=PromptKind(raw["kind"]),
        text=raw["text"],
        bindings=dict(raw["bindings"]),
        token_count=int(raw["token_count"]),
    )


def _usage_from_dict(raw: dict | None) -> TokenUsage | None:
    if raw is None:
        return None
    return TokenUsage(
        prompt_tokens=int(raw["prompt_tokens"]),
        completion_tokens=int(raw["completion_tokens"]),
    )


def attempt_from_dict(raw: dict) -> AttemptRecord:
    candidate = CandidateCode(
        source=raw["candidate"]["source"],
        attempt_index=int(raw["candidate"]["attempt_index"]),
        origin=raw["candidate"].get("origin"),
    )
    feedback = raw.get("feedback_out")
    return AttemptRecord(
        attempt_index=int(raw["attempt_index"]),
        cot_prompt=_prompt_from_dict(raw.get("cot_prompt")),
        cot_response=raw.get("cot_response"),
        code_prompt=_prompt_from_dict(raw["code_prompt"]),
        code_response=raw["code_response"],
        candidate=candidate,
        syntax=SyntaxReport(
            ok=bool(raw["syntax"]["ok"]),
            message=raw["syntax"]["message"],
            line=raw["syntax"].get("line"),
            column=raw["syntax"].get("column"),
        ),
        execution=(
            ExecutionResult.from_dict(raw["execution"]) if raw.get("execution") else None
        ),
        feedback_out=(
            Feedback(source=FeedbackSource(feedback["source"]), body=feedback["body"])
            if feedback
            else None
        ),
        cot_usage=_usage_from_dict(raw["usage"].get("cot")),
        code_usage=_usage_from_dict(raw["usage"]["code"]) or TokenUsage(),
    )


def record_from_dict(raw: dict) -> RunRecord:
    return RunRecord(
        problem_id=raw["problem_id"],
        attempts=tuple(attempt_from_dict(a) for a in raw["attempts"]),
        final_status=raw["final_status"],
        stop_attempt=int(raw["stop_attempt"]),
        config_snapshot=dict(raw["config_snapshot"]),
        problem=dict(raw.get("problem", {})),
        retrieved_docs=tuple(dict(d) for d in raw.get("retrieved_docs", ())),
        failed_stage=raw.get("failed_stage"),
        pending=raw.get("pending"),
    )


@dataclass(frozen=True)
class RunRecord:
    problem_id: str
    attempts: tuple[AttemptRecord, ...]
    final_status: str  # pass | fail | infra_fail
    stop_attempt: int
    config_snapshot: dict
    problem: dict = field(default_factory=dict)
    retrieved_docs: tuple[dict, ...] = ()
    failed_stage: str | None = None
    # Partial data of an attempt cut short by an infrastructure failure;
    # completed attempts never appear here. Kept so replay can reproduce the
    # failure point exactly. Excluded from usage totals (the attempt never
    # finished).
    pending: dict | None = None

    @property
    def usage_total(self) -> TokenUsage:
        total = TokenUsage()
        for a in self.attempts:
            total = total + a.usage
        return total

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "final_status": self.final_status,
            "stop_attempt": self.stop_attempt,
            "failed_stage": self.failed_stage,
            "pending": self.pending,
            "attempts": [a.to_dict() for a in self.attempts],
            "retrieved_docs": list(self.retrieved_docs),
            "problem": self.problem,
            "config_snapshot": self.config_snapshot,
            "usage_total": {
                "prompt_tokens": self.usage_total.prompt_tokens,
                "completion_tokens": self.usage_total.completion_tokens,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


class Engine:
    """Wires retrieval, prompting, generation, and execution into solve()."""

    def __init__(
        self,
        config: EngineConfig,
        registry: BackendRegistry,
        executor,
        retriever=None,
        templates: PromptLibrary | None = None,
        sleep=None,
    ) -> None:
        self.config = config
        self.registry = registry
        self.executor = executor
        self.retriever = retriever
        self.templates = templates or PromptLibrary(
            template_dir=config.template_dir,
            max_prompt_tokens=config.max_prompt_tokens,
            feedback_cap_bytes=config.feedback_cap_bytes,
        )
        self._sleep = sleep if sleep is not None else (lambda s: None)

    @staticmethod
    def _total_attempts(cfg: EngineConfig) -> int:
        # "generations": the budget counts every code generation, the initial
        # one included. "corrections": the budget counts correction rounds on
        # top of the initial generation (the looser pseudocode reading).
        if cfg.attempt_semantics == "corrections":
            return cfg.n_max + 1
        return cfg.n_max

    def solve(self, problem: Problem) -> RunRecord:
        client = CompletionClient(
            self.registry.open_run(problem.id),
            retry=RetryPolicy(),
            sleep=self._sleep,
            rng=random.Random(self.config.seed),
        )
        docs: list[KBDocument] = []
        if self.retriever is not None and self.config.retrieval_k > 0:
            docs = self.retriever.retrieve(problem.description, self.config.retrieval_k)
        return self._run_loop(problem, client, docs, self.config, self.templates)

    def _run_loop(
        self,
        problem: Problem,
        client: CompletionClient,
        docs: list[KBDocument],
        cfg: EngineConfig,
        templates: PromptLibrary,
    ) -> RunRecord:
        ledger = UsageLedger()
        limits = ExecLimits(timeout_s=cfg.timeout_s, memory_mb=cfg.memory_mb)
        attempts: list[AttemptRecord] = []
        candidate: CandidateCode | None = None
        feedback: Feedback | None = None

        def finish(
            status: str, stop: int, stage: str | None = None, pending: dict | None = None
        ) -> RunRecord:
            return RunRecord(
                problem_id=problem.id,
                attempts=tuple(attempts),
                final_status=status,
                stop_attempt=stop,
                config_snapshot=cfg.to_dict(),
                problem=problem.to_dict(),
                retrieved_docs=tuple(
                    {"doc_id": d.doc_id, "text": d.text} for d in docs
                ),
                failed_stage=stage,
                pending=pending,
            )

        for attempt_index in range(1, self._total_attempts(cfg) + 1):
            cot_prompt: RenderedPrompt | None = None
            cot_response: str | None = None
            cot_usage: TokenUsage | None = None
            try:
                if attempt_index == 1:
                    if cfg.auto_cot_1:
                        cot_prompt = templates.render_initial_cot(problem, docs)
                else:
                    if cfg.auto_cot_2:
                        cot_prompt = templates.render_correction_cot(
                            problem, candidate, feedback
                        )
                if cot_prompt is not None:
                    cot_response, cot_usage = client.complete(
                        cot_prompt, cfg.role_stack.cot_model, ledger, attempt_index, "cot"
                    )
            except BackendError:
                return finish(
                    "infra_fail",
                    attempt_index,
                    stage="llm:cot",
                    pending={"cot_prompt": _prompt_dict(cot_prompt)},
                )

            cot_text = cot_response or ""
            if attempt_index == 1:
                code_prompt = templates.render_initial_code(problem, cot_text)
            else:
                code_prompt = templates.render_correction_code(
                    candidate, feedback, cot_text
                )
            try:
                code_response, code_usage = client.complete(
                    code_prompt, cfg.role_stack.code_model, ledger, attempt_index, "code"
                )
            except BackendError:
                return finish(
                    "infra_fail",
                    attempt_index,
                    stage="llm:code",
                    pending={
                        "cot_prompt": _prompt_dict(cot_prompt),
                        "cot_response": cot_response,
                        "cot_usage": (
                            {
                                "prompt_tokens": cot_usage.prompt_tokens,
                                "completion_tokens": cot_usage.completion_tokens,
                            }
                            if cot_usage
                            else None
                        ),
                        "code_prompt": _prompt_dict(code_prompt),
                    },
                )

            origin = f"{problem.id}#attempt{attempt_index}"
            try:
                candidate = extract_code(code_response, attempt_index, origin=origin)
                syntax = check_syntax(candidate)
            except CodeExtractionError as exc:
                candidate = CandidateCode(NO_CODE_SENTINEL, attempt_index, origin=origin)
                syntax = SyntaxReport(ok=False, message=str(exc))

            execution: ExecutionResult | None = None
            if syntax.ok:
                try:
                    execution = self._execute_with_env_retry(problem, candidate, limits)
                except EnvironmentFailure:
                    attempts.append(
                        AttemptRecord(
                            attempt_index=attempt_index,
                            cot_prompt=cot_prompt,
                            cot_response=cot_response,
                            code_prompt=code_prompt,
                            code_response=code_response,
                            candidate=candidate,
                            syntax=syntax,
                            cot_usage=cot_usage,
                            code_usage=code_usage,
                        )
                    )
                    return finish("infra_fail", attempt_index, stage="executor")
                feedback = None if execution.status is ExecStatus.PASS else make_feedback(execution)
            else:
                feedback = Feedback(source=FeedbackSource.SYNTAX_CHECKER, body=syntax.message)

            attempts.append(
                AttemptRecord(
                    attempt_index=attempt_index,
                    cot_prompt=cot_prompt,
                    cot_response=cot_response,
                    code_prompt=code_prompt,
                    code_response=code_response,
                    candidate=candidate,
                    syntax=syntax,
                    execution=execution,
                    feedback_out=feedback,
                    cot_usage=cot_usage,
                    code_usage=code_usage,
                )
            )
            if execution is not None and execution.status is ExecStatus.PASS:
                return finish("pass", attempt_index)

        return finish("fail", len(attempts))

    def _execute_with_env_retry(
        self, problem: Problem, candidate: CandidateCode, limits: ExecLimits
    ) -> ExecutionResult:
        try:
            return self.executor.execute(problem, candidate, limits)
        except EnvironmentFailure:
            # One retry against a rebuilt environment; a second failure marks
            # the problem infrastructure-failed rather than model-failed.
            return self.executor.execute(problem, candidate, limits)

    # -- replay -------------------------------------------------------------

    def replay(self, record: RunRecord) -> RunRecord:
        """Re-run a record from its config snapshot and cached responses.

        The reproduced record must equal the original; the first differing
        attempt is reported. Records missing cached responses (unless they
        legitimately stop at an infrastructure failure) are unreplayable.
        """
        transcript: list[TranscriptEntry] = []
        for a in record.attempts:
            if a.cot_prompt is not None:
                if a.cot_response is None:
                    raise UnreplayableError(
                        f"attempt {a.attempt_index} lacks a cached guidance response"
                    )
                transcript.append(
                    TranscriptEntry(
                        reply=a.cot_response,
                        prompt_tokens=(a.cot_usage or TokenUsage()).prompt_tokens,
                        completion_tokens=(a.cot_usage or TokenUsage()).completion_tokens,
                    )
                )
            if a.code_response is None:
                raise UnreplayableError(
                    f"attempt {a.attempt_index} lacks a cached code response"
                )
            transcript.append(
                TranscriptEntry(
                    reply=a.code_response,
                    prompt_tokens=a.code_usage.prompt_tokens,
                    completion_tokens=a.code_usage.completion_tokens,
                )
            )
        if record.pending and record.pending.get("cot_response") is not None:
            usage = record.pending.get("cot_usage") or {}
            transcript.append(
                TranscriptEntry(
                    reply=record.pending["cot_response"],
                    prompt_tokens=usage.get("prompt_tokens", 0),
                    completion_tokens=usage.get("completion_tokens", 0),
                )
            )
        if not transcript and record.final_status != "infra_fail":
            raise UnreplayableError("record carries no cached responses")

        problem = Problem.from_dict(record.problem)
        docs = [
            KBDocument(
                doc_id=d["doc_id"],
                post_id=d.get("post_id", d["doc_id"]),
                window_start=0,
                text=d["text"],
                token_count=0,
                comment_count=0,
            )
            for d in record.retrieved_docs
        ]
        from codeloop.config import resolve_config

        cfg = resolve_config(file=record.config_snapshot, env={})
        templates = PromptLibrary(
            template_dir=cfg.template_dir,
            max_prompt_tokens=cfg.max_prompt_tokens,
            feedback_cap_bytes=cfg.feedback_cap_bytes,
        )
        backend = MockBackend(transcript) if transcript else MockBackend(
            [TranscriptEntry(reply="", match=-1)]
        )
        client = CompletionClient(
            {
                cfg.cot_model.model_name: backend,
                cfg.code_model.model_name: backend,
            },
            sleep=lambda s: None,
        )
        reproduced = self._run_loop(problem, client, docs, cfg, templates)

        for original, new in zip(record.attempts, reproduced.attempts):
            if original.to_dict() != new.to_dict():
                raise ReplayDivergenceError(original.attempt_index)
        if record.to_dict() != reproduced.to_dict():
            index = min(len(record.attempts), len(reproduced.attempts)) + 1
            raise ReplayDivergenceError(index, "run metadata differs")
        return reproduced


def build_executor(config: EngineConfig):
    """Construct the executor backend named by the config."""
    if config.executor == "mock":
        if config.executor_script_path:
            from pathlib import Path

            raw = json.loads(Path(config.executor_script_path).read_text(encoding="utf-8"))
            return MockExecutor.from_config(raw)
        return MockExecutor()
    from codeloop.environments import shim_command
    from codeloop.executor import ShimExecutor

    return ShimExecutor(
        shim_cmd=shim_command(
            config.env_manifest_id,
            shim_cmd=list(config.shim_cmd) if config.shim_cmd else None,
            builds_dir=config.env_builds_dir,
        ),
        env_manifest_id=config.env_manifest_id,
        limits=ExecLimits(timeout_s=config.timeout_s, memory_mb=config.memory_mb),
    )
