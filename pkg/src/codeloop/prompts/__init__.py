"""Prompt rendering from external template files, plus code extraction.

Four prompt kinds drive the engine: an initial reasoning-guidance prompt fed
by retrieved forum documents, a correction guidance prompt fed by execution
feedback, and the two code-generation prompts. Templates are plain text
files with ``{name}`` placeholders, loaded from a directory (the packaged
defaults ship with the engine and are pinned by hash in the test suite).

Rendering is a single pass: the template is split at its placeholders and
joined with the bound values, so substituted values can never themselves be
re-interpreted as placeholders. Binding keys starting with ``_`` are
annotations (truncation notes), not placeholders.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from codeloop.tokenizer import TokenCounter, rule_token_count

NO_POST_LINE = "No reference post is available for this problem."
DOC_DELIMITER = "\n----- next reference post -----\n"
DEFAULT_FEEDBACK_CAP_BYTES = 8192

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class PromptError(Exception):
    pass


class CodeExtractionError(PromptError):
    """Model output contained no usable code."""


class PromptKind(str, Enum):
    INITIAL_COT = "initial_cot"
    CORRECTION_COT = "correction_cot"
    INITIAL_CODE = "initial_code"
    CORRECTION_CODE = "correction_code"


_EXPECTED_PLACEHOLDERS: dict[PromptKind, set[str]] = {
    PromptKind.INITIAL_COT: {"problem_description", "post"},
    PromptKind.CORRECTION_COT: {"problem_description", "generated_code", "feedback"},
    PromptKind.INITIAL_CODE: {"problem_description", "code_context", "cot_suggestion"},
    PromptKind.CORRECTION_CODE: {"generated_code", "feedback", "cot_suggestion"},
}

# Placeholders whose empty value removes the containing paragraph instead of
# rendering an empty slot (the reasoning-suggestions footer of the code
# prompts, dropped when guidance generation is disabled).
_OPTIONAL = {"cot_suggestion"}


@dataclass(frozen=True)
class RenderedPrompt:
    kind: PromptKind
    text: str
    bindings: dict[str, str]
    token_count: int


@dataclass(frozen=True)
class CandidateCode:
    """Extracted candidate source for one generation attempt."""

    source: str
    attempt_index: int
    origin: str | None = None

    def __post_init__(self) -> None:
        if not self.source:
            raise ValueError("candidate source must be non-empty")
        if self.attempt_index < 1:
            raise ValueError("attempt_index is 1-based")


class Template:
    def __init__(self, kind: PromptKind, text: str) -> None:
        self.kind = kind
        self.text = text
        names = _PLACEHOLDER.findall(text)
        if len(names) != len(set(names)):
            raise PromptError(f"{kind.value}: placeholders must appear exactly once")
        self.placeholders = set(names)
        expected = _EXPECTED_PLACEHOLDERS[kind]
        if self.placeholders != expected:
            raise PromptError(
                f"{kind.value}: template placeholders {sorted(self.placeholders)} "
                f"do not match expected {sorted(expected)}"
            )

    def render(
        self,
        values: dict[str, str],
        annotations: dict[str, str] | None = None,
        count_tokens: TokenCounter = rule_token_count,
    ) -> RenderedPrompt:
        if set(values) != self.placeholders:
            raise PromptError(
                f"{self.kind.value}: bindings {sorted(values)} do not match "
                f"placeholders {sorted(self.placeholders)}"
            )
        text = self.text
        for name in self.placeholders & _OPTIONAL:
            if not values[name]:
                text = _drop_paragraph(text, name)
        pieces: list[str] = []
        last = 0
        for m in _PLACEHOLDER.finditer(text):
            pieces.append(text[last : m.start()])
            pieces.append(values[m.group(1)])
            last = m.end()
        pieces.append(text[last:])
        rendered = "".join(pieces)
        bindings = dict(values)
        for key, note in (annotations or {}).items():
            bindings[f"_{key}"] = note
        return RenderedPrompt(
            kind=self.kind,
            text=rendered,
            bindings=bindings,
            token_count=count_tokens(rendered),
        )


def _drop_paragraph(text: str, placeholder: str) -> str:
    marker = "{" + placeholder + "}"
    paragraphs = text.split("\n\n")
    kept = [p for p in paragraphs if marker not in p]
    return "\n\n".join(kept)


class PromptLibrary:
    """Loads and renders the four prompt templates.

    ``template_dir`` overrides the packaged defaults; it must contain one
    ``<kind>.txt`` file per prompt kind.
    """

    def __init__(
        self,
        template_dir: str | Path | None = None,
        count_tokens: TokenCounter = rule_token_count,
        max_prompt_tokens: int | None = None,
        feedback_cap_bytes: int = DEFAULT_FEEDBACK_CAP_BYTES,
    ) -> None:
        self.count_tokens = count_tokens
        self.max_prompt_tokens = max_prompt_tokens
        self.feedback_cap_bytes = feedback_cap_bytes
        self.templates: dict[PromptKind, Template] = {}
        for kind in PromptKind:
            if template_dir is not None:
                raw = Path(template_dir, f"{kind.value}.txt").read_text(encoding="utf-8")
            else:
                raw = (
                    resources.files("codeloop.prompts")
                    .joinpath(f"templates/{kind.value}.txt")
                    .read_text(encoding="utf-8")
                )
            self.templates[kind] = Template(kind, raw)

    # -- rendering ---------------------------------------------------------

    def render_initial_cot(self, problem, docs: list) -> RenderedPrompt:
        """Reasoning-guidance prompt from the problem and retrieved documents.

        Documents are concatenated in rank order. If the rendered prompt
        would exceed ``max_prompt_tokens``, lowest-ranked documents are
        dropped first and a lone remaining document is tail-truncated; what
        happened is recorded under the ``_truncation`` annotation.
        """
        description = _problem_text(problem)
        template = self.templates[PromptKind.INITIAL_COT]
        texts = [d.text for d in docs]

        def compose(ts: list[str]) -> str:
            return DOC_DELIMITER.join(ts) if ts else NO_POST_LINE

        prompt = template.render(
            {"problem_description": description, "post": compose(texts)},
            count_tokens=self.count_tokens,
        )
        if self.max_prompt_tokens is None or prompt.token_count <= self.max_prompt_tokens:
            return prompt

        dropped = 0
        while len(texts) > 1:
            texts = texts[:-1]
            dropped += 1
            prompt = template.render(
                {"problem_description": description, "post": compose(texts)},
                annotations={"truncation": f"dropped {dropped} lowest-ranked doc(s)"},
                count_tokens=self.count_tokens,
            )
            if prompt.token_count <= self.max_prompt_tokens:
                return prompt
        overhead = template.render(
            {"problem_description": description, "post": ""},
            count_tokens=self.count_tokens,
        ).token_count
        room = max(self.max_prompt_tokens - overhead, 0)
        texts = [_truncate_to_tokens(texts[0], room)] if texts else []
        note = f"dropped {dropped} doc(s); truncated remaining doc to {room} tokens"
        return template.render(
            {"problem_description": description, "post": compose(texts)},
            annotations={"truncation": note},
            count_tokens=self.count_tokens,
        )

    def render_correction_cot(self, problem, code, feedback) -> RenderedPrompt:
        if not feedback.body:
            raise PromptError("correction guidance requires non-empty feedback")
        body, note = _cap_feedback(feedback.body, self.feedback_cap_bytes)
        return self.templates[PromptKind.CORRECTION_COT].render(
            {
                "problem_description": _problem_text(problem),
                "generated_code": code.source,
                "feedback": body,
            },
            annotations={"truncation": note} if note else None,
            count_tokens=self.count_tokens,
        )

    def render_initial_code(self, problem, cot: str) -> RenderedPrompt:
        from codeloop.problems import count_insert_markers

        if count_insert_markers(problem.code_context) != 1:
            raise PromptError(
                f"problem {problem.id}: code context must contain exactly one insertion marker"
            )
        return self.templates[PromptKind.INITIAL_CODE].render(
            {
                "problem_description": problem.description,
                "code_context": problem.code_context,
                "cot_suggestion": cot,
            },
            count_tokens=self.count_tokens,
        )

    def render_correction_code(self, code, feedback, cot: str) -> RenderedPrompt:
        body, note = _cap_feedback(feedback.body, self.feedback_cap_bytes)
        return self.templates[PromptKind.CORRECTION_CODE].render(
            {"generated_code": code.source, "feedback": body, "cot_suggestion": cot},
            annotations={"truncation": note} if note else None,
            count_tokens=self.count_tokens,
        )


def _problem_text(problem) -> str:
    """Description plus code context: guidance generation sees both."""
    return f"{problem.description}\n{problem.code_context}"


def _cap_feedback(body: str, cap_bytes: int) -> tuple[str, str | None]:
    """Keep the tail of oversize feedback; the error class sits at the end."""
    raw = body.encode("utf-8")
    if len(raw) <= cap_bytes:
        return body, None
    tail = raw[-cap_bytes:].decode("utf-8", errors="ignore")
    return (
        f"[feedback truncated to final {cap_bytes} bytes]\n{tail}",
        f"feedback tail-truncated to {cap_bytes} bytes",
    )


def _truncate_to_tokens(text: str, max_tokens: int) -> str:
    from codeloop.tokenizer import _WORD_OR_SYMBOL

    if max_tokens <= 0:
        return ""
    spans = list(_WORD_OR_SYMBOL.finditer(text))
    if len(spans) <= max_tokens:
        return text
    return text[: spans[max_tokens - 1].end()]


_FENCE = re.compile(r"```([^\n`]*)\n(.*?)(?:```|\Z)", re.DOTALL)


def extract_code(model_output: str, attempt_index: int, origin: str | None = None) -> CandidateCode:
    """Pull candidate source out of a model reply.

    The first fenced block wins (a language tag on the fence line is
    dropped, and an unterminated fence runs to end of output); without any
    fence the whole reply is taken, trimmed. An effectively empty reply
    raises :class:`CodeExtractionError`, which callers turn into feedback
    for the next attempt rather than a crash.
    """
    m = _FENCE.search(model_output)
    source = (m.group(2) if m else model_output).strip("\n").rstrip()
    if not source.strip():
        raise CodeExtractionError("no code produced")
    return CandidateCode(source=source, attempt_index=attempt_index, origin=origin)
