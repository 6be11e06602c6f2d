"""Text cleansing for forum dump content.

``clean_text`` turns HTML-ish forum markup into retrieval-friendly plain
text: tags are stripped, character entities decoded, and whitespace runs
collapsed to single spaces. Code is the exception: HTML ``<pre>``/``<code>``
spans are converted to fenced / backtick-quoted form with their contents
kept byte-for-byte, and text already inside fences or backtick spans passes
through untouched.

The function is a total, deterministic fixed point: one pass can itself
expose new work (decoding ``&lt;b&gt;`` produces a ``<b>`` tag), so the pass
is iterated until the text stops changing. Every changing pass strictly
shrinks a (code-span count, length, raw-whitespace) measure, so the loop
terminates, and returning a fixed point makes ``clean_text`` idempotent by
construction.
"""

from __future__ import annotations

import html
import re

_BLOCK_CODE = re.compile(
    r"<pre\b[^>]*>\s*(?:<code\b[^>]*>)?(.*?)(?:</code\s*>)?\s*</pre\s*>",
    re.IGNORECASE | re.DOTALL,
)
_INLINE_CODE = re.compile(r"<code\b[^>]*>(.*?)</code\s*>", re.IGNORECASE | re.DOTALL)
_TAG = re.compile(r"</?[A-Za-z!][^<>]*>")
_BACKTICK_SPAN = re.compile(r"`[^`\n]*`")
_WS_RUN = re.compile(r"\s+")


def _convert_html_code(text: str) -> str:
    """Rewrite HTML code spans as fenced blocks / backtick spans."""

    def as_block(m: re.Match[str]) -> str:
        return "\n```\n" + html.unescape(m.group(1)) + "\n```\n"

    def as_inline(m: re.Match[str]) -> str:
        body = html.unescape(m.group(1))
        if "\n" in body or "`" in body:
            return "\n```\n" + body + "\n```\n"
        return "`" + body + "`"

    text = _BLOCK_CODE.sub(as_block, text)
    return _INLINE_CODE.sub(as_inline, text)


def _split_fenced(text: str) -> list[tuple[bool, str]]:
    """Split into (is_code, chunk) segments on ``` fence lines.

    A fence line is any line whose stripped content starts with three
    backticks; fence lines belong to the code chunk. An unterminated fence
    protects through end of text.
    """
    segments: list[tuple[bool, str]] = []
    buf: list[str] = []
    in_code = False
    for line in text.split("\n"):
        if line.strip().startswith("```"):
            if not in_code:
                if buf:
                    segments.append((False, "\n".join(buf)))
                buf = [line]
                in_code = True
            else:
                buf.append(line)
                segments.append((True, "\n".join(buf)))
                buf = []
                in_code = False
        else:
            buf.append(line)
    if buf:
        segments.append((in_code, "\n".join(buf)))
    return segments


def _clean_prose(text: str) -> str:
    """Strip tags, decode entities, collapse whitespace; backtick spans kept."""
    spans: list[str] = []

    def stash(m: re.Match[str]) -> str:
        spans.append(m.group(0))
        return f"\x00{len(spans) - 1}\x00"

    text = _BACKTICK_SPAN.sub(stash, text)
    text = _TAG.sub(" ", text)
    text = html.unescape(text)
    text = _WS_RUN.sub(" ", text).strip()
    for i, span in enumerate(spans):
        text = text.replace(f"\x00{i}\x00", span)
    return text


def _clean_pass(text: str) -> str:
    parts: list[str] = []
    for is_code, chunk in _split_fenced(text):
        if is_code:
            parts.append(chunk)
            continue
        # Converting HTML code spans may introduce new fence lines, so the
        # converted chunk is re-split before prose cleaning touches it.
        for sub_is_code, sub in _split_fenced(_convert_html_code(chunk)):
            if sub_is_code:
                parts.append(sub)
            else:
                cleaned = _clean_prose(sub)
                if cleaned:
                    parts.append(cleaned)
    return "\n".join(parts)


def clean_text(raw: str) -> str:
    """Cleanse forum markup; deterministic, total, and idempotent."""
    current = raw.replace("\x00", "")
    while True:
        nxt = _clean_pass(current)
        if nxt == current:
            return current
        current = nxt
