"""Forum dump ingestion: parse posts and comments, compose budgeted documents.

A knowledge document is one post followed by a consecutive window of its
comments, rendered as::

    Post : <post body>
    Comment: <first comment>
    Comment: <second comment>
    ...

Windows are chosen by a greedy sliding-window allocation: for every starting
comment index, consecutive comments are appended while the running token
count (post plus accepted comments) stays strictly below the budget, and the
window is kept only when it holds at least ``min_comments`` comments.
"""

from __future__ import annotations

import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

from codeloop.kb.clean import clean_text
from codeloop.tokenizer import TokenCounter, rule_token_count

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 3000
DEFAULT_MIN_COMMENTS = 10


@dataclass
class KBPost:
    """One forum post with its comments in source order."""

    post_id: str
    body: str
    comments: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class KBDocument:
    """A post plus a consecutive comment window under the token budget."""

    doc_id: str
    post_id: str
    window_start: int
    text: str
    token_count: int
    comment_count: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "doc_id": self.doc_id,
                "post_id": self.post_id,
                "window_start": self.window_start,
                "text": self.text,
                "token_count": self.token_count,
                "comment_count": self.comment_count,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "KBDocument":
        raw = json.loads(line)
        return cls(
            doc_id=raw["doc_id"],
            post_id=raw["post_id"],
            window_start=int(raw["window_start"]),
            text=raw["text"],
            token_count=int(raw["token_count"]),
            comment_count=int(raw["comment_count"]),
        )


@dataclass
class IngestDiagnostics:
    """Counts of records dropped while parsing a dump; never aborts the stream."""

    malformed_posts: int = 0
    malformed_comments: int = 0
    orphan_comments: int = 0
    empty_posts: int = 0

    @property
    def dropped(self) -> int:
        return (
            self.malformed_posts
            + self.malformed_comments
            + self.orphan_comments
            + self.empty_posts
        )


def _iter_rows(source: str | Path | IO[bytes]) -> Iterator[dict[str, str]]:
    """Stream ``<row .../>`` attribute dicts from a dump file.

    Uses incremental parsing and clears elements as it goes, so memory stays
    bounded by a single record. An unreadable or non-XML source raises.
    """
    for _, elem in ET.iterparse(source, events=("end",)):
        if elem.tag == "row":
            yield dict(elem.attrib)
        elem.clear()


class DumpReader:
    """Parses a posts/comments dump pair into :class:`KBPost` streams.

    Comment bodies are buffered per post id before posts stream out: the dump
    format orders comments by creation, not by post, so grouping requires
    holding comment text in memory (the XML itself is still parsed
    incrementally). Posts without any comment are dropped since no document
    can ever be composed from them.
    """

    def __init__(
        self,
        posts: str | Path | IO[bytes],
        comments: str | Path | IO[bytes],
    ) -> None:
        self._posts = posts
        self._comments = comments
        self.diagnostics = IngestDiagnostics()

    def iter_posts(self) -> Iterator[KBPost]:
        by_post: dict[str, list[str]] = {}
        for row in _iter_rows(self._comments):
            post_id = row.get("PostId")
            text = row.get("Text")
            if not post_id or text is None:
                self.diagnostics.malformed_comments += 1
                continue
            by_post.setdefault(post_id, []).append(clean_text(text))

        seen: set[str] = set()
        for row in _iter_rows(self._posts):
            post_id = row.get("Id")
            body = row.get("Body")
            if not post_id or body is None:
                self.diagnostics.malformed_posts += 1
                continue
            if post_id in seen:
                self.diagnostics.malformed_posts += 1
                continue
            seen.add(post_id)
            cleaned = clean_text(body)
            if not cleaned:
                self.diagnostics.empty_posts += 1
                continue
            comments = by_post.pop(post_id, None)
            if not comments:
                continue
            yield KBPost(post_id=post_id, body=cleaned, comments=comments)

        # Whatever comment groups remain never found their post.
        self.diagnostics.orphan_comments += sum(len(v) for v in by_post.values())
        by_post.clear()


def parse_dump(
    posts: str | Path | IO[bytes],
    comments: str | Path | IO[bytes],
) -> DumpReader:
    """Open a dump pair for streaming; see :class:`DumpReader`."""
    return DumpReader(posts, comments)


def compose_documents(
    post: KBPost,
    budget: int = DEFAULT_BUDGET,
    min_comments: int = DEFAULT_MIN_COMMENTS,
    count_tokens: TokenCounter = rule_token_count,
) -> list[KBDocument]:
    """Greedy sliding-window allocation of comments into budgeted documents.

    For each start index, consecutive comments are appended while the running
    total stays strictly below ``budget``; the window is emitted only when it
    reaches ``min_comments``. Token counts cover the post body and included
    comments (the format labels are layout, not budgeted content).
    """
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    if min_comments < 1:
        raise ValueError(f"min_comments must be at least 1, got {min_comments}")

    post_tokens = count_tokens(post.body)
    if post_tokens >= budget:
        return []

    comment_tokens = [count_tokens(c) for c in post.comments]
    docs: list[KBDocument] = []
    for start in range(len(post.comments)):
        length = post_tokens
        taken = 0
        for j in range(start, len(post.comments)):
            if length + comment_tokens[j] < budget:
                length += comment_tokens[j]
                taken += 1
            else:
                break
        if taken >= min_comments:
            window = post.comments[start : start + taken]
            lines = [f"Post : {post.body}"] + [f"Comment: {c}" for c in window]
            docs.append(
                KBDocument(
                    doc_id=f"{post.post_id}:{start}",
                    post_id=post.post_id,
                    window_start=start,
                    text="\n".join(lines),
                    token_count=length,
                    comment_count=taken,
                )
            )
    return docs


def build_documents(
    posts: Iterable[KBPost],
    budget: int = DEFAULT_BUDGET,
    min_comments: int = DEFAULT_MIN_COMMENTS,
    count_tokens: TokenCounter = rule_token_count,
) -> Iterator[KBDocument]:
    for post in posts:
        yield from compose_documents(post, budget, min_comments, count_tokens)


def write_documents(docs: Iterable[KBDocument], path: str | Path) -> int:
    """Write documents as newline-delimited JSON; returns the count written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(doc.to_json())
            fh.write("\n")
            n += 1
    return n


def read_documents(path: str | Path) -> Iterator[KBDocument]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield KBDocument.from_json(line)
