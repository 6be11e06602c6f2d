import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codeloop.kb.ingest import (
    KBDocument,
    KBPost,
    compose_documents,
    parse_dump,
    read_documents,
    write_documents,
)
from codeloop.tokenizer import rule_token_count

POSTS_XML = b"""<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" Body="&lt;p&gt;How do I reverse a list?&lt;/p&gt;" />
  <row Id="2" Body="&lt;p&gt;Broadcasting question&lt;/p&gt;" />
  <row Id="3" Body="&lt;p&gt;Lonely post with no comments&lt;/p&gt;" />
</posts>
"""

COMMENTS_XML = b"""<?xml version="1.0" encoding="utf-8"?>
<comments>
  <row Id="10" PostId="1" Text="Use slicing." />
  <row Id="11" PostId="2" Text="Check the shapes." />
  <row Id="12" PostId="1" Text="Or the reverse method." />
  <row Id="13" PostId="1" Text="reversed() works too." />
</comments>
"""


def brute_force_windows(post: KBPost, budget: int, min_comments: int) -> list[tuple[int, int]]:
    """Every (start, taken) window satisfying the same two constraints.

    For each start, the window is the longest prefix of consecutive
    comments whose running total with the post stays strictly under the
    budget; kept when it reaches the comment bound.
    """
    post_tokens = rule_token_count(post.body)
    out = []
    for start in range(len(post.comments)):
        length = post_tokens
        taken = 0
        for c in post.comments[start:]:
            t = rule_token_count(c)
            if length + t < budget:
                length += t
                taken += 1
            else:
                break
        if taken >= min_comments:
            out.append((start, taken))
    return out


class TestParseDump:
    def test_structural_mapping(self):
        reader = parse_dump(io.BytesIO(POSTS_XML), io.BytesIO(COMMENTS_XML))
        posts = {p.post_id: p for p in reader.iter_posts()}
        assert sorted(posts) == ["1", "2"]
        assert len(posts["1"].comments) == 3
        assert len(posts["2"].comments) == 1

    def test_comment_order_preserved(self):
        reader = parse_dump(io.BytesIO(POSTS_XML), io.BytesIO(COMMENTS_XML))
        posts = {p.post_id: p for p in reader.iter_posts()}
        assert posts["1"].comments == [
            "Use slicing.",
            "Or the reverse method.",
            "reversed() works too.",
        ]

    def test_orphan_comment_counted(self):
        comments = COMMENTS_XML.replace(b'PostId="2"', b'PostId="99"')
        reader = parse_dump(io.BytesIO(POSTS_XML), io.BytesIO(comments))
        posts = list(reader.iter_posts())
        assert [p.post_id for p in posts] == ["1"]
        assert reader.diagnostics.orphan_comments == 1

    def test_malformed_rows_skipped_not_fatal(self):
        posts = POSTS_XML.replace(b'Id="2" ', b"")  # post row missing its id
        comments = COMMENTS_XML.replace(b'Text="Check the shapes."', b"")
        reader = parse_dump(io.BytesIO(posts), io.BytesIO(comments))
        parsed = list(reader.iter_posts())
        assert [p.post_id for p in parsed] == ["1"]
        assert reader.diagnostics.malformed_posts == 1
        assert reader.diagnostics.malformed_comments == 1

    def test_unreadable_source_fatal(self):
        reader = parse_dump(io.BytesIO(b"<posts><row"), io.BytesIO(COMMENTS_XML))
        with pytest.raises(Exception):
            list(reader.iter_posts())

    def test_duplicate_post_rows_emitted_once(self):
        posts = POSTS_XML.replace(
            b"</posts>", b'<row Id="1" Body="dupe body" /></posts>'
        )
        reader = parse_dump(io.BytesIO(posts), io.BytesIO(COMMENTS_XML))
        ids = [p.post_id for p in reader.iter_posts()]
        assert ids.count("1") == 1


class TestComposeDocuments:
    def test_below_minimum_comment_bound(self):
        post = KBPost("p", "body", [f"c{i}" for i in range(5)])
        assert compose_documents(post, budget=3000, min_comments=10) == []

    def test_three_windows_from_twelve_even_comments(self):
        # post 100 tokens, 12 comments of 50 tokens each: starts 0..2 give
        # 12, 11, 10 comments; start 3 reaches only 9 and is rejected.
        post = KBPost("p", "w " * 99 + "w", ["t " * 49 + "t" for _ in range(12)])
        assert rule_token_count(post.body) == 100
        assert all(rule_token_count(c) == 50 for c in post.comments)
        docs = compose_documents(post, budget=3000, min_comments=10)
        assert [(d.window_start, d.comment_count) for d in docs] == [
            (0, 12),
            (1, 11),
            (2, 10),
        ]

    def test_post_consuming_budget_yields_nothing(self):
        post = KBPost("p", "w " * 2989 + "w", ["t " * 9 + "t" for _ in range(12)])
        assert rule_token_count(post.body) == 2990
        assert compose_documents(post, budget=3000, min_comments=10) == []

    def test_document_format(self):
        post = KBPost("42", "the post", [f"comment {i}" for i in range(3)])
        docs = compose_documents(post, budget=100, min_comments=3)
        assert docs[0].text.startswith("Post : the post\n")
        assert docs[0].text.split("\n")[1:] == [
            "Comment: comment 0",
            "Comment: comment 1",
            "Comment: comment 2",
        ]
        assert docs[0].doc_id == "42:0"

    def test_budget_and_bound_always_hold(self):
        rng = random.Random(5)
        for _ in range(200):
            post = KBPost(
                "p",
                "w " * rng.randint(1, 80),
                ["t " * rng.randint(1, 40) for _ in range(rng.randint(0, 25))],
            )
            budget = rng.randint(10, 300)
            bound = rng.randint(1, 3)
            for doc in compose_documents(post, budget=budget, min_comments=bound):
                assert doc.token_count < budget
                assert doc.comment_count >= bound

    @given(
        comments=st.lists(st.integers(min_value=0, max_value=60), max_size=30),
        post_tokens=st.integers(min_value=1, max_value=120),
        budget=st.integers(min_value=1, max_value=300),
        min_comments=st.integers(min_value=1, max_value=3),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_brute_force_oracle(self, comments, post_tokens, budget, min_comments):
        post = KBPost(
            "p",
            "w " * (post_tokens - 1) + "w" if post_tokens else "",
            ["t " * n if n else "" for n in comments],
        )
        docs = compose_documents(post, budget=budget, min_comments=min_comments)
        got = [(d.window_start, d.comment_count) for d in docs]
        assert got == brute_force_windows(post, budget, min_comments)

    @given(
        comments=st.lists(st.integers(min_value=0, max_value=40), max_size=20),
        budget=st.integers(min_value=2, max_value=200),
        bump=st.integers(min_value=0, max_value=100),
    )
    @settings(max_examples=200, deadline=None)
    def test_budget_monotonicity(self, comments, budget, bump):
        post = KBPost("p", "w", ["t " * n if n else "" for n in comments])
        low = compose_documents(post, budget=budget, min_comments=1)
        high = compose_documents(post, budget=budget + bump, min_comments=1)
        assert len(high) >= len(low)

    def test_rejects_bad_parameters(self):
        post = KBPost("p", "w", ["c"])
        with pytest.raises(ValueError):
            compose_documents(post, budget=0)
        with pytest.raises(ValueError):
            compose_documents(post, min_comments=0)


def test_ndjson_roundtrip(tmp_path):
    post = KBPost("7", "body text", [f"c{i} word" for i in range(4)])
    docs = compose_documents(post, budget=50, min_comments=2)
    assert docs
    path = tmp_path / "docs.ndjson"
    assert write_documents(docs, path) == len(docs)
    assert list(read_documents(path)) == docs


def test_kbdocument_json_fields():
    doc = KBDocument("a:0", "a", 0, "Post : x", 3, 1)
    raw = doc.to_json()
    for field in ("doc_id", "post_id", "window_start", "text", "token_count", "comment_count"):
        assert field in raw
    assert KBDocument.from_json(raw) == doc
