import numpy as np
import pytest

from codeloop.kb.embed import HashEmbedder
from codeloop.kb.index import (
    DimensionMismatch,
    DocRetriever,
    IndexFormatError,
    KnowledgeIndex,
)
from codeloop.kb.ingest import KBDocument


def unit_vectors(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, dim)).astype(np.float32)
    return data / np.linalg.norm(data, axis=1, keepdims=True)


def filled_index(n: int, dim: int = 64, backend: str = "hnsw", seed: int = 0) -> KnowledgeIndex:
    idx = KnowledgeIndex(dim=dim, backend=backend, seed=seed)
    for i, vec in enumerate(unit_vectors(n, dim, seed=seed + 1)):
        idx.add(f"d{i:05d}", vec)
    return idx


class TestBasics:
    def test_exact_self_match_ranks_first(self):
        idx = filled_index(50)
        vecs = unit_vectors(50, 64, seed=1)
        got = idx.query_vector(vecs[7], k=1)
        assert got[0][0] == "d00007"
        assert got[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_duplicate_doc_id_replaces_vector(self):
        idx = KnowledgeIndex(dim=8, backend="hnsw")
        e = np.eye(8, dtype=np.float32)
        idx.add("a", e[0])
        idx.add("b", e[1])
        idx.add("a", e[2])
        assert len(idx) == 2
        results = idx.query_vector(e[0], k=2)
        assert [d for d, _ in results] == ["a", "b"]
        # the replaced doc now matches its new direction, not the old one
        scores = dict(results)
        assert scores["a"] == pytest.approx(0.0, abs=1e-6)
        assert dict(idx.query_vector(e[2], k=1))["a"] == pytest.approx(1.0, abs=1e-6)

    def test_cardinality(self):
        idx = filled_index(200, dim=16)
        assert len(idx) == 200

    def test_truncation_rule(self):
        idx = filled_index(3, dim=16)
        assert len(idx.query_vector(unit_vectors(1, 16, 9)[0], k=5)) == 3

    def test_empty_index_returns_empty(self):
        idx = KnowledgeIndex(dim=16)
        assert idx.query_vector(unit_vectors(1, 16, 2)[0], k=3) == []

    def test_k_must_be_positive(self):
        idx = filled_index(3, dim=16)
        with pytest.raises(ValueError):
            idx.query_vector(unit_vectors(1, 16, 2)[0], k=0)

    def test_dimension_mismatch_reports_both(self):
        idx = KnowledgeIndex(dim=16)
        with pytest.raises(DimensionMismatch) as err:
            idx.add("a", np.ones(8, dtype=np.float32))
        assert err.value.expected == 16
        assert err.value.actual == 8

    def test_orthogonal_corpus(self):
        idx = KnowledgeIndex(dim=8, backend="exact")
        e = np.eye(8, dtype=np.float32)
        for i in range(3):
            idx.add(f"d{i}", e[i])
        got = idx.query_vector(e[1], k=1)
        assert got[0][0] == "d1"
        assert got[0][1] == pytest.approx(1.0, abs=1e-9)

    def test_scores_sorted_and_bounded(self):
        idx = filled_index(100, dim=32)
        results = idx.query_vector(unit_vectors(1, 32, 5)[0], k=10)
        scores = [s for _, s in results]
        assert scores == sorted(scores, reverse=True)
        assert all(-1.0 <= s <= 1.0 for s in scores)

    def test_tie_break_by_doc_id(self):
        idx = KnowledgeIndex(dim=8, backend="exact")
        v = unit_vectors(1, 8, 3)[0]
        for name in ("zz", "aa", "mm"):
            idx.add(name, v)
        assert [d for d, _ in idx.query_vector(v, k=3)] == ["aa", "mm", "zz"]


class TestRecall:
    def test_recall_against_exact_scan_2000(self):
        n, dim, k = 2000, 256, 10
        data = unit_vectors(n, dim, seed=11)
        approx = KnowledgeIndex(dim=dim, backend="hnsw", seed=0)
        exact = KnowledgeIndex(dim=dim, backend="exact", seed=0)
        for i in range(n):
            approx.add(f"d{i:05d}", data[i])
            exact.add(f"d{i:05d}", data[i])
        queries = unit_vectors(40, dim, seed=12)
        recall = 0.0
        for q in queries:
            a = {d for d, _ in approx.query_vector(q, k)}
            e = {d for d, _ in exact.query_vector(q, k)}
            recall += len(a & e) / k
        assert recall / len(queries) >= 0.95

    def test_determinism_under_fixed_seed(self):
        a = filled_index(500, dim=64, seed=4)
        b = filled_index(500, dim=64, seed=4)
        queries = unit_vectors(10, 64, seed=5)
        for q in queries:
            assert a.query_vector(q, k=10) == b.query_vector(q, k=10)


class TestPersistence:
    def test_roundtrip_answers_identically(self, tmp_path):
        idx = filled_index(100, dim=48, seed=2)
        queries = unit_vectors(20, 48, seed=3)
        before = [idx.query_vector(q, k=10) for q in queries]
        path = tmp_path / "kb.idx"
        idx.persist(path)
        loaded = KnowledgeIndex.load(path)
        after = [loaded.query_vector(q, k=10) for q in queries]
        for b_res, a_res in zip(before, after):
            assert [d for d, _ in b_res] == [d for d, _ in a_res]
            for (_, sb), (_, sa) in zip(b_res, a_res):
                assert sa == pytest.approx(sb, abs=1e-9)

    def test_unwritable_path_errors(self, tmp_path):
        idx = filled_index(5, dim=16)
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not a directory")
        with pytest.raises(OSError):
            idx.persist(blocker / "kb.idx")

    def test_empty_index_roundtrip(self, tmp_path):
        idx = KnowledgeIndex(dim=16)
        path = tmp_path / "empty.idx"
        idx.persist(path)
        loaded = KnowledgeIndex.load(path)
        assert len(loaded) == 0
        assert loaded.query_vector(unit_vectors(1, 16, 1)[0], k=3) == []

    def test_corrupt_file_diagnosed(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"not an index at all")
        with pytest.raises(IndexFormatError):
            KnowledgeIndex.load(path)

    def test_truncated_vectors_diagnosed(self, tmp_path):
        idx = filled_index(10, dim=16)
        path = tmp_path / "kb.idx"
        idx.persist(path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(IndexFormatError):
            KnowledgeIndex.load(path)

    def test_embedder_restored_for_text_queries(self, tmp_path):
        emb = HashEmbedder(dim=32, seed=6)
        idx = KnowledgeIndex(embedder=emb, backend="hnsw", seed=6)
        for i, text in enumerate(["pandas index", "torch tensors", "numpy arrays"]):
            idx.add_text(f"d{i}", text)
        path = tmp_path / "kb.idx"
        idx.persist(path)
        loaded = KnowledgeIndex.load(path)
        assert loaded.query("pandas index", k=1) == idx.query("pandas index", k=1)


def test_doc_retriever_returns_ranked_documents():
    emb = HashEmbedder(dim=64, seed=0)
    docs = [
        KBDocument(f"d{i}", f"p{i}", 0, text, 3, 1)
        for i, text in enumerate(
            ["Post : sorting a dataframe", "Post : matrix inversion", "Post : plotting errors"]
        )
    ]
    idx = KnowledgeIndex(embedder=emb, backend="exact")
    for d in docs:
        idx.add_text(d.doc_id, d.text)
    retriever = DocRetriever(idx, docs)
    got = retriever.retrieve("sorting a dataframe", k=2)
    assert got[0].doc_id == "d0"
    assert len(got) == 2
