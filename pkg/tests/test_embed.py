import httpx
import numpy as np
import pytest

from codeloop.kb.embed import EmbeddingError, HashEmbedder, HttpEmbedder, cosine


class TestHashEmbedder:
    def test_deterministic(self):
        emb = HashEmbedder(dim=256, seed=3)
        a = emb.embed("reverse a dataframe by index list")
        b = emb.embed("reverse a dataframe by index list")
        assert np.array_equal(a, b)

    def test_self_similarity(self):
        emb = HashEmbedder(dim=1536)
        v = emb.embed("pivot table aggregation")
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-9)

    def test_unrelated_strings_not_identical(self):
        emb = HashEmbedder(dim=1536)
        a = emb.embed("sparse matrix solver tolerance")
        b = emb.embed("convolutional image augmentation pipeline")
        assert cosine(a, b) < 1.0 - 1e-6

    def test_unit_norm(self):
        emb = HashEmbedder(dim=512, seed=1)
        for text in ("", "x", "a longer sentence with several tokens"):
            assert np.linalg.norm(emb.embed(text)) == pytest.approx(1.0, abs=1e-6)

    def test_dimension_from_config(self):
        assert HashEmbedder(dim=64).embed("abc").shape == (64,)

    def test_seed_changes_projection(self):
        a = HashEmbedder(dim=512, seed=0).embed("same text")
        b = HashEmbedder(dim=512, seed=9).embed("same text")
        assert cosine(a, b) < 0.99

    def test_shared_tokens_raise_similarity(self):
        emb = HashEmbedder(dim=1536)
        near = cosine(emb.embed("sort the index"), emb.embed("sort the columns"))
        far = cosine(emb.embed("sort the index"), emb.embed("train gradient boosting"))
        assert near > far


class TestHttpEmbedder:
    def _embedder(self, handler, **kw):
        return HttpEmbedder(
            base_url="https://embed.test/v1",
            model="embedding-model",
            dim=4,
            transport=httpx.MockTransport(handler),
            sleep=lambda s: None,
            **kw,
        )

    def test_success(self):
        def handler(request):
            return httpx.Response(200, json={"data": [{"embedding": [1, 0, 0, 0]}]})

        vec = self._embedder(handler).embed("hello")
        assert vec.tolist() == [1, 0, 0, 0]

    def test_retries_then_succeeds(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 3:
                return httpx.Response(500, text="boom")
            return httpx.Response(200, json={"data": [{"embedding": [0, 1, 0, 0]}]})

        vec = self._embedder(handler).embed("hello")
        assert len(calls) == 3
        assert vec.tolist() == [0, 1, 0, 0]

    def test_permanent_failure_no_retry(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(401, text="bad key")

        with pytest.raises(EmbeddingError):
            self._embedder(handler).embed("hello")
        assert len(calls) == 1

    def test_exhausted_retries_carry_diagnostics(self):
        def handler(request):
            return httpx.Response(503, text="overloaded")

        with pytest.raises(EmbeddingError) as err:
            self._embedder(handler).embed("hello")
        assert err.value.diagnostics.get("status") == 503

    def test_dimension_check(self):
        def handler(request):
            return httpx.Response(200, json={"data": [{"embedding": [1, 0]}]})

        with pytest.raises(EmbeddingError):
            self._embedder(handler).embed("hello")
