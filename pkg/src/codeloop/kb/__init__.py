from codeloop.kb.clean import clean_text
from codeloop.kb.embed import HashEmbedder, HttpEmbedder, cosine
from codeloop.kb.index import DocRetriever, KnowledgeIndex
from codeloop.kb.ingest import (
    KBDocument,
    KBPost,
    compose_documents,
    parse_dump,
    read_documents,
    write_documents,
)

__all__ = [
    "clean_text",
    "HashEmbedder",
    "HttpEmbedder",
    "cosine",
    "DocRetriever",
    "KnowledgeIndex",
    "KBDocument",
    "KBPost",
    "compose_documents",
    "parse_dump",
    "read_documents",
    "write_documents",
]
