"""Token counting used for document budgeting and prompt accounting.

The default counter is a deterministic rule: a token is either a maximal run
of word characters (letters, digits, underscore) or a single non-space
symbol character. ``"Post : hello world"`` therefore counts 4 tokens
(``Post``, ``:``, ``hello``, ``world``). Provider-accurate tokenizers can be
registered under a name and selected through config; everything downstream
only sees the ``count_tokens`` interface.
"""

from __future__ import annotations

import re
from typing import Callable

TokenCounter = Callable[[str], int]

_WORD_OR_SYMBOL = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def rule_token_count(text: str) -> int:
    """Count tokens with the default word/symbol rule. Empty text counts 0."""
    if not text:
        return 0
    return len(_WORD_OR_SYMBOL.findall(text))


_REGISTRY: dict[str, TokenCounter] = {"rule": rule_token_count}


def register_tokenizer(name: str, counter: TokenCounter) -> None:
    """Register a token counter under ``name``, replacing any previous one."""
    _REGISTRY[name] = counter


def get_tokenizer(name: str = "rule") -> TokenCounter:
    if name not in _REGISTRY:
        known = ", ".join(sorted(_REGISTRY))
        raise KeyError(f"unknown tokenizer {name!r} (registered: {known})")
    return _REGISTRY[name]
