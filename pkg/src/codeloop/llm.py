"""Chat completion client: pluggable backends, retries, token accounting.

Backends implement a single ``complete(text, cfg)`` call. Two ship here: an
HTTP backend for standard chat-completion JSON APIs (credentials only via
environment variables) and a scripted mock that replays an ordered
transcript, which makes the whole engine bit-deterministic in tests.

Every successful call's token usage is appended once to the run's ledger,
keyed by attempt and role; retries never double-count because recording
happens after the call succeeds.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from codeloop.tokenizer import rule_token_count

DEFAULT_TEMPERATURE = 0.9
DEFAULT_TOP_P = 0.9
DEFAULT_MAX_OUTPUT_TOKENS = 2048


class BackendError(Exception):
    pass


class TransientBackendError(BackendError):
    """Worth retrying: timeouts, rate limits, server-side failures."""


class PermanentBackendError(BackendError):
    """Not worth retrying: bad credentials, malformed requests, script misses."""


@dataclass(frozen=True)
class SamplingConfig:
    model_name: str
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of range [0, 2]: {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p out of range (0, 1]: {self.top_p}")


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be nonnegative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class RoleStack:
    """Which model serves each role: guidance generation vs code generation."""

    cot_model: SamplingConfig
    code_model: SamplingConfig


@dataclass
class LedgerEntry:
    attempt_index: int
    role: str
    usage: TokenUsage


class UsageLedger:
    """Append-only, thread-safe token accounting for one solve run."""

    def __init__(self) -> None:
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, attempt_index: int, role: str, usage: TokenUsage) -> None:
        with self._lock:
            self._entries.append(LedgerEntry(attempt_index, role, usage))

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def total(self) -> TokenUsage:
        total = TokenUsage()
        for e in self.entries:
            total = total + e.usage
        return total

    def attempt_total(self, attempt_index: int) -> TokenUsage:
        total = TokenUsage()
        for e in self.entries:
            if e.attempt_index == attempt_index:
                total = total + e.usage
        return total


class ChatBackend(Protocol):
    def complete(self, text: str, cfg: SamplingConfig) -> tuple[str, TokenUsage]: ...


@dataclass(frozen=True)
class TranscriptEntry:
    """One scripted exchange: ``match`` is a prompt substring, a 1-based
    call index, or None to match unconditionally."""

    reply: str
    match: str | int | None = None
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class MockBackend:
    """Replays an ordered transcript; any divergence names the failing step."""

    def __init__(self, transcript: list[TranscriptEntry]) -> None:
        if not transcript:
            raise ValueError("mock transcript must be non-empty")
        self._transcript = transcript
        self._pos = 0
        self._lock = threading.Lock()

    def complete(self, text: str, cfg: SamplingConfig) -> tuple[str, TokenUsage]:
        with self._lock:
            step = self._pos + 1
            if self._pos >= len(self._transcript):
                raise PermanentBackendError(
                    f"mock transcript exhausted at step {step} "
                    f"({len(self._transcript)} entries)"
                )
            entry = self._transcript[self._pos]
            if isinstance(entry.match, str) and entry.match not in text:
                raise PermanentBackendError(
                    f"mock transcript step {step}: prompt does not contain "
                    f"expected substring {entry.match!r}"
                )
            if isinstance(entry.match, int) and entry.match != step:
                raise PermanentBackendError(
                    f"mock transcript step {step}: entry declared for step {entry.match}"
                )
            self._pos += 1
        usage = TokenUsage(
            prompt_tokens=(
                entry.prompt_tokens
                if entry.prompt_tokens is not None
                else rule_token_count(text)
            ),
            completion_tokens=(
                entry.completion_tokens
                if entry.completion_tokens is not None
                else rule_token_count(entry.reply)
            ),
        )
        return entry.reply, usage


def load_transcript(raw: list[dict]) -> list[TranscriptEntry]:
    return [
        TranscriptEntry(
            reply=item["reply"],
            match=item.get("match"),
            prompt_tokens=item.get("prompt_tokens"),
            completion_tokens=item.get("completion_tokens"),
        )
        for item in raw
    ]


class HttpChatBackend:
    """Client for chat-completion HTTPS JSON APIs.

    Maps HTTP 429 and 5xx plus transport errors to transient failures;
    anything else (auth, validation) is permanent. Usage comes from the
    response when the server reports it, else from the local token rule.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "CODELOOP_API_KEY",
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=base_url, headers=headers, timeout=timeout, transport=transport
        )

    def complete(self, text: str, cfg: SamplingConfig) -> tuple[str, TokenUsage]:
        payload = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": text}],
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "max_tokens": cfg.max_output_tokens,
        }
        try:
            resp = self._client.post("/chat/completions", json=payload)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code != 200:
            raise PermanentBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        reply = body["choices"][0]["message"]["content"]
        usage = body.get("usage") or {}
        return reply, TokenUsage(
            prompt_tokens=int(usage.get("prompt_tokens", rule_token_count(text))),
            completion_tokens=int(usage.get("completion_tokens", rule_token_count(reply))),
        )


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    jitter: float = 0.25

    def delay(self, attempt: int, rng: random.Random) -> float:
        base = self.base_delay * (2 ** (attempt - 1))
        return base * (1.0 + self.jitter * rng.random())


class BackendRegistry:
    """Resolves model names to backends.

    A provider is either a shared backend instance (HTTP clients are
    stateless per call) or a factory invoked per run, which gives each
    solve its own transcript cursor for mocks.
    """

    def __init__(self) -> None:
        self._shared: dict[str, ChatBackend] = {}
        self._factories: dict[str, Callable[[str], ChatBackend]] = {}

    def register(self, model_name: str, backend: ChatBackend) -> None:
        self._shared[model_name] = backend

    def register_factory(self, model_name: str, factory: Callable[[str], ChatBackend]) -> None:
        """``factory(run_key)`` builds a fresh backend for each solve run."""
        self._factories[model_name] = factory

    def open_run(self, run_key: str) -> dict[str, ChatBackend]:
        backends = dict(self._shared)
        for name, factory in self._factories.items():
            backends[name] = factory(run_key)
        return backends

    @classmethod
    def from_config(cls, spec: dict, transcripts_path: str | None = None) -> "BackendRegistry":
        """Build a registry from the config file's backend map.

        Each entry is ``{"kind": "http", "base_url": ..., "api_key_env": ...}``
        or ``{"kind": "mock", "transcripts": <path>}`` where the transcripts
        file holds either a flat entry list (replayed per run) or
        ``{"problems": {run_key: [...]}, "default": [...]}``.
        """
        registry = cls()
        for model_name, entry in spec.items():
            kind = entry.get("kind", "http")
            if kind == "http":
                registry.register(
                    model_name,
                    HttpChatBackend(
                        base_url=entry["base_url"],
                        api_key_env=entry.get("api_key_env", "CODELOOP_API_KEY"),
                        timeout=float(entry.get("timeout", 120.0)),
                    ),
                )
            elif kind == "mock":
                path = entry.get("transcripts", transcripts_path)
                if path is None:
                    raise ValueError(f"mock backend {model_name!r} needs a transcripts file")
                raw = json.loads(Path(path).read_text(encoding="utf-8"))

                def factory(run_key: str, raw=raw) -> MockBackend:
                    if isinstance(raw, dict):
                        entries = raw.get("problems", {}).get(run_key, raw.get("default"))
                        if entries is None:
                            raise PermanentBackendError(
                                f"no transcript for run {run_key!r} and no default"
                            )
                    else:
                        entries = raw
                    return MockBackend(load_transcript(entries))

                registry.register_factory(model_name, factory)
            else:
                raise ValueError(f"unknown backend kind {kind!r} for {model_name!r}")
        return registry


class CompletionClient:
    """Uniform completion interface with retries and ledger recording."""

    def __init__(
        self,
        backends: dict[str, ChatBackend],
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self._backends = backends
        self._retry = retry or RetryPolicy()
        self._sleep = sleep
        self._rng = rng or random.Random(0)

    def complete(
        self,
        prompt,
        cfg: SamplingConfig,
        ledger: UsageLedger | None = None,
        attempt_index: int = 0,
        role: str = "",
    ) -> tuple[str, TokenUsage]:
        backend = self._backends.get(cfg.model_name)
        if backend is None:
            raise PermanentBackendError(f"no backend registered for model {cfg.model_name!r}")
        text = prompt.text if hasattr(prompt, "text") else str(prompt)
        last: TransientBackendError | None = None
        for attempt in range(1, self._retry.max_attempts + 1):
            try:
                reply, usage = backend.complete(text, cfg)
            except TransientBackendError as exc:
                last = exc
                if attempt < self._retry.max_attempts:
                    self._sleep(self._retry.delay(attempt, self._rng))
                continue
            if ledger is not None:
                ledger.record(attempt_index, role, usage)
            return reply, usage
        raise TransientBackendError(
            f"backend for {cfg.model_name!r} failed after "
            f"{self._retry.max_attempts} attempts: {last}"
        )
