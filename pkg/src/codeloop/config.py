"""Layered engine configuration: defaults < file < environment < flags.

The file layer is one JSON document; the environment layer reads
``CODELOOP_*`` variables; the flag layer is whatever the CLI collected.
Secrets (API keys) are never part of the config: backends read them from
their own environment variables at call time.

The resolved :class:`EngineConfig` is immutable, fully serializable, and
embedded verbatim into every run record; resolving a config's own
``to_dict()`` output with no overrides yields an equal config.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from codeloop.llm import RoleStack, SamplingConfig

ENV_PREFIX = "CODELOOP_"

DEFAULTS: dict[str, Any] = {
    "cot_model": {
        "model_name": "mock",
        "temperature": 0.9,
        "top_p": 0.9,
        "max_output_tokens": 2048,
    },
    "code_model": {
        "model_name": "mock",
        "temperature": 0.9,
        "top_p": 0.9,
        "max_output_tokens": 2048,
    },
    "auto_cot_1": True,
    "auto_cot_2": True,
    "n_max": 5,
    "attempt_semantics": "generations",
    "retrieval_k": 1,
    "budget": 3000,
    "min_comments": 10,
    "embed_dim": 1536,
    "tokenizer": "rule",
    "seed": 0,
    "timeout_s": 120.0,
    "memory_mb": None,
    "executor": "mock",
    "shim_cmd": None,
    "env_manifest_id": "local",
    "env_builds_dir": None,
    "dataset_path": None,
    "docs_path": None,
    "index_path": None,
    "template_dir": None,
    "transcripts_path": None,
    "executor_script_path": None,
    "backends": {"mock": {"kind": "mock"}},
    "workers": 4,
    "feedback_cap_bytes": 8192,
    "max_prompt_tokens": None,
}

# Environment variables the engine honors, mapped to config keys.
ENV_KEYS = {
    "N_MAX": "n_max",
    "RETRIEVAL_K": "retrieval_k",
    "BUDGET": "budget",
    "MIN_COMMENTS": "min_comments",
    "SEED": "seed",
    "WORKERS": "workers",
    "TIMEOUT_S": "timeout_s",
    "EXECUTOR": "executor",
    "TEMPERATURE": "temperature",  # applies to both model roles
    "TOP_P": "top_p",
}


class ConfigError(ValueError):
    def __init__(self, key: str, layer: str, detail: str) -> None:
        super().__init__(f"config key {key!r} from {layer}: {detail}")
        self.key = key
        self.layer = layer


@dataclass(frozen=True)
class EngineConfig:
    cot_model: SamplingConfig
    code_model: SamplingConfig
    auto_cot_1: bool = True
    auto_cot_2: bool = True
    n_max: int = 5
    attempt_semantics: str = "generations"
    retrieval_k: int = 1
    budget: int = 3000
    min_comments: int = 10
    embed_dim: int = 1536
    tokenizer: str = "rule"
    seed: int = 0
    timeout_s: float = 120.0
    memory_mb: int | None = None
    executor: str = "mock"
    shim_cmd: tuple[str, ...] | None = None
    env_manifest_id: str = "local"
    env_builds_dir: str | None = None
    dataset_path: str | None = None
    docs_path: str | None = None
    index_path: str | None = None
    template_dir: str | None = None
    transcripts_path: str | None = None
    executor_script_path: str | None = None
    backends: tuple[tuple[str, str], ...] = ()  # (model_name, json spec) pairs
    workers: int = 4
    feedback_cap_bytes: int = 8192
    max_prompt_tokens: int | None = None

    @property
    def role_stack(self) -> RoleStack:
        return RoleStack(cot_model=self.cot_model, code_model=self.code_model)

    def backend_specs(self) -> dict[str, dict]:
        return {name: json.loads(spec) for name, spec in self.backends}

    def to_dict(self) -> dict[str, Any]:
        return {
            "cot_model": _model_dict(self.cot_model),
            "code_model": _model_dict(self.code_model),
            "auto_cot_1": self.auto_cot_1,
            "auto_cot_2": self.auto_cot_2,
            "n_max": self.n_max,
            "attempt_semantics": self.attempt_semantics,
            "retrieval_k": self.retrieval_k,
            "budget": self.budget,
            "min_comments": self.min_comments,
            "embed_dim": self.embed_dim,
            "tokenizer": self.tokenizer,
            "seed": self.seed,
            "timeout_s": self.timeout_s,
            "memory_mb": self.memory_mb,
            "executor": self.executor,
            "shim_cmd": list(self.shim_cmd) if self.shim_cmd else None,
            "env_manifest_id": self.env_manifest_id,
            "env_builds_dir": self.env_builds_dir,
            "dataset_path": self.dataset_path,
            "docs_path": self.docs_path,
            "index_path": self.index_path,
            "template_dir": self.template_dir,
            "transcripts_path": self.transcripts_path,
            "executor_script_path": self.executor_script_path,
            "backends": self.backend_specs(),
            "workers": self.workers,
            "feedback_cap_bytes": self.feedback_cap_bytes,
            "max_prompt_tokens": self.max_prompt_tokens,
        }


def _model_dict(cfg: SamplingConfig) -> dict[str, Any]:
    return {
        "model_name": cfg.model_name,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_output_tokens": cfg.max_output_tokens,
    }


def _coerce(key: str, value: Any, template: Any, layer: str) -> Any:
    if value is None or template is None:
        return value
    try:
        if isinstance(template, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(template, int) and not isinstance(template, bool):
            return int(value)
        if isinstance(template, float):
            return float(value)
        if isinstance(template, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, layer, str(exc)) from None
    return value


def _merge_layer(base: dict[str, Any], updates: Mapping[str, Any], layer: str) -> None:
    for key, value in updates.items():
        if key in ("temperature", "top_p"):  # shorthand hitting both roles
            for role in ("cot_model", "code_model"):
                base[role][key] = _coerce(key, value, DEFAULTS[role][key], layer)
            continue
        if key not in DEFAULTS:
            raise ConfigError(key, layer, "unknown key")
        if key in ("cot_model", "code_model"):
            if not isinstance(value, Mapping):
                raise ConfigError(key, layer, "expected an object")
            for sub, subval in value.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigError(f"{key}.{sub}", layer, "unknown key")
                base[key][sub] = _coerce(f"{key}.{sub}", subval, DEFAULTS[key][sub], layer)
            continue
        if key == "backends":
            if not isinstance(value, Mapping):
                raise ConfigError(key, layer, "expected an object")
            base[key] = {str(k): dict(v) for k, v in value.items()}
            continue
        if key == "shim_cmd":
            if value is not None and not isinstance(value, (list, tuple)):
                raise ConfigError(key, layer, "expected a list of argv strings")
            base[key] = list(value) if value is not None else None
            continue
        base[key] = _coerce(key, value, DEFAULTS[key], layer)


def _env_layer(env: Mapping[str, str]) -> dict[str, Any]:
    picked: dict[str, Any] = {}
    for suffix, key in ENV_KEYS.items():
        name = ENV_PREFIX + suffix
        if name in env:
            picked[key] = env[name]
    return picked


def resolve_config(
    file: str | Path | Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
) -> EngineConfig:
    """Resolve the effective config with precedence flags > env > file > defaults."""
    merged = copy.deepcopy(DEFAULTS)
    if file is not None:
        if isinstance(file, (str, Path)):
            try:
                file_dict = json.loads(Path(file).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(str(file), "file", f"unreadable config file: {exc}") from None
        else:
            file_dict = dict(file)
        _merge_layer(merged, file_dict, "file")
    _merge_layer(merged, _env_layer(env if env is not None else os.environ), "environment")
    if flags:
        _merge_layer(merged, {k: v for k, v in flags.items() if v is not None}, "flags")
    return _build(merged)


def _build(merged: dict[str, Any]) -> EngineConfig:
    try:
        cot_model = SamplingConfig(**merged["cot_model"])
        code_model = SamplingConfig(**merged["code_model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("cot_model/code_model", "resolved", str(exc)) from None

    def positive(key: str, minimum: int = 1) -> int:
        value = merged[key]
        if not isinstance(value, int) or value < minimum:
            raise ConfigError(key, "resolved", f"must be an integer >= {minimum}, got {value!r}")
        return value

    if merged["attempt_semantics"] not in ("generations", "corrections"):
        raise ConfigError("attempt_semantics", "resolved", f"unknown value {merged['attempt_semantics']!r}")
    if merged["executor"] not in ("mock", "real"):
        raise ConfigError("executor", "resolved", f"unknown value {merged['executor']!r}")
    if merged["timeout_s"] <= 0:
        raise ConfigError("timeout_s", "resolved", "must be positive")

    return EngineConfig(
        cot_model=cot_model,
        code_model=code_model,
        auto_cot_1=bool(merged["auto_cot_1"]),
        auto_cot_2=bool(merged["auto_cot_2"]),
        n_max=positive("n_max"),
        attempt_semantics=merged["attempt_semantics"],
        retrieval_k=positive("retrieval_k", minimum=0),
        budget=positive("budget"),
        min_comments=positive("min_comments"),
        embed_dim=positive("embed_dim"),
        tokenizer=str(merged["tokenizer"]),
        seed=int(merged["seed"]),
        timeout_s=float(merged["timeout_s"]),
        memory_mb=merged["memory_mb"],
        executor=merged["executor"],
        shim_cmd=tuple(merged["shim_cmd"]) if merged["shim_cmd"] else None,
        env_manifest_id=str(merged["env_manifest_id"]),
        env_builds_dir=merged["env_builds_dir"],
        dataset_path=merged["dataset_path"],
        docs_path=merged["docs_path"],
        index_path=merged["index_path"],
        template_dir=merged["template_dir"],
        transcripts_path=merged["transcripts_path"],
        executor_script_path=merged["executor_script_path"],
        backends=tuple(
            (name, json.dumps(spec, sort_keys=True))
            for name, spec in sorted(merged["backends"].items())
        ),
        workers=positive("workers"),
        feedback_cap_bytes=positive("feedback_cap_bytes"),
        max_prompt_tokens=merged["max_prompt_tokens"],
    )
