"""Configuration binding: TOML file with environment-variable interpolation,
provider/model table construction, and validation.

Flags given on the command line override config values; config values override
the defaults below. Secrets never live in the file: string values may embed
${ENV_VAR}, resolved at load time.
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .llm import (
    CassetteProvider,
    DecodingParams,
    HttpChatProvider,
    ModelRef,
    Provider,
    ScriptedProvider,
)

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

# Model roles a subcommand may look up in [models.<role>].
KNOWN_ROLES = ("revllm", "planner", "sqlgen", "summarizer", "judge_qse", "judge_sse")


@dataclass
class RetrievalConfig:
    k_knowledge: int = 4
    k_schema: int = 3
    embedder: str = "hashing"


@dataclass
class WorkflowConfig:
    max_tasks: int = 10
    parallelism: int = 1
    summary_mode: str = "concat"


@dataclass
class ExecConfig:
    connection: str = ""
    row_limit: int = 1000
    timeout_ms: int = 10_000
    order_sensitivity_policy: str = "gold_order_by"
    mode: str = "evaluation"


@dataclass
class JudgeConfig:
    parallelism: int = 1


@dataclass
class Config:
    providers: dict[str, dict] = field(default_factory=dict)
    models: dict[str, dict] = field(default_factory=dict)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    exec: ExecConfig = field(default_factory=ExecConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)

    _provider_cache: dict[str, Provider] = field(default_factory=dict, repr=False)

    def model_ref(self, role: str) -> ModelRef:
        """Resolve a model role to its ModelRef; missing roles are config errors."""
        entry = self.models.get(role)
        if entry is None:
            raise ConfigError(
                f"model role '{role}' is not configured (add a [models.{role}] table)"
            )
        provider_name = entry.get("provider")
        if not provider_name:
            raise ConfigError(f"[models.{role}] has no provider")
        if provider_name not in self.providers:
            raise ConfigError(
                f"[models.{role}] references unknown provider '{provider_name}'"
            )
        params = DecodingParams(
            temperature=float(entry.get("temperature", 0.0)),
            max_tokens=int(entry.get("max_tokens", 1024)),
        )
        return ModelRef(
            provider_name=provider_name,
            model_id=str(entry.get("model_id", role)),
            params=params,
        )

    def provider(self, name: str) -> Provider:
        """Instantiate (and cache) a named provider."""
        if name in self._provider_cache:
            return self._provider_cache[name]
        entry = self.providers.get(name)
        if entry is None:
            raise ConfigError(f"unknown provider '{name}'")
        kind = entry.get("kind")
        if kind == "http":
            base_url = entry.get("base_url")
            if not base_url:
                raise ConfigError(f"http provider '{name}' has no base_url")
            provider: Provider = HttpChatProvider(
                base_url=base_url,
                api_key_env=entry.get("api_key_env", "SQLORCH_API_KEY"),
                timeout_s=float(entry.get("timeout_s", 60.0)),
            )
        elif kind == "scripted":
            rules = [(r["pattern"], r["response"]) for r in entry.get("rules", [])]
            provider = ScriptedProvider(rules, default_response=entry.get("default_response"))
        elif kind == "cassette":
            path = entry.get("path")
            if not path:
                raise ConfigError(f"cassette provider '{name}' has no path")
            inner_name = entry.get("inner")
            inner = self.provider(inner_name) if inner_name else None
            provider = CassetteProvider(path, mode=entry.get("mode", "replay"), inner=inner)
        else:
            raise ConfigError(f"provider '{name}' has unknown kind {kind!r}")
        self._provider_cache[name] = provider
        return provider

    def provider_for(self, role: str) -> tuple[ModelRef, Provider]:
        ref = self.model_ref(role)
        return ref, self.provider(ref.provider_name)

    def validate(self) -> None:
        """Check structural invariants: model references resolve, bounds positive."""
        for role, entry in self.models.items():
            name = entry.get("provider", "")
            if name not in self.providers:
                raise ConfigError(
                    f"[models.{role}] references unknown provider '{name}'"
                )
        for label, value in (
            ("retrieval.k_knowledge", self.retrieval.k_knowledge),
            ("retrieval.k_schema", self.retrieval.k_schema),
        ):
            if value < 0:
                raise ConfigError(f"{label} must be >= 0, got {value}")
        for label, value in (
            ("workflow.max_tasks", self.workflow.max_tasks),
            ("workflow.parallelism", self.workflow.parallelism),
            ("exec.row_limit", self.exec.row_limit),
            ("exec.timeout_ms", self.exec.timeout_ms),
            ("judge.parallelism", self.judge.parallelism),
        ):
            if value < 1:
                raise ConfigError(f"{label} must be >= 1, got {value}")
        if self.workflow.summary_mode not in ("concat", "llm"):
            raise ConfigError(
                f"workflow.summary_mode must be concat or llm, got {self.workflow.summary_mode!r}"
            )
        if self.exec.mode not in ("evaluation", "sandbox"):
            raise ConfigError(f"exec.mode must be evaluation or sandbox, got {self.exec.mode!r}")
        if self.exec.order_sensitivity_policy not in ("gold_order_by", "always", "never"):
            raise ConfigError(
                "exec.order_sensitivity_policy must be gold_order_by, always, or never"
            )


def _interpolate(value):
    if isinstance(value, str):
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset environment variable ${{{name}}}")
            return os.environ[name]

        return _ENV_RE.sub(repl, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def load_config(path: str | Path | None = None) -> Config:
    """Build a Config from defaults plus an optional TOML file."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        data = _interpolate(data)

    cfg = Config()
    cfg.providers = dict(data.get("providers", {}))
    cfg.models = dict(data.get("models", {}))
    _bind(cfg.retrieval, data.get("retrieval", {}))
    _bind(cfg.workflow, data.get("workflow", {}))
    _bind(cfg.exec, data.get("exec", {}))
    _bind(cfg.judge, data.get("judge", {}))
    cfg.validate()
    return cfg


def _bind(target, section: dict) -> None:
    for key, value in section.items():
        if not hasattr(target, key):
            raise ConfigError(f"unknown config key '{key}' in [{type(target).__name__}]")
        current = getattr(target, key)
        try:
            setattr(target, key, type(current)(value) if current is not None else value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from exc
