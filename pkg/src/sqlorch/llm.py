"""Provider abstraction for all model calls, with templating and record/replay.

Three built-in providers: an HTTP chat-completion client (OpenAI-compatible
wire shape), a scripted rule provider for unit tests, and a cassette provider
that records or replays any inner provider for deterministic offline runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import requests

from .errors import (
    CassetteMissError,
    ConfigError,
    SqlorchError,
    TemplateRenderError,
    TransportError,
)
from . import templates as _template_assets

_PLACEHOLDER_RE = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)\}")


@dataclass(frozen=True)
class DecodingParams:
    """Decoding parameters attached to a model reference."""

    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class ModelRef:
    """Opaque reference to a model served by a named provider."""

    provider_name: str
    model_id: str
    params: DecodingParams = field(default_factory=DecodingParams)


@dataclass
class Completion:
    """One provider response; text is the exact provider output, untransformed."""

    text: str
    usage: dict | None = None
    latency_ms: float = 0.0


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_placeholders: frozenset[str]

    def render(self, variables: dict[str, str]) -> str:
        missing = [name for name in self.required_placeholders if name not in variables]
        if missing:
            raise TemplateRenderError(self.template_id, missing)
        out = self.body
        for name in self.required_placeholders:
            out = out.replace("{" + name + "}", str(variables[name]))
        return out


def get_template(template_id: str) -> PromptTemplate:
    """Look up a bundled template. Unknown id is a configuration error."""
    body = _template_assets.template_body(template_id)
    if body is None:
        known = ", ".join(_template_assets.template_ids())
        raise ConfigError(f"unknown template_id '{template_id}' (known: {known})")
    names = frozenset(_PLACEHOLDER_RE.findall(body))
    return PromptTemplate(template_id=template_id, body=body, required_placeholders=names)


def render(template_id: str, variables: dict[str, str]) -> str:
    """Render a template; every placeholder must be substituted, extras ignored."""
    rendered = get_template(template_id).render(variables)
    leftover = _PLACEHOLDER_RE.findall(rendered)
    if leftover:
        # Only possible if a substituted value itself injected placeholder syntax.
        raise TemplateRenderError(template_id, leftover)
    return rendered


def fingerprint(model: ModelRef, prompt: str) -> str:
    """Stable request fingerprint over (model_id, prompt, decoding params)."""
    payload = json.dumps(
        {
            "model_id": model.model_id,
            "prompt": prompt,
            "temperature": model.params.temperature,
            "max_tokens": model.params.max_tokens,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Provider(Protocol):
    def complete(self, model: ModelRef, prompt: str) -> Completion: ...


class ScriptedProvider:
    """Deterministic rule provider: first matching regex wins.

    Rules are (pattern, response) pairs checked in order with re.search. Pure:
    the same prompt always yields the same response.
    """

    def __init__(self, rules: list[tuple[str, str]], default_response: str | None = None):
        self._rules = [(re.compile(p, re.DOTALL), r) for p, r in rules]
        self._default = default_response

    def complete(self, model: ModelRef, prompt: str) -> Completion:
        if not prompt:
            raise SqlorchError("empty prompt")
        for pattern, response in self._rules:
            if pattern.search(prompt):
                return Completion(text=response)
        if self._default is not None:
            return Completion(text=self._default)
        raise SqlorchError(f"no scripted rule matched prompt starting {prompt[:60]!r}")


class CassetteProvider:
    """Record/replay wrapper keyed by request fingerprint.

    record: delegate to the inner provider and append each (fingerprint,
    response) to the cassette file. replay: answer from the cassette only; a
    missing fingerprint is an error, never a silent live call. passthrough:
    delegate without touching the cassette.

    Repeated identical requests replay in recorded order; once a fingerprint's
    recordings are exhausted the last one sticks, so replay is usable from
    concurrent callers.
    """

    def __init__(self, path: str | Path, mode: str = "replay", inner: Provider | None = None):
        if mode not in ("record", "replay", "passthrough"):
            raise ConfigError(f"unknown cassette mode '{mode}'")
        if mode in ("record", "passthrough") and inner is None:
            raise ConfigError(f"cassette mode '{mode}' requires an inner provider")
        self.path = Path(path)
        self.mode = mode
        self._inner = inner
        self._lock = threading.Lock()
        self._entries: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        if mode == "replay":
            self._load()

    def _load(self) -> None:
        if not self.path.exists():
            raise ConfigError(f"cassette file not found: {self.path}")
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._entries.setdefault(entry["fingerprint"], []).append(entry["response_text"])

    def complete(self, model: ModelRef, prompt: str) -> Completion:
        fp = fingerprint(model, prompt)
        if self.mode == "passthrough":
            return self._inner.complete(model, prompt)
        if self.mode == "record":
            completion = self._inner.complete(model, prompt)
            with self._lock:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(
                        json.dumps(
                            {"fingerprint": fp, "response_text": completion.text},
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
            return completion
        with self._lock:
            recorded = self._entries.get(fp)
            if not recorded:
                raise CassetteMissError(fp)
            i = self._cursor.get(fp, 0)
            text = recorded[min(i, len(recorded) - 1)]
            self._cursor[fp] = i + 1
        return Completion(text=text)


class HttpChatProvider:
    """OpenAI-compatible chat-completions client.

    POSTs {model, messages, temperature, max_tokens} to <base_url>/chat/completions
    and returns choices[0].message.content. The API key is read from an
    environment variable at call time.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "SQLORCH_API_KEY",
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def complete(self, model: ModelRef, prompt: str) -> Completion:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": model.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": model.params.temperature,
            "max_tokens": model.params.max_tokens,
        }
        started = time.monotonic()
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat-completions request failed: {exc}") from exc
        latency = (time.monotonic() - started) * 1000.0
        if resp.status_code != 200:
            raise TransportError(f"chat-completions HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat-completions response: {exc}") from exc
        usage = payload.get("usage") if isinstance(payload.get("usage"), dict) else None
        return Completion(text=text, usage=usage, latency_ms=latency)


def complete_with_retries(
    provider: Provider,
    model: ModelRef,
    prompt: str,
    retries: int = 2,
    backoff_base_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Completion:
    """Call the provider, retrying transport errors with exponential backoff.

    Only TransportError is retried; scripted/cassette errors are deterministic
    and retrying them would just repeat the failure.
    """
    attempt = 0
    while True:
        try:
            return provider.complete(model, prompt)
        except TransportError:
            if attempt >= retries:
                raise
            sleep(backoff_base_s * (2**attempt))
            attempt += 1
